import importlib.util
import json
from pathlib import Path

import pytest

from src.cli import main
from src.data.dataset import read_manifest

SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"


def load_script(name):
    spec = importlib.util.spec_from_file_location(name, SCRIPTS / f"{name}.py")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_cost(capsys):
    assert main(["cost"]) == 0
    out = capsys.readouterr().out
    assert "visual_encoder" in out and "inference" in out and "training" in out


def test_gen_data(tmp_path, capsys):
    assert main(["gen-data", "--count", "10", "--seed", "1", "--out", str(tmp_path), "--canvas", "16"]) == 0
    assert len(read_manifest(tmp_path)) == 10
    assert "10 samples" in capsys.readouterr().out


def test_eval_writes_json_report(untrained_checkpoint, tmp_path):
    report = tmp_path / "reports" / "eval.json"
    assert main(["eval", "--ckpt", str(untrained_checkpoint), "--split", "val",
                 "--json", str(report), "--label", "untrained"]) == 0
    payload = json.loads(report.read_text(encoding="utf-8"))
    assert payload["label"] == "untrained"
    assert payload["split"] == "val"
    assert payload["samples"] == 2
    assert {"dice", "miou", "dice_fg", "miou_fg", "timestamp"} <= set(payload)


def test_infer_writes_mask_and_heatmaps(untrained_checkpoint, tiny_data, tmp_path):
    record = read_manifest(tiny_data)[0]
    image = tiny_data / record["image"]
    assert main(["infer", "--ckpt", str(untrained_checkpoint), "--image", str(image),
                 "--prompt", record["prompt"], "--emit-heatmaps", "--out", str(tmp_path)]) == 0
    stem = image.stem
    for name in (f"{stem}_mask.png", f"{stem}_poi.png", f"{stem}_woi.json", f"{stem}_woi.png"):
        assert (tmp_path / name).exists(), name


def test_steer(untrained_checkpoint, capsys):
    assert main(["steer", "--ckpt", str(untrained_checkpoint), "--split", "train", "--limit", "2"]) == 0
    assert "pairs" in capsys.readouterr().out


def test_missing_checkpoint_is_a_handled_error(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "nothing")]) == 1


def test_invalid_config_is_a_handled_error(tmp_path):
    config = tmp_path / "bad.yaml"
    config.write_text("learning_rate: -1\n", encoding="utf-8")
    assert main(["cost", "--config", str(config)]) == 1


def test_compare_runs(tmp_path):
    compare_runs = load_script("compare_runs")
    before = {"dice": 0.70, "miou": 0.60, "dice_fg": 0.50, "miou_fg": 0.40}
    after = {"dice": 0.75, "miou": 0.59, "dice_fg": 0.40, "miou_fg": 0.40}
    verdicts = {m: v for m, _, _, _, v in compare_runs.compare(before, after)}
    assert verdicts == {"dice": "better", "miou": "same", "dice_fg": "worse", "miou_fg": "same"}

    path = tmp_path / "partial.json"
    path.write_text(json.dumps({"dice": 0.5}), encoding="utf-8")
    with pytest.raises(ValueError, match="miou"):
        compare_runs.load_report(path)
