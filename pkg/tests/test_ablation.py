import csv
import math
from pathlib import Path

import pytest

from src.errors import ConfigurationError
from src.training.ablation import (
    CONDITION_KEYS,
    cell_config,
    expand_grid,
    load_axes,
    run_ablation_grid,
    summarize,
)
from src.training.diagnostics import MICRO_CONFIG

ABLATION_DIR = Path(__file__).resolve().parent.parent / "config" / "ablations"


def fake_runner(config, data_root, run_dir):
    if config.use_cvr and config.master_seed == 1:
        raise RuntimeError("boom")
    return {"val_miou": 0.5, "test_miou": 0.4 + 0.1 * config.use_clr + 0.01 * config.master_seed}


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_expand_grid_is_cartesian():
    cells = expand_grid({"use_cvr": [False, True], "alpha_v": [0.1, 0.5, 0.9]})
    assert len(cells) == 6
    assert cells[0] == {"use_cvr": False, "alpha_v": 0.1}
    assert cells[-1] == {"use_cvr": True, "alpha_v": 0.9}


def test_unknown_axis():
    with pytest.raises(ConfigurationError, match="unknown ablation axis"):
        expand_grid({"dropout": [0.1]})


def test_conditions_pseudo_key():
    config = cell_config(MICRO_CONFIG, {"conditions": False, "alpha_t": 0.5}, seed=4)
    assert all(getattr(config, key) is False for key in CONDITION_KEYS)
    assert config.alpha_t == 0.5 and config.master_seed == 4


@pytest.mark.parametrize("path", sorted(ABLATION_DIR.glob("*.yaml")), ids=lambda p: p.stem)
def test_every_preset_expands(path):
    cells = expand_grid(load_axes(path))
    assert cells
    for cell in cells:
        cell_config(MICRO_CONFIG, cell, seed=0)


def test_preset_sizes():
    assert len(expand_grid(load_axes(ABLATION_DIR / "components.yaml"))) == 4
    assert len(expand_grid(load_axes(ABLATION_DIR / "mask_ratio.yaml"))) == 25
    assert len(expand_grid(load_axes(ABLATION_DIR / "layers.yaml"))) == 10


def test_load_axes_rejects_non_mapping(tmp_path):
    path = tmp_path / "axes.yaml"
    path.write_text("- use_cvr\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_axes(path)


def test_grid_writes_one_row_per_run_and_survives_failures(tmp_path):
    axes = {"use_cvr": [False, True], "use_clr": [False, True]}
    csv_path = run_ablation_grid(MICRO_CONFIG, axes, tmp_path / "data", tmp_path / "out",
                                 seeds=(0, 1), runner=fake_runner)
    rows = read_rows(csv_path)
    assert len(rows) == 8
    failed = [r for r in rows if r["status"] == "failed"]
    assert len(failed) == 2
    assert all(r["use_cvr"] == "True" and r["seed"] == "1" for r in failed)
    assert all(r["test_miou"] == "" for r in failed)


def test_summarize(tmp_path):
    axes = {"use_cvr": [False, True], "use_clr": [False, True]}
    csv_path = run_ablation_grid(MICRO_CONFIG, axes, tmp_path / "data", tmp_path / "out",
                                 seeds=(0, 1), runner=fake_runner)
    summary = summarize(csv_path)
    assert [e["cell"] for e in summary] == [0, 1, 2, 3]
    first = summary[0]
    assert first["axes"] == {"use_cvr": "False", "use_clr": "False"}
    assert first["runs"] == 2 and first["failed"] == 0
    assert first["mean"] == pytest.approx(0.405)
    assert first["std"] == pytest.approx(0.005)
    last = summary[3]
    assert last["runs"] == 1 and last["failed"] == 1
    assert last["mean"] == pytest.approx(0.5)
    assert math.isnan(summarize(csv_path, metric="val_dice")[0]["mean"])
