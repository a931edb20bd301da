"""
Ablation grids.

Axes map config keys to candidate values; the grid is their Cartesian
product, run once per seed. The pseudo-key "conditions" switches the three
interest-weight conditions together. Each cell × seed is one CSV row; a
failing cell is logged with its traceback and recorded as failed so the
rest of the grid still runs.
"""

import csv
import itertools
import logging
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from src.errors import ConfigurationError
from src.training.config import RunConfig, config_keys
from src.training.inference import evaluate
from src.training.trainer import train

logger = logging.getLogger(__name__)

CONDITION_KEYS = ("use_ccl_condition", "use_cvr_condition", "use_clr_condition")
METRIC_COLUMNS = ("val_miou", "val_dice", "test_miou", "test_dice", "test_miou_fg", "test_dice_fg")

# (config, data_root, run_dir) → metrics
Runner = Callable[[RunConfig, Path, Path], dict[str, float]]


def load_axes(path: Path | str) -> dict[str, list[Any]]:
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    axes = data.get("axes", data) if isinstance(data, dict) else None
    if not isinstance(axes, dict) or not axes:
        raise ConfigurationError(f"{path}: expected a mapping of axis name → list of values")
    return {name: list(values) if isinstance(values, list) else [values] for name, values in axes.items()}


def expand_grid(axes: dict[str, list[Any]]) -> list[dict[str, Any]]:
    for name in axes:
        if name != "conditions" and name not in config_keys():
            raise ConfigurationError(f"unknown ablation axis {name!r}")
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def cell_config(base: RunConfig, cell: dict[str, Any], seed: int) -> RunConfig:
    overrides = {k: v for k, v in cell.items() if k != "conditions"}
    if "conditions" in cell:
        overrides.update({k: bool(cell["conditions"]) for k in CONDITION_KEYS})
    overrides["master_seed"] = seed
    return base.with_overrides(**overrides)


def default_runner(config: RunConfig, data_root: Path, run_dir: Path) -> dict[str, float]:
    result = train(config, data_root, run_dir)
    test = evaluate(result.best_checkpoint, "test", data_root)
    best = max(result.history, key=lambda r: r.val_miou)
    return {
        "val_miou": best.val_miou,
        "val_dice": best.val_dice,
        "test_miou": test.miou,
        "test_dice": test.dice,
        "test_miou_fg": test.miou_fg,
        "test_dice_fg": test.dice_fg,
    }


def _label(cell: dict[str, Any]) -> str:
    return ",".join(f"{k}={v}" for k, v in cell.items()) or "base"


def run_ablation_grid(
    base: RunConfig,
    axes: dict[str, list[Any]],
    data_root: Path | str,
    out_dir: Path | str,
    seeds: tuple[int, ...] = (0, 1, 2),
    runner: Runner | None = None,
) -> Path:
    """Run every cell × seed; returns the CSV path (one row per run)."""
    runner = runner or default_runner
    data_root, out_dir = Path(data_root), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = expand_grid(axes)
    csv_path = out_dir / "ablation.csv"
    axis_names = list(axes)
    logger.info("Ablation grid: %d cells × %d seeds", len(cells), len(seeds))

    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["cell", "seed", *axis_names, "status", *METRIC_COLUMNS, "seconds"])
        for index, cell in enumerate(cells):
            for seed in seeds:
                started = time.perf_counter()
                status, metrics = "ok", {}
                try:
                    config = cell_config(base, cell, seed)
                    metrics = runner(config, data_root, out_dir / f"cell{index:03d}" / f"seed{seed}")
                except Exception:
                    logger.exception("Ablation cell %s seed %d failed", _label(cell), seed)
                    status = "failed"
                seconds = time.perf_counter() - started
                writer.writerow([
                    index, seed, *(cell[n] for n in axis_names), status,
                    *(f"{metrics[m]:.6f}" if m in metrics else "" for m in METRIC_COLUMNS),
                    f"{seconds:.1f}",
                ])
                f.flush()
                logger.info("cell %d (%s) seed %d: %s %s", index, _label(cell), seed, status,
                            " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return csv_path


def summarize(csv_path: Path | str, metric: str = "test_miou") -> list[dict[str, Any]]:
    """Mean and spread of one metric per cell over its successful seeds."""
    with open(csv_path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    fixed = {"cell", "seed", "status", "seconds", *METRIC_COLUMNS}
    cells: dict[str, dict[str, Any]] = {}
    for row in rows:
        entry = cells.setdefault(row["cell"], {
            "cell": int(row["cell"]),
            "axes": {k: v for k, v in row.items() if k not in fixed},
            "values": [],
            "failed": 0,
        })
        if row["status"] == "ok" and row.get(metric):
            entry["values"].append(float(row[metric]))
        else:
            entry["failed"] += 1
    summary = []
    for entry in cells.values():
        values = entry.pop("values")
        entry["runs"] = len(values)
        entry["mean"] = float(np.mean(values)) if values else float("nan")
        entry["std"] = float(np.std(values)) if values else float("nan")
        summary.append(entry)
    return sorted(summary, key=lambda e: e["cell"])
