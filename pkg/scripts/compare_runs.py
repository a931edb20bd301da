"""
Compare two evaluation reports written by `python -m src.cli eval --json`.

Prints a metric table with the before/after values, the delta and whether
the change clears the noise threshold.

Usage:
    python scripts/compare_runs.py runs/baseline/eval_test.json runs/no-cvr/eval_test.json
    python scripts/compare_runs.py BEFORE AFTER --threshold 0.01
"""

import argparse
import json
import sys
from pathlib import Path

BOLD   = "\033[1m"
RESET  = "\033[0m"
GREEN  = "\033[92m"
YELLOW = "\033[93m"
RED    = "\033[91m"

METRICS = ("dice", "miou", "dice_fg", "miou_fg")


def load_report(path: Path | str) -> dict:
    with open(path, encoding="utf-8") as f:
        report = json.load(f)
    missing = [m for m in METRICS if m not in report]
    if missing:
        raise ValueError(f"{path}: missing metrics {', '.join(missing)}")
    return report


def compare(before: dict, after: dict, threshold: float = 0.02) -> list[tuple[str, float, float, float, str]]:
    """(metric, before, after, delta, verdict) per metric; verdict is better/worse/same."""
    rows = []
    for metric in METRICS:
        b, a = float(before[metric]), float(after[metric])
        delta = a - b
        verdict = "better" if delta > threshold else "worse" if delta < -threshold else "same"
        rows.append((metric, b, a, delta, verdict))
    return rows


def print_comparison(before_path: str, after_path: str, threshold: float) -> None:
    before, after = load_report(before_path), load_report(after_path)
    print(f"\n{BOLD}Before:{RESET} {before.get('label') or before_path}  ({before.get('samples', '?')} samples)")
    print(f"{BOLD}After: {RESET} {after.get('label') or after_path}  ({after.get('samples', '?')} samples)")
    if before.get("split") != after.get("split"):
        print(f"  {YELLOW}WARNING:{RESET} comparing different splits ({before.get('split')} vs {after.get('split')})")
    print(f"\n  {'metric':10}  {'before':>8}  {'after':>8}  {'delta':>8}  {'better?':>8}")
    marks = {"better": f"{GREEN}YES{RESET}", "worse": f"{RED}NO{RESET}", "same": "—"}
    for metric, b, a, delta, verdict in compare(before, after, threshold):
        print(f"  {metric:10}  {b:>8.4f}  {a:>8.4f}  {delta:>+8.4f}  {marks[verdict]:>8}")


def main() -> None:
    parser = argparse.ArgumentParser(description="Compare two evaluation JSON reports")
    parser.add_argument("before")
    parser.add_argument("after")
    parser.add_argument("--threshold", type=float, default=0.02, help="smallest delta counted as a change")
    args = parser.parse_args()
    try:
        print_comparison(args.before, args.after, args.threshold)
    except (OSError, ValueError) as e:
        print(f"{RED}ERROR:{RESET} {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
