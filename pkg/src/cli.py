"""
Command-line entry point.

Usage:
    python -m src.cli gen-data --count 2000 --seed 0 --out data/shapes
    python -m src.cli train --config config/default.yaml --data data/shapes --out runs/desk
    python -m src.cli eval --ckpt runs/desk/best --split test --json runs/desk/eval_test.json
    python -m src.cli infer --ckpt runs/desk/best --image scene.png --prompt "the upper left disc" --emit-heatmaps
    python -m src.cli steer --ckpt runs/desk/best --split test
    python -m src.cli gradcheck
    python -m src.cli ablate --config config/default.yaml --axes config/ablations/components.yaml \\
                             --data data/shapes --out runs/ablate-components
    python -m src.cli cost --config config/default.yaml

Every sub-command exits 0 on success and 1 on a handled error.
"""

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from src.data.dataset import SegmentationDataset, generate
from src.errors import ReconSegError, TrainingDivergedError
from src.training.ablation import load_axes, run_ablation_grid, summarize
from src.training.checkpoint import load_checkpoint
from src.training.config import RunConfig, load_config
from src.training.diagnostics import MICRO_CONFIG, run_gradcheck_suite
from src.training.flops import cost_breakdown
from src.training.inference import evaluate, infer, save_mask, steering_gap, write_heatmaps
from src.training.trainer import train

logger = logging.getLogger("reconseg")

LOG_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"

BOLD   = "\033[1m"
RESET  = "\033[0m"
GREEN  = "\033[92m"
YELLOW = "\033[93m"
RED    = "\033[91m"

GRADCHECK_TOL = 1e-4


# ---------------------------------------------------------------------------
# Sub-commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    manifest = generate(args.out, args.count, tuple(args.ratios), args.seed, args.canvas, args.workers)
    print(f"{GREEN}✓{RESET} {args.count} samples → {manifest}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    try:
        result = train(config, args.data, args.out)
    except TrainingDivergedError as e:
        logger.error("%s; diagnostic at %s, last good checkpoint %s", e, e.diagnostic_path, e.last_good_checkpoint)
        return 1
    print(f"\n{BOLD}Best val mIoU:{RESET} {result.best_val_miou:.4f}  ({result.best_checkpoint})")
    print(f"{BOLD}Log:{RESET} {result.log_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate(args.ckpt, args.split, args.data, args.csv)
    summary = report.summary()
    print(f"\n{BOLD}{args.split} split{RESET} ({summary['samples']} samples)")
    for key in ("dice", "miou", "dice_fg", "miou_fg"):
        print(f"  {key:<8} {summary[key]:.4f}")
    if args.json:
        payload = {
            "checkpoint": str(args.ckpt),
            "split": args.split,
            "label": args.label,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            **summary,
        }
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(json.dumps(payload, indent=2), encoding="utf-8")
        print(f"  saved → {args.json}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    result = infer(args.ckpt, args.image, args.prompt, emit_heatmaps=args.emit_heatmaps)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    mask_path = out_dir / f"{stem}_mask.png"
    save_mask(result, mask_path)
    print(f"{GREEN}✓{RESET} mask ({int(result.mask.sum())} px) → {mask_path}")
    if result.empty_prompt:
        print(f"  {YELLOW}empty prompt{RESET}: mask is image-only")
    if args.emit_heatmaps:
        for path in write_heatmaps(result, out_dir, stem):
            print(f"  heatmap → {path}")
        for word, weight in result.w_woi or []:
            print(f"  {word:<10} {weight:.3f}")
    return 0


def cmd_steer(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    root = args.data or ckpt.dataset
    if root is None:
        logger.error("checkpoint does not record a dataset; pass --data")
        return 1
    gap, pairs = steering_gap(ckpt.build_model(), SegmentationDataset(root, args.split), ckpt.vocabulary, args.limit)
    color = GREEN if gap > 0 else RED
    print(f"\n{BOLD}Counterfactual steering{RESET}: {pairs} pairs, mean IoU gap {color}{gap:+.4f}{RESET}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else MICRO_CONFIG
    results = run_gradcheck_suite(seed=args.seed, max_elements=args.max_elements or None, config=config)
    print(f"\n{BOLD}Gradient checks (tol {GRADCHECK_TOL:.0e}){RESET}")
    failed = 0
    for r in results:
        ok = r.report.passed(GRADCHECK_TOL)
        failed += not ok
        icon = f"{GREEN}✓{RESET}" if ok else f"{RED}✗{RESET}"
        line = f"  {icon}  {r.name:<20} {r.report.max_rel_error:.2e}  {r.seconds:6.1f}s"
        worst = r.report.worst()
        if not ok and worst is not None:
            line += f"  worst: {worst.name}"
        print(line)
    if failed:
        print(f"\n{RED}{BOLD}{failed} check(s) failed.{RESET}")
        return 1
    print(f"\n{GREEN}{BOLD}All checks passed.{RESET}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    base = load_config(args.config) if args.config else RunConfig()
    csv_path = run_ablation_grid(base, load_axes(args.axes), args.data, args.out, tuple(args.seeds))
    print(f"\n{BOLD}Ablation{RESET} → {csv_path}")
    for entry in summarize(csv_path, args.metric):
        axes = "  ".join(f"{k}={v}" for k, v in entry["axes"].items())
        failed = f"  {RED}{entry['failed']} failed{RESET}" if entry["failed"] else ""
        print(f"  [{entry['cell']:>3}] {axes:<48} {args.metric}={entry['mean']:.4f} ± {entry['std']:.4f}{failed}")
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    report = cost_breakdown(config)
    print(f"\n{BOLD}{'part':<16} {'params':>12} {'MACs':>14}{RESET}")
    for part, params, macs in report.rows():
        print(f"  {part:<14} {params:>12,} {macs:>14,}")
    print(f"{BOLD}  {'inference':<14} {report.params_inference:>12,} {report.macs_inference:>14,}{RESET}")
    print(f"{BOLD}  {'training':<14} {report.params_train:>12,} {report.macs_train:>14,}{RESET}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reconseg", description="Conditioned-reconstruction referring segmentation")
    parser.add_argument("--verbose", "-v", action="store_true", help="DEBUG logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="YAML/JSON run config (defaults if omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--data", help="dataset root (defaults to the one recorded in the checkpoint)")
    p.add_argument("--csv", help="per-sample metrics CSV")
    p.add_argument("--json", help="summary report for scripts/compare_runs.py")
    p.add_argument("--label", default="", help="free-form label stored in the JSON report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--emit-heatmaps", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("steer", help="counterfactual prompt-pair steering gap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--data")
    p.add_argument("--limit", type=int, default=100)
    p.set_defaults(func=cmd_steer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--config", help="micro-config (built-in if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-elements", type=int, default=24, help="coordinates per parameter (0 = all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--config", help="base run config")
    p.add_argument("--axes", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--metric", default="test_miou")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cost", help="parameter and multiply-add counts")
    p.add_argument("--config")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        return args.func(args)
    except ReconSegError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
