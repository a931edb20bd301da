"""
Segmentation losses, the combined objective and overlap metrics.

Losses are averaged over the batch. Metrics binarise at probability 0.5
(logit 0) and count pixels with integer arithmetic.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.autodiff import ops
from src.autodiff.tensor import Tensor
from src.errors import ConfigurationError

logger = logging.getLogger(__name__)

DICE_EPS = 1.0
COMPONENTS = ("l_v2t", "l_t2v", "l_ccl", "l_dice", "l_ce")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0            # L_V2T
    lambda2: float = 1.0            # L_T2V
    lambda3: float = 0.2            # L_CCL
    lambda4: float = 5.0            # L_Dice + L_CE

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")

    def for_component(self, name: str) -> float:
        return {
            "l_v2t": self.lambda1,
            "l_t2v": self.lambda2,
            "l_ccl": self.lambda3,
            "l_dice": self.lambda4,
            "l_ce": self.lambda4,
        }[name]


def _as_target(target: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(target, dtype=like.dtype).reshape(like.shape)


def dice_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """1 − (2Σp·y + ε)/(Σp + Σy + ε) per sample with p = sigmoid(logits), ε = 1; batch mean."""
    y = _as_target(target, logits)
    p = ops.sigmoid(logits)
    axes = tuple(range(1, logits.ndim))
    intersection = ops.sum(p * y, axis=axes)
    denominator = ops.sum(p, axis=axes) + (y.sum(axis=axes) + DICE_EPS)
    return ops.mean(1.0 - (ops.scale(intersection, 2.0) + DICE_EPS) / denominator)


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Binary cross-entropy from logits, softplus(x) − x·y, mean over pixels and batch."""
    y = _as_target(target, logits)
    return ops.mean(ops.softplus(logits) - logits * y)


def total_loss(components: dict[str, Tensor | None], weights: LossWeights) -> Tensor:
    """
    L = λ1·L_V2T + λ2·L_T2V + λ3·L_CCL + λ4·(L_Dice + L_CE).
    Components that are None or carry a zero weight are left out of the graph.
    """
    total: Tensor | None = None
    for name in COMPONENTS:
        value = components.get(name)
        weight = weights.for_component(name)
        if value is None or weight == 0:
            continue
        term = ops.scale(value, weight)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# ----------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------

def binarize(logits_or_probs: np.ndarray, from_logits: bool = True) -> np.ndarray:
    values = np.asarray(logits_or_probs)
    return values >= 0 if from_logits else values >= 0.5


def _category_scores(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Dice and IoU for one category; empty prediction and empty target score 1."""
    inter = int(np.count_nonzero(pred & target))
    p = int(np.count_nonzero(pred))
    y = int(np.count_nonzero(target))
    union = p + y - inter
    if p + y == 0:
        return 1.0, 1.0
    return 2 * inter / (p + y), inter / union


@dataclass
class SampleMetrics:
    sample_id: str
    dice: float                     # mean over {foreground, background}
    miou: float
    dice_fg: float                  # foreground only
    miou_fg: float


def metrics(pred_mask: np.ndarray, target: np.ndarray, sample_id: str = "") -> SampleMetrics:
    pred = np.asarray(pred_mask, dtype=bool)
    target = np.asarray(target, dtype=bool)
    dice_fg, iou_fg = _category_scores(pred, target)
    dice_bg, iou_bg = _category_scores(~pred, ~target)
    return SampleMetrics(sample_id, (dice_fg + dice_bg) / 2, (iou_fg + iou_bg) / 2, dice_fg, iou_fg)


@dataclass
class MetricReport:
    per_sample: list[SampleMetrics] = field(default_factory=list)

    def add(self, sample: SampleMetrics) -> None:
        self.per_sample.append(sample)

    def _mean(self, attr: str) -> float:
        if not self.per_sample:
            return 0.0
        return float(np.mean([getattr(s, attr) for s in self.per_sample]))

    @property
    def dice(self) -> float:
        return self._mean("dice")

    @property
    def miou(self) -> float:
        return self._mean("miou")

    @property
    def dice_fg(self) -> float:
        return self._mean("dice_fg")

    @property
    def miou_fg(self) -> float:
        return self._mean("miou_fg")

    def summary(self) -> dict[str, float]:
        return {
            "samples": len(self.per_sample),
            "dice": self.dice,
            "miou": self.miou,
            "dice_fg": self.dice_fg,
            "miou_fg": self.miou_fg,
        }

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["sample_id", "dice", "miou", "dice_fg", "miou_fg"])
            for s in self.per_sample:
                writer.writerow([s.sample_id, f"{s.dice:.6f}", f"{s.miou:.6f}", f"{s.dice_fg:.6f}", f"{s.miou_fg:.6f}"])


def evaluate_masks(preds: list[np.ndarray], targets: list[np.ndarray], ids: list[str] | None = None) -> MetricReport:
    ids = ids if ids is not None else [str(i) for i in range(len(preds))]
    report = MetricReport()
    for sid, pred, target in zip(ids, preds, targets):
        report.add(metrics(pred, target, sid))
    return report
