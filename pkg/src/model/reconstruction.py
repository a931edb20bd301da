"""
Interest-weighted feature masking and the conditioned reconstructor Ψ.

Masking draws m rows without replacement with probability proportional to the
interest weights (Gumbel top-k), zeroes them, and Ψ rebuilds them from the
other modality's full features. Each Ψ block is

    x ← x + softmax((x·W_q)(c·W_k)ᵀ/√D ⊙ condition)·(c·W_v)
    x ← x + FF(x)

with the condition broadcast over query rows and pad context positions
excluded from the softmax.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from src.autodiff import ops
from src.autodiff.tensor import Tensor
from src.errors import ConfigurationError, DimensionError
from src.model.layers import FeedForward, Linear, Module

logger = logging.getLogger(__name__)

MASK_STRATEGIES = ("weighted", "random")


@dataclass(frozen=True)
class MaskSpec:
    ratio: float
    indices: np.ndarray             # distinct row indices, in draw order
    size: int                       # rows in the masked matrix

    @property
    def count(self) -> int:
        return int(self.indices.size)

    def keep(self) -> np.ndarray:
        """(size,) float mask: 0 at masked rows, 1 elsewhere."""
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.size):
            raise IndexError(f"mask index out of range for {self.size} rows: {self.indices}")
        keep = np.ones(self.size)
        keep[self.indices] = 0
        return keep


def mask_count(ratio: float, candidates: int) -> int:
    """m = max(1, round-half-up(α·P)) for α > 0, capped at P; 0 when α = 0 or P = 0."""
    if ratio == 0 or candidates == 0:
        return 0
    return min(candidates, max(1, math.floor(ratio * candidates + 0.5)))


def sample_mask(
    weights: np.ndarray,
    ratio: float,
    rng: np.random.Generator,
    valid: np.ndarray | None = None,
    strategy: str = "weighted",
) -> MaskSpec:
    """
    Draw mask_count(ratio, #valid) positions without replacement.

    weighted: Gumbel top-k on log-weights, i.e. successive draws proportional
    to weight; zero-weight positions come after every positive one, in uniform
    random order. random: uniform choice among valid positions.
    Invalid (pad) positions are never drawn.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"mask ratio must lie in [0, 1], got {ratio}")
    if strategy not in MASK_STRATEGIES:
        raise ConfigurationError(f"mask strategy must be one of {MASK_STRATEGIES}, got {strategy!r}")
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    size = weights.size
    valid = np.ones(size, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    candidates = np.flatnonzero(valid)
    m = mask_count(ratio, candidates.size)
    if m == 0:
        return MaskSpec(ratio, np.empty(0, dtype=np.int64), size)

    gumbel = rng.gumbel(size=candidates.size)
    tiebreak = rng.random(candidates.size)
    w = weights[candidates]
    if strategy == "weighted":
        with np.errstate(divide="ignore"):
            score = np.where(w > 0, np.log(np.where(w > 0, w, 1)) + gumbel, -np.inf)
    else:
        score = np.zeros(candidates.size)
    order = np.lexsort((tiebreak, -score))
    return MaskSpec(ratio, candidates[order[:m]].astype(np.int64), size)


def apply_mask(x: Tensor, specs: MaskSpec | list[MaskSpec]) -> Tensor:
    """
    Zero the masked rows of (P, D) or, with one spec per sample, (B, P, D).
    Unmasked rows are multiplied by exactly 1.
    """
    if isinstance(specs, MaskSpec):
        if x.ndim != 2 or x.shape[0] != specs.size:
            raise DimensionError(f"mask over {specs.size} rows cannot apply to {x.shape}")
        keep = specs.keep()[:, None]
    else:
        if x.ndim != 3 or x.shape[0] != len(specs) or any(s.size != x.shape[1] for s in specs):
            raise DimensionError(f"{len(specs)} masks cannot apply to {x.shape}")
        keep = np.stack([s.keep() for s in specs])[:, :, None]
    return x * keep.astype(x.dtype)


class ReconstructionBlock(Module):
    def __init__(self, width: int, hidden: int | None, rng: np.random.Generator) -> None:
        self.wq = Linear(width, width, rng, bias=False)
        self.wk = Linear(width, width, rng, bias=False)
        self.wv = Linear(width, width, rng, bias=False)
        self.ffn = FeedForward(width, hidden, rng) if hidden else None

    def attention(self, query: Tensor, context: Tensor, condition: Tensor, key_valid: np.ndarray) -> Tensor:
        """Conditioned attention weights (B, P, Q)."""
        q, k = self.wq(query), self.wk(context)
        logits = ops.scale(q @ ops.swap_last(k), 1.0 / math.sqrt(q.shape[-1]))
        logits = logits * ops.reshape(condition, (condition.shape[0], 1, condition.shape[1]))
        return ops.softmax(logits, axis=-1, mask=key_valid[:, None, :])

    def __call__(self, query: Tensor, context: Tensor, condition: Tensor, key_valid: np.ndarray) -> Tensor:
        x = query + self.attention(query, context, condition, key_valid) @ self.wv(context)
        return x + self.ffn(x) if self.ffn is not None else x


class ConditionedReconstructor(Module):
    """Ψ: K stacked blocks; block k's output is block k+1's query, the context stays fixed."""

    def __init__(self, width: int, layers: int, hidden: int | None, rng: np.random.Generator) -> None:
        if layers < 1:
            raise ConfigurationError(f"reconstructor needs at least one layer, got {layers}")
        self.blocks = [ReconstructionBlock(width, hidden, rng) for _ in range(layers)]

    def __call__(
        self,
        query_masked: Tensor,
        context: Tensor,
        condition: Tensor,
        key_valid: np.ndarray | None = None,
    ) -> Tensor:
        batch, rows, width = context.shape
        if query_masked.ndim != 3 or query_masked.shape[0] != batch or query_masked.shape[2] != width:
            raise DimensionError(f"query {query_masked.shape} does not match context {context.shape}")
        if condition.shape != (batch, rows):
            raise DimensionError(f"condition {condition.shape} must be (B, Q) = {(batch, rows)}")
        key_valid = np.ones((batch, rows), dtype=bool) if key_valid is None else np.asarray(key_valid, dtype=bool)
        x = query_masked
        for block in self.blocks:
            x = block(x, context, condition, key_valid)
        return x


def reconstruct(
    reconstructor: ConditionedReconstructor,
    query_masked: Tensor,
    context: Tensor,
    condition: Tensor,
    key_valid: np.ndarray | None = None,
) -> Tensor:
    return reconstructor(query_masked, context, condition, key_valid)


# ----------------------------------------------------------------------
# Reconstruction losses
# ----------------------------------------------------------------------

def _weighted_feature_error(target: Tensor, recon: Tensor, weights: np.ndarray) -> Tensor:
    if target.shape != recon.shape:
        raise DimensionError(f"reconstruction {recon.shape} != target {target.shape}")
    error = ops.sum(ops.square(recon - target.detach()), axis=-1)            # B, P
    return ops.sum(error * np.asarray(weights, dtype=error.dtype), axis=-1)  # B


def loss_t2v(v: Tensor, v_hat: Tensor, w_poi: Tensor | np.ndarray) -> Tensor:
    """(1/N)·Σⱼ w_vʲ‖vⱼ − v̂ⱼ‖², averaged over the batch; V and W_poi are constants."""
    weights = w_poi.data if isinstance(w_poi, Tensor) else w_poi
    per_sample = _weighted_feature_error(v, v_hat, weights)
    return ops.mean(ops.scale(per_sample, 1.0 / v.shape[1]))


def loss_v2t(e: Tensor, e_hat: Tensor, w_woi: Tensor | np.ndarray, text_valid: np.ndarray | None = None) -> Tensor:
    """Mirror of loss_t2v over tokens; normalised by the non-pad token count."""
    weights = w_woi.data if isinstance(w_woi, Tensor) else np.asarray(w_woi)
    if text_valid is None:
        text_valid = np.ones(e.shape[:2], dtype=bool)
    weights = np.where(text_valid, weights, 0)
    per_sample = _weighted_feature_error(e, e_hat, weights)
    counts = np.maximum(np.asarray(text_valid).sum(axis=-1), 1).astype(per_sample.dtype)
    return ops.mean(per_sample / counts)
