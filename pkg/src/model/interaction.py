"""
Conditioned interaction between image patches and text tokens.

A single layer of cross-attention in each direction fuses V (B, N, D) and
E (B, L, D) into V′ and E′. Linear interest heads turn V′ and E′ into
patch-of-interest and word-of-interest weights (simplex per sample, pads
excluded). Cosine alignment between patches and words, pooled with those
weights, gives the pair similarity used by the batch contrastive loss.

Masks passed around here are "valid" masks: True where a token is real.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from src.autodiff import ops
from src.autodiff.tensor import Tensor
from src.errors import ConfigurationError, DimensionError
from src.model.layers import Linear, Module

logger = logging.getLogger(__name__)

ATTENTION_MODES = ("cross", "self")
ALIGNMENT_EPS = 1e-8


@dataclass
class FusionOutput:
    v_prime: Tensor                 # (B, N, D)
    e_prime: Tensor                 # (B, L, D)
    w_poi: Tensor                   # (B, N)
    w_woi: Tensor                   # (B, L), zero at pads


class CrossAttention(Module):
    """softmax(Q·Kᵀ/√D over keys)·V with learnable W_q, W_k, W_v."""

    def __init__(self, width: int, rng: np.random.Generator) -> None:
        self.wq = Linear(width, width, rng, bias=False)
        self.wk = Linear(width, width, rng, bias=False)
        self.wv = Linear(width, width, rng, bias=False)

    def attention(self, query: Tensor, context: Tensor, key_valid: np.ndarray | None = None) -> Tensor:
        """Attention weights (B, P, Q); rows sum to 1 over valid keys, invalid keys get 0."""
        if query.shape[-1] != context.shape[-1]:
            raise DimensionError(f"query width {query.shape} != context width {context.shape}")
        q, k = self.wq(query), self.wk(context)
        logits = ops.scale(q @ ops.swap_last(k), 1.0 / math.sqrt(q.shape[-1]))
        mask = None if key_valid is None else key_valid[:, None, :]
        return ops.softmax(logits, axis=-1, mask=mask)

    def __call__(self, query: Tensor, context: Tensor, key_valid: np.ndarray | None = None) -> Tensor:
        return self.attention(query, context, key_valid) @ self.wv(context)


class InterestHead(Module):
    """Linear D→1 per position, softmax over positions."""

    def __init__(self, width: int, rng: np.random.Generator) -> None:
        self.score = Linear(width, 1, rng)

    def __call__(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        logits = ops.reshape(self.score(x), x.shape[:-1])
        return ops.softmax(logits, axis=-1, mask=valid)


class ConditionedInteraction(Module):
    def __init__(self, width: int, rng: np.random.Generator, attention: str = "cross") -> None:
        if attention not in ATTENTION_MODES:
            raise ConfigurationError(f"attention must be one of {ATTENTION_MODES}, got {attention!r}")
        self.text_to_vision_attn = CrossAttention(width, rng)
        self.vision_to_text_attn = CrossAttention(width, rng)
        self.poi_head = InterestHead(width, rng)
        self.woi_head = InterestHead(width, rng)
        self._mode = attention

    @property
    def mode(self) -> str:
        return self._mode

    def _joint(self, v: Tensor, e: Tensor, text_valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        batch, patches = v.shape[:2]
        valid = np.concatenate([np.ones((batch, patches), dtype=bool), text_valid], axis=1)
        return ops.concat([v, e], axis=1), valid

    def text_to_vision(self, v: Tensor, e: Tensor, text_valid: np.ndarray) -> Tensor:
        """V′: patches query the text tokens (pads excluded as keys)."""
        if self._mode == "self":
            context, valid = self._joint(v, e, text_valid)
            return self.text_to_vision_attn(v, context, valid)
        return self.text_to_vision_attn(v, e, text_valid)

    def vision_to_text(self, e: Tensor, v: Tensor, text_valid: np.ndarray) -> Tensor:
        """E′: tokens query the patches. Pad query rows are computed and ignored downstream."""
        if self._mode == "self":
            context, valid = self._joint(v, e, text_valid)
            return self.vision_to_text_attn(e, context, valid)
        return self.vision_to_text_attn(e, v)

    def interest_weights(self, v_prime: Tensor, e_prime: Tensor, text_valid: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.poi_head(v_prime), self.woi_head(e_prime, text_valid)

    def __call__(self, v: Tensor, e: Tensor, text_valid: np.ndarray) -> FusionOutput:
        v_prime = self.text_to_vision(v, e, text_valid)
        e_prime = self.vision_to_text(e, v, text_valid)
        w_poi, w_woi = self.interest_weights(v_prime, e_prime, text_valid)
        return FusionOutput(v_prime, e_prime, w_poi, w_woi)


# ----------------------------------------------------------------------
# Alignment and similarity
# ----------------------------------------------------------------------

def _unit_rows(x: Tensor, eps: float) -> Tensor:
    return x / (ops.norm(x, axis=-1) + eps)


def alignment_matrix(v: Tensor, e: Tensor, eps: float = ALIGNMENT_EPS) -> Tensor:
    """Cosine similarities a_ij = vᵢ·e_j / (‖vᵢ‖‖e_j‖); (…, N, D) × (…, L, D) → (…, N, L)."""
    if v.shape[-1] != e.shape[-1]:
        raise DimensionError(f"alignment needs equal widths: {v.shape} vs {e.shape}")
    return _unit_rows(v, eps) @ ops.swap_last(_unit_rows(e, eps))


def pair_similarity(a: Tensor, w_poi: Tensor, w_woi: Tensor, text_valid: np.ndarray | None = None) -> Tensor:
    """
    S = ½(Σᵢ w_vⁱ maxⱼ a_ij + Σⱼ w_eʲ maxᵢ a_ij), batched over leading axes.
    The max over words skips pad columns; pad words carry zero weight.
    """
    valid = None if text_valid is None else np.asarray(text_valid)[..., None, :]
    vision_term = ops.sum(w_poi * ops.max(a, axis=-1, mask=valid), axis=-1)
    text_term = ops.sum(w_woi * ops.max(a, axis=-2), axis=-1)
    return ops.scale(vision_term + text_term, 0.5)


def aggregate_similarity(a: Tensor, w_woi: Tensor) -> Tensor:
    """Word-weighted alignment Σⱼ w_eʲ maxᵢ a_ij (comparison utility, not a training loss)."""
    return ops.sum(w_woi * ops.max(a, axis=-2), axis=-1)


def similarity_matrix(
    v: Tensor,
    e: Tensor,
    w_poi: Tensor,
    w_woi: Tensor,
    text_valid: np.ndarray,
) -> Tensor:
    """S[i, j] = pair_similarity(image i, text j) over the batch → (B, B)."""
    batch, patches, width = v.shape
    tokens = e.shape[1]
    vi = ops.reshape(v, (batch, 1, patches, width))
    ej = ops.reshape(e, (1, batch, tokens, width))
    a = alignment_matrix(vi, ej)                                    # B, B, N, L
    return pair_similarity(
        a,
        ops.reshape(w_poi, (batch, 1, patches)),
        ops.reshape(w_woi, (1, batch, tokens)),
        np.asarray(text_valid)[None, :, :],
    )


def contrastive_loss(s: Tensor, tau: float, form: str = "standard") -> Tensor:
    """
    Symmetric InfoNCE over a (B, B) similarity matrix, matched pairs on the diagonal.

    form="standard" uses exp(S/τ). form="printed" uses exp(S)/τ in numerator and
    denominator, where τ cancels; both coincide exactly at τ = 1.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {tau}")
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {s.shape}")
    if form == "standard":
        logits = ops.scale(s, 1.0 / tau)
    elif form == "printed":
        logits = s - math.log(tau)
    else:
        raise ConfigurationError(f"unknown contrastive form {form!r}")
    eye = np.eye(s.shape[0], dtype=s.dtype)
    image_to_text = ops.sum(ops.log_softmax(logits, axis=1) * eye)
    text_to_image = ops.sum(ops.log_softmax(logits, axis=0) * eye)
    return ops.scale(image_to_text + text_to_image, -0.5 / s.shape[0])
