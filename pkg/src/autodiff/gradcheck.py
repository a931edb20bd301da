"""
Finite-difference verification of reverse-mode gradients.

f is a zero-argument callable that rebuilds the scalar objective from the
current parameter values. Parameters should be float64 leaves; each checked
coordinate is nudged by ±h between passes and restored afterwards.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from src.autodiff.tensor import Tensor, no_grad
from src.errors import NumericError

logger = logging.getLogger(__name__)

# Floor for the relative-error denominator when both gradients vanish.
_REL_FLOOR = 1e-8


@dataclass
class ParameterCheck:
    name: str
    checked: int                    # coordinates evaluated
    max_abs_error: float
    rel_error: float


@dataclass
class GradcheckReport:
    h: float
    parameters: list[ParameterCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.parameters), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol

    def worst(self) -> ParameterCheck | None:
        return max(self.parameters, key=lambda p: p.rel_error, default=None)


def _scalar(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.size != 1:
        raise NumericError(f"gradcheck needs a scalar objective, got shape {out.shape}")
    value = out.item()
    if not np.isfinite(value):
        raise NumericError(f"objective is not finite: {value}")
    return value


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """
    Compare autodiff gradients with central differences (f(θ+h) − f(θ−h)) / 2h.

    Relative error per parameter is max|a − n| / max(max|a|, max|n|).
    With max_elements set, at most that many coordinates per parameter are
    drawn (without replacement) from rng.
    """
    named = list(params.items()) if isinstance(params, dict) else [
        (p.name or f"param{i}", p) for i, p in enumerate(params)
    ]
    for name, p in named:
        if p.dtype != np.float64:
            logger.warning("gradcheck on %s with dtype %s; float64 expected", name, p.dtype)
        p.zero_grad()

    out = f()
    if out.size != 1:
        raise NumericError(f"gradcheck needs a scalar objective, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError(f"objective is not finite: {out.item()}")
    if out.requires_grad:
        out.backward()

    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradcheckReport(h=h)
    with no_grad():
        for name, p in named:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                coords = np.sort(rng.choice(flat.size, size=max_elements, replace=False))

            numeric = np.empty(coords.size, dtype=np.float64)
            for k, i in enumerate(coords):
                original = flat[i]
                flat[i] = original + h
                plus = _scalar(f)
                flat[i] = original - h
                minus = _scalar(f)
                flat[i] = original
                numeric[k] = (plus - minus) / (2 * h)

            a = analytic.reshape(-1)[coords].astype(np.float64)
            diff = float(np.max(np.abs(a - numeric), initial=0.0))
            scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
            rel = diff / max(scale, _REL_FLOOR) if diff > 0 else 0.0
            report.parameters.append(ParameterCheck(name, int(coords.size), diff, rel))
            logger.debug("gradcheck %-32s n=%-5d abs=%.3e rel=%.3e", name, coords.size, diff, rel)
    return report
