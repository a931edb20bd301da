"""
Adam with a cosine-annealed learning rate.

State is kept per parameter name so it can be written into a checkpoint
and restored exactly.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from src.autodiff.tensor import Tensor

logger = logging.getLogger(__name__)


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """base·½(1 + cos(π·step/(T−1))): base at step 0, exactly 0 at step T−1."""
    if total_steps <= 1:
        return base
    progress = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class LRSchedule:
    base: float
    total_steps: int
    kind: str = "cosine"

    def __call__(self, step: int) -> float:
        if self.kind == "constant":
            return self.base
        return cosine_lr(self.base, step, self.total_steps)


class Adam:
    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self._params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self._params}
        self._v = {name: np.zeros_like(p.data) for name, p in self._params}

    def zero_grad(self) -> None:
        for _, p in self._params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        """One update. Parameter arrays are rebound, never written in place."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        correction1 = 1 - self.beta1 ** t
        correction2 = 1 - self.beta2 ** t
        for name, p in self._params:
            if p.grad is None:
                continue
            g = p.grad
            self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            m_hat = self._m[name] / correction1
            v_hat = self._v[name] / correction2
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {}
        for name, _ in self._params:
            state[f"adam.m.{name}"] = self._m[name]
            state[f"adam.v.{name}"] = self._v[name]
        return state

    def load_state_arrays(self, step_count: int, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = step_count
        for name, p in self._params:
            self._m[name] = np.asarray(arrays[f"adam.m.{name}"], dtype=p.dtype).reshape(p.shape)
            self._v[name] = np.asarray(arrays[f"adam.v.{name}"], dtype=p.dtype).reshape(p.shape)
