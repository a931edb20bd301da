"""
Parameter containers built on the autodiff engine.

A Module owns Tensor leaves (requires_grad=True) and child modules as plain
attributes; named_parameters() walks them in attribute order, so parameter
names are stable and double as checkpoint keys ("text_encoder.blocks.0.attn.wq.weight").
"""

import logging
import math
from typing import Iterator

import numpy as np

from src.autodiff import ops
from src.autodiff.tensor import Tensor
from src.errors import CheckpointError, DimensionError

logger = logging.getLogger(__name__)


def uniform_parameter(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """uniform(−1/√fan_in, +1/√fan_in), float32."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def to_dtype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"parameter names differ: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
            p.grad = np.zeros_like(p.data)


class Linear(Module):
    """y = x·W + b with W stored (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True) -> None:
        self.weight = uniform_parameter(rng, (in_features, out_features), in_features)
        self.bias = uniform_parameter(rng, (out_features,), in_features) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects last axis {self.weight.shape[0]}, got input {x.shape}")
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator) -> None:
        fan_in = in_channels * kernel * kernel
        self.weight = uniform_parameter(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.bias = uniform_parameter(rng, (out_channels,), fan_in)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5) -> None:
        self.gamma = Tensor(np.ones(width, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        centred = x - ops.mean(x, axis=-1, keepdims=True)
        variance = ops.mean(ops.square(centred), axis=-1, keepdims=True)
        return centred / ops.sqrt(variance + self._eps) * self.gamma + self.beta


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator) -> None:
        self.inner = Linear(width, hidden, rng)
        self.outer = Linear(hidden, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ops.relu(self.inner(x)))


class MultiHeadSelfAttention(Module):
    """
    Scaled dot-product self-attention over (B, L, D) with a key padding mask.
    Pad keys get exactly zero attention weight.
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator) -> None:
        if width % heads:
            raise DimensionError(f"width {width} is not divisible by {heads} heads")
        self.wq = Linear(width, width, rng, bias=False)
        self.wk = Linear(width, width, rng, bias=False)
        self.wv = Linear(width, width, rng, bias=False)
        self.wo = Linear(width, width, rng)
        self._heads = heads

    def _split(self, x: Tensor) -> Tensor:
        batch, length, width = x.shape
        return ops.permute(ops.reshape(x, (batch, length, self._heads, width // self._heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, pad_mask: np.ndarray) -> Tensor:
        batch, length, width = x.shape
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        scores = ops.scale(q @ ops.swap_last(k), 1.0 / math.sqrt(width // self._heads))
        attn = ops.softmax(scores, axis=-1, mask=~pad_mask[:, None, None, :])
        merged = ops.reshape(ops.permute(attn @ v, (0, 2, 1, 3)), (batch, length, width))
        return self.wo(merged)
