"""
Differentiable operations on Tensor.

Every op checks shapes up front (DimensionError names both operands), computes
the forward pass with numpy, and returns Tensor.from_op with a closure that
maps the output gradient to one gradient per parent. Broadcasting follows the
trailing-axes rule; gradients are summed back to operand shape by unbroadcast().

Importing this module also installs the arithmetic operators on Tensor.
"""

import logging
import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.autodiff.tensor import Tensor, unbroadcast
from src.errors import DimensionError, NumericError

logger = logging.getLogger(__name__)

Operand = Tensor | float | int | np.ndarray


def as_tensor(x: Operand, like: Tensor | None = None) -> Tensor:
    """Wrap constants; they adopt the dtype of the tensor they meet."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a: Operand, b: Operand) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


# ----------------------------------------------------------------------
# Elementwise binary
# ----------------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    """Hadamard product with broadcasting."""
    a, b = _pair(a, b)
    _broadcast(a, b, "mul")

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return Tensor.from_op(out, (a, b), backward, "div")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return Tensor.from_op(x.data * x.dtype.type(factor), (x,), backward, "scale")


def neg(x: Tensor) -> Tensor:
    return Tensor.from_op(-x.data, (x,), lambda g: (-g,), "neg")


# ----------------------------------------------------------------------
# Elementwise unary
# ----------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return Tensor.from_op(np.where(positive, x.data, 0).astype(x.dtype), (x,),
                          lambda g: (g * positive,), "relu")


def square(x: Tensor) -> Tensor:
    return Tensor.from_op(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(x: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    out = np.logaddexp(0, x.data).astype(x.dtype)

    def backward(g):
        return (g * np.exp(-np.logaddexp(0, -x.data)),)

    return Tensor.from_op(out, (x,), backward, "softplus")


# ----------------------------------------------------------------------
# Linear algebra
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    a[..., M, K] @ b[..., K, P] with broadcasting over the leading batch axes.
    Backward: dA = dC·Bᵀ, dB = Aᵀ·dC (summed over broadcast batch axes).
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def norm(x: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along one axis. Zero vectors get a zero gradient."""
    out = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1)
        return (g * np.where(out > 0, x.data / safe, 0),)

    return Tensor.from_op(out if keepdims else np.squeeze(out, axis=axis), (x,), backward, "norm")


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------

def _expand_to(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return Tensor.from_op(np.asarray(out, dtype=x.dtype), (x,),
                          lambda g: (_expand_to(g, x.shape, axis, keepdims),), "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def max(x: Tensor, axis: int, keepdims: bool = False, mask: np.ndarray | None = None) -> Tensor:  # noqa: A001
    """
    Maximum along one axis. Positions where `mask` is False are ignored;
    a lane with no valid position yields 0 and passes no gradient.
    Ties resolve to the first index.
    """
    axis = _axis(axis, x.ndim)
    values = x.data
    valid = None
    if mask is not None:
        try:
            valid = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise DimensionError(f"max: mask shape {np.shape(mask)} does not broadcast to {x.shape}") from None
        values = np.where(valid, values, -np.inf)
    idx = np.argmax(values, axis=axis)
    idx = np.expand_dims(idx, axis)
    out = np.take_along_axis(values, idx, axis)
    live = np.ones_like(out, dtype=bool) if valid is None else valid.any(axis=axis, keepdims=True)
    out = np.where(live, out, 0).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, idx, g * live, axis)
        return (grad,)

    return Tensor.from_op(out if keepdims else np.squeeze(out, axis=axis), (x,), backward, "max")


# ----------------------------------------------------------------------
# Normalisations
# ----------------------------------------------------------------------

def _check_finite_input(x: Tensor, op: str) -> None:
    if np.isnan(x.data).any():
        raise NumericError(f"{op}: NaN in input of shape {x.shape}")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """
    Max-subtracted softmax. Positions where `mask` is False receive exactly 0;
    a lane with every position masked returns all zeros.
    """
    _check_finite_input(x, "softmax")
    z = x.data
    if mask is not None:
        try:
            z = np.where(np.broadcast_to(mask, z.shape), z, -np.inf)
        except ValueError:
            raise DimensionError(f"softmax: mask shape {np.shape(mask)} does not broadcast to {x.shape}") from None
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0)
    e = np.exp(z - zmax)
    total = np.sum(e, axis=axis, keepdims=True)
    out = np.divide(e, total, out=np.zeros_like(e), where=total > 0).astype(x.dtype)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite_input(x, "log_softmax")
    z = x.data
    zmax = np.max(z, axis=axis, keepdims=True)
    shifted = z - zmax
    out = (shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))).astype(x.dtype)

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


# ----------------------------------------------------------------------
# Shape manipulation
# ----------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return Tensor.from_op(np.transpose(x.data, axes), (x,),
                          lambda g: (np.transpose(g, inverse),), "permute")


def swap_last(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis = _axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise DimensionError(
                f"concat along axis {axis}: shapes {[u.shape for u in tensors]} disagree off-axis"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    axis = _axis(axis, x.ndim)
    if not 0 <= start <= stop <= x.shape[axis]:
        raise DimensionError(f"narrow: [{start}, {stop}) outside axis {axis} of {x.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return Tensor.from_op(x.data[index], (x,), backward, "narrow")


def take(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids] (embedding). ids may have any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise DimensionError(f"take: ids must be integers, got {ids.dtype}")

    def backward(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return Tensor.from_op(weight.data[ids], (weight,), backward, "take")


# ----------------------------------------------------------------------
# Image ops (NCHW)
# ----------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """
    Stride-1 'same' convolution. x: (B, C, H, W); weight: (O, C, k, k) with k odd.
    Lowered to one matmul over im2col columns.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    k = weight.shape[2]
    if k % 2 != 1 or weight.shape[3] != k:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {weight.shape}")
    batch, channels, height, width = x.shape
    out_channels = weight.shape[0]
    pad = k // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))          # B, C, H, W, k, k
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * height * width, channels * k * k)
    wmat = weight.data.reshape(out_channels, channels * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(batch, height, width, out_channels).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(batch * height * width, out_channels)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ wmat).reshape(batch, height, width, channels, k, k)
        gpad = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                gpad[:, :, i:i + height, j:j + width] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gpad[:, :, pad:pad + height, pad:pad + width] if pad else gpad
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "conv2d")


def avg_pool2d(x: Tensor) -> Tensor:
    """2×2 average pooling with stride 2."""
    batch, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise DimensionError(f"avg_pool2d: spatial extents of {x.shape} must be even")
    blocks = reshape(x, (batch, channels, height // 2, 2, width // 2, 2))
    return mean(blocks, axis=(3, 5))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2 upsampling of (B, C, H, W)."""
    batch, channels, height, width = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(batch, channels, height, 2, width, 2).sum(axis=(3, 5)),)

    return Tensor.from_op(out, (x,), backward, "upsample2x")


# ----------------------------------------------------------------------
# Operator installation
# ----------------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
