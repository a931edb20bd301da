"""
Dense tensor with reverse-mode differentiation.

Every differentiable op returns a Tensor that remembers its parents and a
backward rule (a closure over whatever the forward pass saved). backward()
collects the reachable graph into a ComputationRecord (a topologically
ordered list) and replays the rules from the root down.

Storage is a row-major numpy array. float32 is the training dtype; float64 is
used for gradient checking. Tensors that take part in a recorded computation
are never mutated in place: optimizers and gradcheck rebind or perturb leaf
data only between passes.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from src.errors import DimensionError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

# Grad mode is per thread: evaluation may run in a side context while the
# training loop owns its own record.
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording inside the block (evaluation, inference, finite differences)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _infer_dtype(data) -> np.dtype:
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data.dtype
    return np.dtype(DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Build an op result; records parents only when some parent needs a gradient."""
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        return out

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def op(self) -> str:
        return self._op

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same storage, cut from the graph (stop-gradient)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{grad}{label})"

    # ------------------------------------------------------------------
    # Differentiation
    # ------------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> "ComputationRecord":
        """Trace the graph below this tensor and accumulate gradients into it."""
        record = ComputationRecord.trace(self)
        record.backward(grad)
        return record


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass(frozen=True)
class RecordEntry:
    op: str
    inputs: tuple[int, ...]
    output: int


class ComputationRecord:
    """
    Topologically ordered view of one computation.

    Intermediate gradients live only for the duration of a pass (they are
    recomputed, not accumulated), so replaying the record gives bit-identical
    results; leaf gradients accumulate like any optimizer expects.
    """

    def __init__(self, root: Tensor, order: list[Tensor]) -> None:
        self.root = root
        self._order = order

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(root, order)

    @property
    def entries(self) -> list[RecordEntry]:
        return [
            RecordEntry(op=t.op, inputs=tuple(id(p) for p in t._parents), output=id(t))
            for t in self._order
        ]

    def __len__(self) -> int:
        return len(self._order)

    def backward(self, grad: np.ndarray | None = None) -> None:
        root = self.root
        if not root.requires_grad:
            logger.debug("backward() on a tensor that does not require grad, nothing to do")
            return
        if grad is None:
            if root.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {root.shape}")
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(grad, dtype=root.dtype)
            if seed.shape != root.shape:
                raise DimensionError(f"seed gradient shape {seed.shape} != output shape {root.shape}")

        pending: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self._order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node.grad = g
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    pg = pg.astype(parent.dtype, copy=False)
                    key = id(parent)
                    pending[key] = pending[key] + pg if key in pending else pg
            else:
                g = g.astype(node.dtype, copy=False)
                node.grad = np.array(g) if node.grad is None else node.grad + g
