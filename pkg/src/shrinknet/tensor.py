"""Dense tensors with reverse-mode automatic differentiation.

Every op that touches a tensor with ``requires_grad`` records its inputs and a
backward closure on the output.  ``backward`` collects the reachable records,
orders them by execution sequence number (most recent first) and sweeps once.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_sequence = itertools.count()
_grad_enabled = True


class GraphError(RuntimeError):
    """Raised when backward is called on something it cannot differentiate."""


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation.

    Float32 is the default storage type.  Passing a float64 ndarray keeps
    64-bit precision, which is what the gradient checks use.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            elif isinstance(data, Tensor):
                dtype = data.data.dtype
            else:
                dtype = np.float32
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._seq = next(_sequence)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self.op})"

    # Operator sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, _as_tensor(-1.0, self.dtype))

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def record(
    out: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    """Wrap an op result, attaching it to the graph when any parent needs grads."""
    result = Tensor(out, dtype=out.dtype)
    result.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._parents = tuple(parents)
        result._backward = backward_fn
    return result


class Tape:
    """Recorded ops reachable from a loss, in reverse execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._backward is not None:
                nodes.append(node)
                stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        return cls(nodes)

    def sweep(self) -> None:
        for node in self.nodes:
            if node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise GraphError(
                        f"{node.op}: gradient shape {g.shape} does not match input {parent.shape}"
                    )
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.dtype, copy=True)
                else:
                    parent.grad += g

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from the graph (no input requires grad)")
    tape = Tape.from_loss(loss)
    loss.grad = np.ones_like(loss.data)
    tape.sweep()
    tape.clear()
