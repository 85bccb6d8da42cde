"""Dense tensors with a define-by-run tape for reverse-mode differentiation.

A :class:`Graph` is an append-only tape.  While a graph is active (``with
Graph() as g:``) every op whose inputs require gradients appends one node;
outside a graph ops run eagerly and record nothing, which is the inference
path.  ``g.backward(loss)`` walks the tape in strict reverse append order.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(RuntimeError):
    """An API was called out of order or with an invalid argument."""


_ACTIVE: contextvars.ContextVar[Optional["Graph"]] = contextvars.ContextVar(
    "tatkit_active_graph", default=None
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and type(data) is np.ndarray and data.dtype in (np.float64, np.float32):
            arr = data
        elif dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[tuple["Graph", int]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def _raise_item(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class Graph:
    """Append-only record of differentiable operations.

    Use as a context manager; nested graphs shadow outer ones.  A graph can be
    differentiated once; call :meth:`reset` to reuse the object.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False
        self._tokens: list = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        if self._consumed:
            raise UsageError("graph was already differentiated; call reset() before recording")
        out.requires_grad = True
        out.node = (self, len(self.nodes))
        self.nodes.append(_Node(out, inputs, backward))
        return out

    def reset(self) -> None:
        self.nodes = []
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise UsageError("backward called twice on the same graph without reset()")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node[0] is not self:
            raise UsageError("loss was not produced on this graph")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def active_graph() -> Optional[Graph]:
    return _ACTIVE.get()


def backward(loss: Tensor) -> None:
    """Differentiate ``loss`` through the graph that produced it."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise UsageError("loss has no graph; build it inside `with Graph():`")
    loss.node[0].backward(loss)


def make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it on the active graph when needed."""
    out = Tensor(data)
    graph = _ACTIVE.get()
    if graph is not None and any(t.requires_grad for t in inputs):
        graph.record(out, inputs, backward_fn)
    return out
