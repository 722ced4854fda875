"""Tensor container and the record-then-reverse tape.

A :class:`Graph` is activated with ``with Graph() as g:``; every op whose
inputs are tracked (parameters with ``requires_grad`` or outputs of earlier
recorded ops) appends a node to the active graph. Nodes are stored in
creation order, which is a topological order by construction, so the
reverse sweep in :meth:`Graph.backward` is a single pass over the list.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A documented precondition of an op or pass was violated."""


class Tensor:
    """Dense row-major array plus autodiff bookkeeping.

    Tensors are treated as immutable; the only in-place entry point is
    :meth:`assign_`, reserved for optimizer updates.
    """

    __slots__ = ("data", "requires_grad", "name", "_graph", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self._graph: Graph | None = None

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
        return float(self.data)

    def assign_(self, value: np.ndarray) -> None:
        """In-place parameter update (optimizer use only)."""
        if value.shape != self.data.shape:
            raise ShapeError(f"assign_ shape {value.shape} != parameter shape {self.data.shape}")
        self.data[...] = value

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Operator sugar; the real definitions live in core.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "kind")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable, kind: str):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.kind = kind


_local = threading.local()


def active_graph() -> "Graph | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Operation tape for one forward/backward pass; single-threaded."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._graph is self

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable, kind: str) -> None:
        out._graph = self
        self.nodes.append(_Node(out, tuple(inputs), vjp, kind))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar ``loss``; returns adjoints of leaf parameters."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._graph is not self:
            if loss.requires_grad:
                return {loss: adj[id(loss)]}
            return {}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not self.tracks(inp):
                    continue
                key = id(inp)
                if inp._graph is not self:
                    leaves[key] = inp
                prev = adj.get(key)
                adj[key] = gi if prev is None else prev + gi
        return {t: adj[k] for k, t in leaves.items() if k in adj}


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)
