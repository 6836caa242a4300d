"""Dense tensors with tape-based reverse-mode differentiation.

The tape (``Graph``) records one entry per operation in execution order,
so the backward pass is a single reverse sweep.  Gradients accumulate into
``Tensor.grad`` until explicitly reset; calling :func:`backward` twice on
the same graph therefore doubles the gradients, which is the documented
training-loop contract.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(name: str) -> None:
    """Set the global precision used for new tensors ("float32" or "float64")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def precision(name: str):
    """Temporarily switch the global default dtype."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


class Tensor:
    """Dense numeric array plus an accumulated gradient.

    ``values`` is always a contiguous numpy array in the active precision.
    ``grad`` exists only for tensors with ``requires_grad`` and is allocated
    lazily as zeros the first time it is touched.
    """

    __slots__ = ("values", "requires_grad", "_grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype or default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def grad(self) -> Optional[np.ndarray]:
        if self.requires_grad and self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.values.shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {self.values.shape}")
        self.grad[...] += g

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=False, dtype=self.values.dtype)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# Backward callbacks receive the output gradient and return one gradient
# array (or None) per differentiable input, in the order they were recorded.
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Entry:
    name: str
    output: Tensor
    inputs: tuple
    vjp: VJP


@dataclass
class Graph:
    """Ordered record of operations; topological by construction."""

    entries: list = field(default_factory=list)

    def record(self, name: str, output: Tensor, inputs: Sequence[Tensor], vjp: VJP) -> None:
        self.entries.append(_Entry(name, output, tuple(inputs), vjp))

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _graph_stack.pop()
        return False


_graph_stack: list = []


def active_graph() -> Optional[Graph]:
    if _grad_enabled and _graph_stack:
        return _graph_stack[-1]
    return None


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def record_op(name: str, output: Tensor, inputs: Sequence, vjp: VJP) -> Tensor:
    """Register an op on the active graph if any input is tracked."""
    graph = active_graph()
    if graph is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        output.requires_grad = True
        graph.record(name, output, [t for t in inputs if isinstance(t, Tensor)], vjp)
    return output


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    ``loss`` must be scalar.  Per-call adjoints are kept in a local map so
    that repeated calls accumulate leaf gradients linearly (2x after two
    calls), not compounded through intermediates.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    adjoint = {id(loss): np.ones_like(loss.values)}
    tensors = {id(loss): loss}
    for entry in reversed(graph.entries):
        g_out = adjoint.get(id(entry.output))
        if g_out is None:
            continue
        grads = entry.vjp(g_out)
        for t, g in zip(entry.inputs, grads):
            if g is None:
                continue
            if g.shape != t.values.shape:
                raise ValueError(
                    f"{entry.name}: backward produced shape {g.shape} for input of shape {t.values.shape}"
                )
            tensors[id(t)] = t
            acc = adjoint.get(id(t))
            if acc is None:
                adjoint[id(t)] = g.copy() if g.base is not None or g is g_out else g
            else:
                acc += g
    for tid, g in adjoint.items():
        t = tensors[tid]
        if t.requires_grad:
            t.accumulate_grad(g)
