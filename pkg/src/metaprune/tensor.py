"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a :class:`TapeEntry` to the output tensor.
Entries carry a global sequence number, so ``backward`` can replay them in
reverse execution order without an explicit topological sort. Each entry is
released after it has been replayed once; replaying it again raises, which is
how double-backward is refused.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

_sequence = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Operand extents are incompatible with an op."""


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class TapeEntry:
    __slots__ = ("seq", "inputs", "backward", "released")

    def __init__(self, inputs, backward):
        self.seq = next(_sequence)
        self.inputs = inputs
        self.backward = backward
        self.released = False


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "entry", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.entry: TapeEntry | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the ops themselves live in functional.py
    def __add__(self, other):
        from .functional import add

        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        from .functional import mul

        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        from .functional import mul

        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __matmul__(self, other):
        from .functional import matmul

        return matmul(self, other)

    def sum(self):
        from .functional import sum_all

        return sum_all(self)

    def reshape(self, *shape):
        from .functional import reshape

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        if self.entry is None:
            _accumulate(self, grad)
            return

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.entry is None:
                continue
            seen.add(id(t))
            if t.entry.released:
                raise RuntimeError("tape entry already consumed: double backward is not supported")
            nodes.append(t)
            stack.extend(t.entry.inputs)

        nodes.sort(key=lambda t: t.entry.seq, reverse=True)
        pending = {id(self): grad}
        for t in nodes:
            entry = t.entry
            g = pending.pop(id(t), None)
            if g is not None:
                for inp, gi in zip(entry.inputs, entry.backward(g)):
                    if gi is None or not inp.requires_grad:
                        continue
                    if inp.entry is None:
                        _accumulate(inp, gi)
                    elif id(inp) in pending:
                        pending[id(inp)] = pending[id(inp)] + gi
                    else:
                        pending[id(inp)] = gi
            entry.released = True
            entry.backward = None


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if g.shape != leaf.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match {leaf.shape}")
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        leaf.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap an op result, attaching a tape entry when any input needs grad."""
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.entry = TapeEntry(inputs, backward)
    return out
