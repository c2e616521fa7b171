"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside ``with Tape() as tape:`` are appended to the tape
in execution order, which is already a topological order. ``backward`` walks
the tape in reverse and accumulates gradients into a dictionary keyed by the
leaf tensors. Outside a tape, operations only compute values.

Leading axes are treated as batch axes by the element-wise operations;
``matmul`` contracts the last axis of its first operand with a 2-D matrix.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Ordered record of operations: ``(outputs, inputs, backward_fn)``."""

    def __init__(self):
        self.entries: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []

    def __len__(self):
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()
        return False


_local = threading.local()


def _stack() -> list[Tape]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def _new(arr) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(arr, dtype=np.float64)
    t.requires_grad = False
    t.name = None
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, inputs: Sequence[Tensor], fn: Callable):
    """Register ``fn`` as the backward of ``out`` if any input needs gradients.

    ``fn`` receives the output gradient (a tuple of them for multi-output ops)
    and returns one gradient or None per input.
    """
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    outs = out if isinstance(out, tuple) else (out,)
    for o in outs:
        o.requires_grad = True
    tape.entries.append((outs, tuple(inputs), fn))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` for every leaf that requires them.

    Intermediate results are not included; the returned mapping is keyed by
    the leaf :class:`Tensor` objects (identity hashing).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for outs, inputs, fn in reversed(tape.entries):
        gs = [grads.pop(id(o), None) for o in outs]
        for o in outs:
            produced.add(id(o))
        if all(g is None for g in gs):
            continue
        if len(outs) == 1:
            in_grads = fn(gs[0])
        else:
            in_grads = fn(tuple(np.zeros_like(o.data) if g is None else g for o, g in zip(outs, gs)))
        for t, g in zip(inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                leaves.setdefault(key, t)
    return {leaves[k]: g for k, g in grads.items() if k in leaves and k not in produced}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = _new(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = _new(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = _new(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = _new(a.data / b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(_new(-a.data), (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape ``(..., k)`` and ``b`` of shape ``(k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = _new(a.data @ b.data)

    def fn(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _record(out, (a, b), fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(_new(y), (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _record(_new(y), (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(_new(np.where(mask, a.data, 0.0)), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _record(_new(y), (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(_new(np.log(a.data)), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _record(_new(y), (a,), lambda g: (g * 0.5 / y,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(_new(y), (a,), fn)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record(_new(y), (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = _new(a.data.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = _new(a.data.mean(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record(out, (a,), fn)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = _new(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[t.shape for t in ts]} mismatch along axis {axis}"
        ) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, ts, fn)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = _new(np.stack([t.data for t in ts], axis=axis))
    except ValueError:
        raise DimensionError(f"stack: shapes {[t.shape for t in ts]} differ") from None

    def fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, ts, fn)


def slice_(a, start: int, stop: int, axis: int = -1) -> Tensor:
    """Elements ``start:stop`` along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis of size {n} in {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = _new(a.data[index])

    def fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), fn)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = _new(a.data[index])

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(out, (a,), fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _new(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def gather(a, index: np.ndarray) -> Tensor:
    """Per-batch row selection: ``out[b, s] = a[b, index[b, s]]``.

    ``a`` has shape ``(B, T, ...)`` and ``index`` integer shape ``(B, S)``.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or a.ndim < 2 or index.shape[0] != a.shape[0]:
        raise DimensionError(f"gather: index {index.shape} incompatible with {a.shape}")
    rows = np.arange(a.shape[0])[:, None]
    out = _new(a.data[rows, index])

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, index), g)
        return (full,)

    return _record(out, (a,), fn)


def blend(mask: np.ndarray, a, b) -> Tensor:
    """``mask * a + (1 - mask) * b`` for a constant 0/1 mask (broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = _new(np.where(mask, a.data, b.data))
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape),
        ),
    )
