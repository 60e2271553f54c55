"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to tensors while it is active
(``with Tape() as tape:``).  ``tape.backward(root)`` replays the records in
reverse order and accumulates gradients into every tensor that requires them.

Only row-wise bias addition broadcasts.  Everything else demands identical
shapes, which keeps each backward rule a couple of lines long.  Heavier
kernels (projection, rasterization, SSIM) live in their own modules and are
registered through :func:`record` with hand-written backward closures.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []
_NODE_IDS = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "node_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_NODE_IDS)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Single-owner and single-threaded.  Nested tapes are allowed; ops record
    on the innermost active one.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.backward_done = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, root: Tensor) -> None:
        if root.value.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        root.grad = np.ones_like(root.value)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for parent, pg in zip(rec.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64, copy=True).reshape(parent.shape)
                else:
                    parent.grad += np.reshape(pg, parent.shape)
        self.backward_done = True


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(tape: Tape, root: Tensor) -> None:
    tape.backward(root)


def record(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``value`` as the output of a primitive.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    Nothing is recorded when no tape is active or no parent needs a gradient.
    """
    out = Tensor(value)
    tape = active_tape()
    parents = tuple(parents)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append(_Record(out, parents, backward_fn))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.value * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape and c.ndim != 0:
        raise ShapeError(f"add_const: shape mismatch {a.shape} vs {c.shape}")
    return record(a.value + c, (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return record(av * av, (a,), lambda g: (2.0 * av * g,))


def abs_(a: Tensor) -> Tensor:
    av = a.value
    return record(np.abs(av), (a,), lambda g: (np.sign(av) * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return record(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    av = a.value
    return record(np.log(av), (a,), lambda g: (g / av,))


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.value.size
    return record(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def prod_rows(a: Tensor) -> Tensor:
    """Product along the last axis: ``[n, d] -> [n]``."""
    av = a.value
    p = av.prod(axis=-1)

    def back(g):
        # product rule without dividing by possibly-zero entries
        n, d = av.shape
        out = np.empty_like(av)
        for j in range(d):
            out[:, j] = np.delete(av, j, axis=1).prod(axis=1)
        return (out * g[:, None],)

    return record(p, (a,), back)


# ---------------------------------------------------------------- structure

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([p.value for p in parts], axis=axis), parts, back)


def column(a: Tensor, j: int) -> Tensor:
    """Column ``j`` of a matrix as an ``[n]`` vector."""
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return record(a.value[:, j].copy(), (a,), back)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return record(a.value[index], (a,), back)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Each row repeated ``k`` times consecutively (anchor -> its k slots)."""
    shape = a.shape

    def back(g):
        return (g.reshape((shape[0], k) + shape[1:]).sum(axis=1),)

    return record(np.repeat(a.value, k, axis=0), (a,), back)


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """``out[i, :] = w[i] * a[i, :]`` for ``a: [n, d]`` and ``w: [n]``."""
    if w.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: weight shape {w.shape} for rows of {a.shape}")
    av, wv = a.value, w.value
    return record(av * wv[:, None], (a, w), lambda g: (g * wv[:, None], (g * av).sum(axis=1)))


def matmul_const(a: Tensor, m: np.ndarray) -> Tensor:
    """``a @ m`` with a fixed (non-differentiated) matrix."""
    m = np.asarray(m, dtype=np.float64)
    if a.shape[-1] != m.shape[0]:
        raise ShapeError(f"matmul_const: {a.shape} @ {m.shape}")
    return record(a.value @ m, (a,), lambda g: (g @ m.T,))


# ---------------------------------------------------------------- dense layers

def linear(x, W, b) -> Tensor:
    """``x @ W + b`` with ``x: [n, d_in]``, ``W: [d_in, d_out]``, ``b: [d_out]``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.value.ndim != 2 or W.value.ndim != 2 or b.value.ndim != 1:
        raise ShapeError(f"linear: expected 2-d x, 2-d W, 1-d b; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"linear: shapes do not conform: x{x.shape} W{W.shape} b{b.shape}")
    xv, Wv = x.value, W.value

    def back(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return record(xv @ Wv + b.value, (x, W, b), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (a single vector or each row of a matrix)."""
    xv = x.value
    if not np.all(np.isfinite(xv)):
        raise ValueError("softmax: non-finite input")
    z = np.exp(xv - xv.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), back)


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of every row: ``[n, d] -> [n]``."""
    av = a.value
    n = np.sqrt((av * av).sum(axis=1))
    return record(n, (a,), lambda g: (av * (g / n)[:, None],))


def normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    av = a.value
    n = np.sqrt((av * av).sum(axis=1)) + eps
    y = av / n[:, None]

    def back(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / n[:, None],)

    return record(y, (a,), back)


def reciprocal(a: Tensor) -> Tensor:
    av = a.value
    return record(1.0 / av, (a,), lambda g: (-g / (av * av),))
