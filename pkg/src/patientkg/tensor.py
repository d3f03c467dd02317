"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every model equation is written against this module. Operations record
onto the innermost active :class:`Tape`; with no tape active they only
compute values, which is what inference uses.

    with Tape() as tape:
        loss = mean_all(relu(x @ w))
    grads = tape.backward(loss)
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

LOG_CLAMP = 1e-12


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


_TAPES: list["Tape"] = []


class Tensor:
    """A 2-D float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations; backward walks it in exact reverse."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Returns a map from ``id(tensor)`` to gradient for all tensors touched,
    leaves included. Gradients accumulate additively across fan-out.
    """
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            leaves.setdefault(key, t)
    if loss.requires_grad:
        leaves.setdefault(id(loss), loss)
    produced = {id(rec.output) for rec in tape.records}
    for key, t in leaves.items():
        if key in grads and key not in produced:
            t.grad = grads[key]
    return grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray,
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.name = None
    out.requires_grad = bool(needs and _TAPES)
    if out.requires_grad:
        _TAPES[-1].records.append(_Record(kind, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product; a row or column vector broadcasts over a matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


mul_elementwise = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise ShapeMismatch(f"concat along axis {axis}: {[t.shape for t in tensors]}")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        if axis == 0:
            return [g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
        return [g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _emit("concat", tensors, value, back)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=0)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit("mean_all", (a,), np.full((1, 1), a.data.mean()),
                 lambda g: (np.full(a.shape, g[0, 0] / n),))


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum_all", (a,), np.full((1, 1), a.data.sum()),
                 lambda g: (np.full(a.shape, g[0, 0]),))


def sum_rows(a: Tensor) -> Tensor:
    """Sum over rows, giving a 1 x cols row vector."""
    return _emit("sum_rows", (a,), a.data.sum(axis=0, keepdims=True),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


# ---------------------------------------------------------------- indexing

def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("take_rows index out of range")
    return _emit("take_rows", (a,), a.data[idx], back)


def gather(a: Tensor, rows, cols) -> Tensor:
    """Pick ``a[rows[i], cols[i]]`` into an n x 1 column."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _emit("gather", (a,), a.data[rows, cols].reshape(-1, 1), back)


def spmm(s: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times tensor."""
    if s.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"spmm: {s.shape} @ {x.shape}")
    s = sp.csr_matrix(s)
    return _emit("spmm", (x,), np.asarray(s @ x.data), lambda g: (np.asarray(s.T @ g),))


def weighted_spmm(values: Tensor, rows, cols, n_rows: int, x: Tensor) -> Tensor:
    """``A @ x`` where ``A[rows[p], cols[p]] += values[p]`` and values carry gradient.

    ``values`` is an n x 1 column aligned with ``rows``/``cols``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if values.shape != (rows.size, 1):
        raise ShapeMismatch(f"weighted_spmm: values {values.shape} for {rows.size} entries")
    shape = (n_rows, x.shape[0])
    a = sp.csr_matrix((values.data[:, 0], (rows, cols)), shape=shape)

    def back(g):
        gv = gx = None
        if values.requires_grad:
            gv = np.einsum("ij,ij->i", g[rows], x.data[cols]).reshape(-1, 1)
        if x.requires_grad:
            gx = np.asarray(a.T @ g)
        return gv, gx

    return _emit("weighted_spmm", (values, x), np.asarray(a @ x.data), back)


# ---------------------------------------------------------------- nonlinearities

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log of ``max(a, clamp)``; clamped entries pass no gradient."""
    x = a.data
    ok = x > clamp
    safe = np.where(ok, x, clamp)
    return _emit("log", (a,), np.log(safe), lambda g: (np.where(ok, g / safe, 0.0),))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax", (a,), y, back)


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax restricted to ``mask`` entries; fully masked rows give zeros."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs {a.shape}")
    x = np.where(mask, a.data, -np.inf)
    rmax = x.max(axis=1, keepdims=True)
    rmax = np.where(np.isfinite(rmax), rmax, 0.0)
    e = np.where(mask, np.exp(np.where(mask, a.data - rmax, 0.0)), 0.0)
    s = e.sum(axis=1, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("masked_softmax", (a,), y, back)


# ---------------------------------------------------------------- oracle

def finite_diff_grad(f: Callable[[list[np.ndarray]], float], params: Sequence[np.ndarray],
                     h: float = 1e-5) -> list[np.ndarray]:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` per coordinate."""
    work = [np.array(p, dtype=np.float64, copy=True) for p in params]
    out = []
    for p in work:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out
