"""Tape-based reverse-mode differentiation over dense numpy arrays.

Ops executed inside a ``with Graph():`` block record themselves on the tape;
``Graph.backward(loss)`` then replays the tape once in reverse, accumulating
gradients additively into ``Tensor.grad`` (so fan-out just works).  Outside a
graph the same ops run as plain numpy, which is what inference uses.

Every op checks its output for NaN/Inf and raises NumericError on the spot,
so numerical blow-ups surface where they happen instead of steps later.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class NumericError(Exception):
    """Non-finite values or incompatible shapes in the numeric kernel."""


class Tensor:
    """A dense array plus its accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor init")
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Graph:
    """Recording context for one forward pass.

    The tape holds (output, backward_fn) pairs in creation order; backward
    walks it exactly once in reverse.  Nodes whose output never received a
    gradient are skipped, which makes unused branches (e.g. hidden layers the
    loss does not read) free.
    """

    _stack: list["Graph"] = []

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._stack.pop()

    @classmethod
    def current(cls) -> "Graph | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise NumericError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, back in reversed(self.nodes):
            if out.grad is None:
                continue
            back(out.grad)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")


def _out(data: np.ndarray, op: str, back: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    g = Graph.current()
    if g is not None:
        g.nodes.append((t, back))
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _out(data, "add", back)


def neg(a: Tensor) -> Tensor:
    return _out(-a.data, "neg", lambda g: _accum(a, -g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _out(data, "mul", back)


def scale(a: Tensor, s: float) -> Tensor:
    return _out(a.data * s, "scale", lambda g: _accum(a, g * s))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise NumericError(f"matmul needs 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise NumericError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _out(data, "matmul", back)


def matvec(a: Tensor, v: Tensor) -> Tensor:
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise NumericError(f"matvec shape mismatch: {a.data.shape} @ {v.data.shape}")
    data = a.data @ v.data

    def back(g):
        _accum(a, np.outer(g, v.data))
        _accum(v, a.data.T @ g)

    return _out(data, "matvec", back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise NumericError(f"transpose needs a 2-d tensor, got {a.data.shape}")
    return _out(a.data.T.copy(), "transpose", lambda g: _accum(a, g.T))


# ---------------------------------------------------------------------------
# indexing


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _out(data, "gather_rows", back)


def take_per_row(a: Tensor, indices: Sequence[int]) -> Tensor:
    """out[i] = a[i, indices[i]]"""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise NumericError(f"take_per_row mismatch: {a.data.shape} with {idx.shape[0]} indices")
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def back(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        _accum(a, ga)

    return _out(data, "take_per_row", back)


def row_vector(a: Tensor, index: int) -> Tensor:
    """Extract row ``index`` of a 2-d tensor as a 1-d vector."""
    if a.data.ndim != 2:
        raise NumericError(f"row_vector needs a 2-d tensor, got {a.data.shape}")
    data = a.data[index].copy()

    def back(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        _accum(a, ga)

    return _out(data, "row_vector", back)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[start:stop].copy()

    def back(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        _accum(a, ga)

    return _out(data, "slice_rows", back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[:, start:stop].copy()

    def back(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        _accum(a, ga)

    return _out(data, "slice_cols", back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def back(g):
        off = 0
        for p, size in zip(parts, sizes):
            _accum(p, g[off:off + size])
            off += size

    return _out(data, "concat_rows", back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def back(g):
        off = 0
        for p, size in zip(parts, sizes):
            _accum(p, g[:, off:off + size])
            off += size

    return _out(data, "concat_cols", back)


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return _out(data, "softmax", back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def back(g):
        _accum(a, g - probs * g.sum(axis=axis, keepdims=True))

    return _out(data, "log_softmax", back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize along the last axis, then apply the affine gain/bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise NumericError(f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
                           f"do not match feature dim {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    data = xhat * gain.data + bias.data

    def back(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))

    return _out(data, "layer_norm", back)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU; smooth everywhere, which keeps gradient checks clean."""
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        _accum(x, g * local)

    return _out(data, "gelu", back)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True)) + eps
    data = x.data / norms

    def back(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum(x, (g - data * inner) / norms)

    return _out(data, "l2_normalize_rows", back)


def sum_all(a: Tensor) -> Tensor:
    data = a.data.sum()

    def back(g):
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _out(np.asarray(data), "sum_all", back)


def mean_all(a: Tensor) -> Tensor:
    size = a.data.size
    data = a.data.mean()

    def back(g):
        _accum(a, np.broadcast_to(g / size, a.data.shape).astype(a.data.dtype))

    return _out(np.asarray(data), "mean_all", back)


def dot_const(a: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted sum against a constant (non-differentiated) weight vector."""
    w = np.asarray(weights, dtype=a.data.dtype)
    if w.shape != a.data.shape:
        raise NumericError(f"dot_const shape mismatch: {a.data.shape} vs {w.shape}")
    data = np.asarray((a.data * w).sum())

    def back(g):
        _accum(a, g * w)

    return _out(data, "dot_const", back)
