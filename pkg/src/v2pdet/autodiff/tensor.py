"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each operation records a closure that maps the upstream gradient to the
gradients of its inputs.  ``Tensor.backward`` walks the recorded graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np

_ids = itertools.count()
_grad_enabled = True
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run operations without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        self._accum(np.broadcast_to(grad, self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not kept once propagated
                    node.grad = None

    # operators
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
        return mul(self, 1.0 / _data(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    if _grad_enabled and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _send(t, g):
    if isinstance(t, Tensor) and t.requires_grad:
        t._accum(_unbroadcast(g, t.shape))


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    def backward(g):
        _send(a, g)
        _send(b, g)
    return _make(_data(a) + _data(b), (a, b), backward, "add")


def sub(a, b):
    def backward(g):
        _send(a, g)
        _send(b, -g)
    return _make(_data(a) - _data(b), (a, b), backward, "sub")


def mul(a, b):
    ad, bd = _data(a), _data(b)

    def backward(g):
        _send(a, g * bd)
        _send(b, g * ad)
    return _make(ad * bd, (a, b), backward, "mul")


def relu(x):
    mask = x.data > 0

    def backward(g):
        _send(x, g * mask)
    return _make(x.data * mask, (x,), backward, "relu")


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        _send(x, g * out * (1.0 - out))
    return _make(out, (x,), backward, "sigmoid")


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        _send(x, g * out)
    return _make(out, (x,), backward, "exp")


def log(x):
    def backward(g):
        _send(x, g / x.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), backward, "log")


# ---------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b):
    ad, bd = _data(a), _data(b)

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accum(g @ bd.T)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accum(ad.T @ g)
    return _make(ad @ bd, (a, b), backward, "matmul")


def tsum(x, axis=None):
    def backward(g):
        if axis is None:
            _send(x, np.broadcast_to(g, x.shape))
        else:
            _send(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))
    return _make(x.data.sum(axis=axis), (x,), backward, "sum")


def mean(x):
    n = max(x.data.size, 1)

    def backward(g):
        _send(x, np.broadcast_to(g / n, x.shape))
    return _make(x.data.sum() / n, (x,), backward, "mean")


def reshape(x, shape):
    def backward(g):
        _send(x, g.reshape(x.shape))
    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x):
    def backward(g):
        _send(x, g.T)
    return _make(x.data.T, (x,), backward, "transpose")


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                x._accum(g[tuple(idx)])
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward, "concat")


def getitem(x, key):
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        _send(x, full)
    return _make(x.data[key], (x,), backward, "getitem")


# ---------------------------------------------------------------------------
# sparse row operations

def gather_rows(x, idx):
    """Rows of a 2D tensor selected by ``idx``; index ``-1`` yields a zero row."""
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = x.data[safe]
    out[~valid] = 0.0

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, safe[valid], g[valid])
            x._accum(full)
    return _make(out, (x,), backward, "gather_rows")


def scatter_rows(x, idx, n):
    """Sum rows of ``x`` into ``n`` output rows: ``out[idx[i]] += x[i]``."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, idx, x.data)

    def backward(g):
        _send(x, g[idx])
    return _make(out, (x,), backward, "scatter_rows")


def weighted_gather(x, idx, w):
    """``out[n] = sum_k w[n, k] * x[idx[n, k]]``; entries with ``idx = -1`` are skipped."""
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    wv = np.where(valid, w, 0.0)
    out = np.einsum("nk,nkc->nc", wv, x.data[safe]) if x.data.size else np.zeros((len(idx),) + x.shape[1:])

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            contrib = wv[..., None] * g[:, None, :]
            np.add.at(full, safe.reshape(-1), contrib.reshape(-1, x.shape[1]))
            x._accum(full)
    return _make(out, (x,), backward, "weighted_gather")


def segment_max(x, seg, n):
    """Per-segment column-wise max of the rows of ``x``.

    Empty segments produce zeros.  The gradient of each output entry goes to
    the single row holding the maximum; ties resolve to the lowest row index.
    """
    seg = np.asarray(seg, dtype=np.int64)
    C = x.shape[1]
    out = np.zeros((n, C))
    arg = np.full((n, C), -1, dtype=np.int64)
    if len(seg):
        order = np.lexsort((np.arange(len(seg)), seg))
        s_sorted = seg[order]
        starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
        vals = x.data[order]
        red = np.maximum.reduceat(vals, starts, axis=0)
        segs = s_sorted[starts]
        out[segs] = red
        # first row (in original order) achieving the max within each segment
        hit = vals == red[np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(order)]))]
        rows = np.broadcast_to(order[:, None], hit.shape)
        cand = np.where(hit, rows, np.iinfo(np.int64).max)
        arg[segs] = np.minimum.reduceat(cand, starts, axis=0)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            ok = arg >= 0
            cols = np.broadcast_to(np.arange(C), arg.shape)
            np.add.at(full, (arg[ok], cols[ok]), g[ok])
            x._accum(full)
    return _make(out, (x,), backward, "segment_max")


def stack_rows(xs):
    """Concatenate tensors along axis 0."""
    return concat(xs, axis=0)
