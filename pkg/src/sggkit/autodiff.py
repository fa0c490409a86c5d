"""Reverse-mode automatic differentiation over 2-D arrays.

Every value is a Tensor2: a 2-D numpy array plus an optional backward
closure linking it to its parents.  Calling backward() on a 1x1 loss node
walks the tape in reverse topological order and accumulates gradients into
the leaves.

Training runs in float32.  In float64 mode the attention-specific
reductions (softmax denominator, attention-weighted value sum) use exact
accumulation (math.fsum), which makes attention outputs bitwise invariant
under key permutations; that mode exists for gradient checking and
property tests only.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, UsageError


class Tensor2:
    """2-D array node on the autodiff tape."""

    __slots__ = ("data", "parents", "bwd_fn", "grad", "requires_grad")

    def __init__(self, data, parents=(), bwd_fn=None, requires_grad=None):
        arr = np.asarray(data)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor2 requires 2-D data, got ndim={arr.ndim}")
        self.data = arr
        self.parents = parents
        self.bwd_fn = bwd_fn
        self.grad = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor2(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    # -- unary op sugar --------------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absval(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def constant(data, dtype=None) -> Tensor2:
    arr = np.asarray(data, dtype=dtype)
    return Tensor2(arr, requires_grad=False)


def leaf(data, requires_grad=True) -> Tensor2:
    return Tensor2(np.asarray(data), requires_grad=requires_grad)


def _wrap(x, like: Tensor2) -> Tensor2:
    if isinstance(x, Tensor2):
        return x
    return Tensor2(np.asarray(x, dtype=like.dtype), requires_grad=False)


def _accum(t: Tensor2, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce grad {g.shape} to {shape}")
    return out


def _check_broadcast(a: Tensor2, b: Tensor2) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


# -- binary elementwise -------------------------------------------------

def add(a, b) -> Tensor2:
    if not isinstance(a, Tensor2):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b)
    out = Tensor2(a.data + b.data, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    out.bwd_fn = bwd
    return out


def sub(a, b) -> Tensor2:
    if not isinstance(a, Tensor2):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b)
    out = Tensor2(a.data - b.data, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    out.bwd_fn = bwd
    return out


def mul(a, b) -> Tensor2:
    if not isinstance(a, Tensor2):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b)
    out = Tensor2(a.data * b.data, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    out.bwd_fn = bwd
    return out


def div(a, b) -> Tensor2:
    if not isinstance(a, Tensor2):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b)
    out = Tensor2(a.data / b.data, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out.bwd_fn = bwd
    return out


def scale(a: Tensor2, s: float) -> Tensor2:
    s = a.data.dtype.type(s)
    out = Tensor2(a.data * s, (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * s)

    out.bwd_fn = bwd
    return out


# -- linear algebra -----------------------------------------------------

def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    out = Tensor2(a.data @ b.data, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    out.bwd_fn = bwd
    return out


def affine(x: Tensor2, w: Tensor2, b: Tensor2) -> Tensor2:
    """x @ w + b in one node (b is a 1-row bias)."""
    if x.cols != w.rows or b.shape != (1, w.cols):
        raise ShapeError(f"affine {x.shape} @ {w.shape} + {b.shape}")
    out = Tensor2(x.data @ w.data + b.data, (x, w, b))

    def bwd(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0, keepdims=True))

    out.bwd_fn = bwd
    return out


def ffn_core(x: Tensor2, w1: Tensor2, b1: Tensor2, w2: Tensor2, b2: Tensor2) -> Tensor2:
    """relu(x @ w1 + b1) @ w2 + b2 in one node."""
    if x.cols != w1.rows or w1.cols != w2.rows:
        raise ShapeError(f"ffn {x.shape} @ {w1.shape} @ {w2.shape}")
    h = x.data @ w1.data + b1.data
    np.maximum(h, 0.0, out=h)
    out = Tensor2(h @ w2.data + b2.data, (x, w1, b1, w2, b2))

    def bwd(g):
        if w2.requires_grad:
            _accum(w2, h.T @ g)
        if b2.requires_grad:
            _accum(b2, g.sum(axis=0, keepdims=True))
        gh = g @ w2.data.T
        gh *= h > 0
        if x.requires_grad:
            _accum(x, gh @ w1.data.T)
        if w1.requires_grad:
            _accum(w1, x.data.T @ gh)
        if b1.requires_grad:
            _accum(b1, gh.sum(axis=0, keepdims=True))

    out.bwd_fn = bwd
    return out


def transpose(a: Tensor2) -> Tensor2:
    out = Tensor2(a.data.T.copy(), (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.T)

    out.bwd_fn = bwd
    return out


# -- reductions ----------------------------------------------------------

def sum_all(a: Tensor2) -> Tensor2:
    out = Tensor2(a.data.sum(keepdims=True).reshape(1, 1), (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.shape))

    out.bwd_fn = bwd
    return out


def row_sum(a: Tensor2) -> Tensor2:
    """Sum over columns -> (M, 1)."""
    out = Tensor2(a.data.sum(axis=1, keepdims=True), (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.shape))

    out.bwd_fn = bwd
    return out


def col_sum(a: Tensor2) -> Tensor2:
    """Sum over rows -> (1, N)."""
    out = Tensor2(a.data.sum(axis=0, keepdims=True), (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.shape))

    out.bwd_fn = bwd
    return out


def mean_all(a: Tensor2) -> Tensor2:
    return scale(sum_all(a), 1.0 / a.data.size)


# -- elementwise nonlinearities ------------------------------------------

def exp(a: Tensor2) -> Tensor2:
    y = np.exp(a.data)
    out = Tensor2(y, (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * y)

    out.bwd_fn = bwd
    return out


def log(a: Tensor2) -> Tensor2:
    out = Tensor2(np.log(a.data), (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    out.bwd_fn = bwd
    return out


def sqrt(a: Tensor2) -> Tensor2:
    y = np.sqrt(a.data)
    out = Tensor2(y, (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (0.5 / y))

    out.bwd_fn = bwd
    return out


def absval(a: Tensor2) -> Tensor2:
    out = Tensor2(np.abs(a.data), (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * np.sign(a.data))

    out.bwd_fn = bwd
    return out


def relu(a: Tensor2) -> Tensor2:
    mask = a.data > 0
    out = Tensor2(np.where(mask, a.data, a.data.dtype.type(0)), (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * mask)

    out.bwd_fn = bwd
    return out


def sigmoid(a: Tensor2) -> Tensor2:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor2(y, (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * y * (1.0 - y))

    out.bwd_fn = bwd
    return out


def maximum(a, b) -> Tensor2:
    if not isinstance(a, Tensor2):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b)
    mask = a.data >= b.data
    out = Tensor2(np.where(mask, a.data, b.data), (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * mask, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~mask, b.shape))

    out.bwd_fn = bwd
    return out


def minimum(a, b) -> Tensor2:
    if not isinstance(a, Tensor2):
        a = _wrap(a, b)
    b = _wrap(b, a)
    _check_broadcast(a, b)
    mask = a.data <= b.data
    out = Tensor2(np.where(mask, a.data, b.data), (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * mask, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~mask, b.shape))

    out.bwd_fn = bwd
    return out


# -- softmax family -------------------------------------------------------

def _exact_row_sums(e: np.ndarray) -> np.ndarray:
    return np.array([[math.fsum(row)] for row in e], dtype=e.dtype)


def softmax_rows(a: Tensor2) -> Tensor2:
    """Row softmax, max-subtracted.

    float64 inputs use exact (fsum) denominators so the result is bitwise
    invariant under permutations of the logits within a row.
    """
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    if a.data.dtype == np.float64:
        denom = _exact_row_sums(e)
    else:
        denom = e.sum(axis=1, keepdims=True)
    y = e / denom
    out = Tensor2(y, (a,))

    def bwd(g):
        if a.requires_grad:
            s = (g * y).sum(axis=1, keepdims=True)
            _accum(a, y * (g - s))

    out.bwd_fn = bwd
    return out


def log_softmax_rows(a: Tensor2) -> Tensor2:
    m = a.data.max(axis=1, keepdims=True)
    shifted = a.data - m
    e = np.exp(shifted)
    if a.data.dtype == np.float64:
        denom = _exact_row_sums(e)
    else:
        denom = e.sum(axis=1, keepdims=True)
    y = shifted - np.log(denom)
    out = Tensor2(y, (a,))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g - np.exp(y) * g.sum(axis=1, keepdims=True))

    out.bwd_fn = bwd
    return out


def _exact_combine(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    m, n = w.shape[0], v.shape[1]
    y = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        row = w[i]
        for j in range(n):
            y[i, j] = math.fsum(row * v[:, j])
    return y


def attn_combine(w: Tensor2, v: Tensor2) -> Tensor2:
    """Attention-weighted value sum (w @ v) with exact float64 contraction.

    In float64 every output element is an fsum over the key axis, so the
    result is bitwise invariant under a joint permutation of keys/values.
    """
    if w.cols != v.rows:
        raise ShapeError(f"attn_combine {w.shape} @ {v.shape}")
    if w.data.dtype == np.float64:
        y = _exact_combine(w.data, v.data)
    else:
        y = w.data @ v.data
    out = Tensor2(y, (w, v))

    def bwd(g):
        if w.requires_grad:
            _accum(w, g @ v.data.T)
        if v.requires_grad:
            _accum(v, w.data.T @ g)

    out.bwd_fn = bwd
    return out


def multi_head_core(qp: Tensor2, kp: Tensor2, vp: Tensor2, heads: int) -> Tensor2:
    """Fused per-head softmax(q k^T / sqrt(d)) @ v over projected inputs.

    One tape node for all heads.  float64 inputs use exact reductions
    (fsum) for the softmax denominator and the value contraction, keeping
    the output bitwise invariant under joint key/value permutations.
    """
    if qp.cols != kp.cols or kp.cols != vp.cols or qp.cols % heads != 0:
        raise ShapeError(f"head split needs equal widths divisible by {heads}, "
                         f"got q{qp.shape} k{kp.shape} v{vp.shape}")
    if kp.rows != vp.rows or kp.rows < 1:
        raise ShapeError(f"key/value mismatch: k{kp.shape} v{vp.shape}")
    d = qp.cols // heads
    exact = qp.data.dtype == np.float64
    s = qp.data.dtype.type(1.0 / np.sqrt(d))
    y = np.empty((qp.rows, qp.cols), dtype=qp.data.dtype)
    attns = []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        scores = (qp.data[:, sl] @ kp.data[:, sl].T) * s
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        if exact:
            attn = e / _exact_row_sums(e)
            y[:, sl] = _exact_combine(attn, vp.data[:, sl])
        else:
            attn = e / e.sum(axis=1, keepdims=True)
            y[:, sl] = attn @ vp.data[:, sl]
        attns.append(attn)
    out = Tensor2(y, (qp, kp, vp))

    def bwd(g):
        gq = np.zeros_like(qp.data) if qp.requires_grad else None
        gk = np.zeros_like(kp.data) if kp.requires_grad else None
        gv = np.zeros_like(vp.data) if vp.requires_grad else None
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            attn = attns[h]
            gh = g[:, sl]
            d_attn = gh @ vp.data[:, sl].T
            d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
            if gq is not None:
                gq[:, sl] = (d_scores @ kp.data[:, sl]) * s
            if gk is not None:
                gk[:, sl] = (d_scores.T @ qp.data[:, sl]) * s
            if gv is not None:
                gv[:, sl] = attn.T @ gh
        if gq is not None:
            _accum(qp, gq)
        if gk is not None:
            _accum(kp, gk)
        if gv is not None:
            _accum(vp, gv)

    out.bwd_fn = bwd
    return out


# -- structural ops --------------------------------------------------------

def gather_rows(a: Tensor2, idx) -> Tensor2:
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor2(a.data[idx], (a,))

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

    out.bwd_fn = bwd
    return out


def select_entries(a: Tensor2, rows, cols) -> Tensor2:
    """Pick entries a[rows[i], cols[i]] -> (len, 1)."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = Tensor2(a.data[rows, cols][:, None], (a,))

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, cols), g[:, 0])
            _accum(a, ga)

    out.bwd_fn = bwd
    return out


def slice_cols(a: Tensor2, j0: int, j1: int) -> Tensor2:
    out = Tensor2(a.data[:, j0:j1].copy(), (a,))

    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[:, j0:j1] = g
            _accum(a, ga)

    out.bwd_fn = bwd
    return out


def concat_cols(tensors) -> Tensor2:
    tensors = list(tensors)
    widths = [t.cols for t in tensors]
    out = Tensor2(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors))

    def bwd(g):
        j = 0
        for t, w in zip(tensors, widths):
            if t.requires_grad:
                _accum(t, g[:, j:j + w])
            j += w

    out.bwd_fn = bwd
    return out


def layer_norm(x: Tensor2, gain: Tensor2, bias: Tensor2, eps: float = 1e-5) -> Tensor2:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} for input {x.shape}")
    eps = x.data.dtype.type(eps)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor2(xhat * gain.data + bias.data, (x, gain, bias))

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=0, keepdims=True))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
            _accum(x, gx)

    out.bwd_fn = bwd
    return out


# -- backward pass ---------------------------------------------------------

def backward(loss: Tensor2) -> None:
    """Reverse-mode sweep from a scalar loss node."""
    if loss.shape != (1, 1):
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((1, 1), dtype=loss.data.dtype)
    for node in reversed(order):
        if node.bwd_fn is not None and node.grad is not None:
            node.bwd_fn(node.grad)
