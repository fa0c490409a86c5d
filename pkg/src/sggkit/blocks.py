"""Attention, feed-forward and normalization building blocks.

All blocks are pre-norm residual: x + MHAttn(LN(x), k, v) and
x + FFN(LN(x)).  Parameters live in a ParamStore under a block prefix so
the optimizer and checkpointing see flat named tensors.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor2
from .errors import ConfigError, ShapeError
from .params import ParamStore, xavier_uniform


def layer_norm(x: Tensor2, gain: Tensor2, bias: Tensor2, eps: float = 1e-5) -> Tensor2:
    if x.cols < 1:
        raise ShapeError("layer_norm needs at least one column")
    return ad.layer_norm(x, gain, bias, eps)


class MultiHeadAttention:
    """Scaled dot-product attention with h heads, no residual or norm."""

    def __init__(self, store: ParamStore, prefix: str, width: int, heads: int,
                 rng: np.random.Generator):
        if width % heads != 0:
            raise ConfigError(f"width {width} not divisible by heads {heads}")
        self.store = store
        self.prefix = prefix
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        for w in ("wq", "wk", "wv", "wo"):
            store.add(f"{prefix}.{w}", xavier_uniform((width, width), rng, store.dtype))
        for b in ("bq", "bk", "bv", "bo"):
            store.add(f"{prefix}.{b}", np.zeros((1, width), dtype=store.dtype))

    def _p(self, name: str) -> Tensor2:
        return self.store.leaf(f"{self.prefix}.{name}")

    def __call__(self, q: Tensor2, k: Tensor2, v: Tensor2) -> Tensor2:
        if q.cols != self.width or k.cols != self.width or v.cols != self.width:
            raise ShapeError(
                f"attention width mismatch: q {q.shape}, k {k.shape}, v {v.shape}, c={self.width}")
        if k.rows != v.rows:
            raise ShapeError(f"key/value row mismatch: {k.shape} vs {v.shape}")
        if k.rows < 1:
            raise ShapeError("attention needs at least one key")
        qp = ad.affine(q, self._p("wq"), self._p("bq"))
        kp = ad.affine(k, self._p("wk"), self._p("bk"))
        vp = ad.affine(v, self._p("wv"), self._p("bv"))
        merged = ad.multi_head_core(qp, kp, vp, self.heads)
        return ad.affine(merged, self._p("wo"), self._p("bo"))

    def attention_weights(self, q: np.ndarray, k: np.ndarray) -> np.ndarray:
        """Per-head softmax weights for inspection, shape (heads, M, N)."""
        wq = self.store.value(f"{self.prefix}.wq")
        bq = self.store.value(f"{self.prefix}.bq")
        wk = self.store.value(f"{self.prefix}.wk")
        bk = self.store.value(f"{self.prefix}.bk")
        qp = q @ wq + bq
        kp = k @ wk + bk
        d = self.head_dim
        out = np.empty((self.heads, q.shape[0], k.shape[0]), dtype=qp.dtype)
        for h in range(self.heads):
            s = qp[:, h * d:(h + 1) * d] @ kp[:, h * d:(h + 1) * d].T / np.sqrt(d)
            s = s - s.max(axis=1, keepdims=True)
            e = np.exp(s)
            out[h] = e / e.sum(axis=1, keepdims=True)
        return out


class FeedForward:
    def __init__(self, store: ParamStore, prefix: str, width: int, hidden: int,
                 rng: np.random.Generator):
        self.store = store
        self.prefix = prefix
        store.add(f"{prefix}.w1", xavier_uniform((width, hidden), rng, store.dtype))
        store.add(f"{prefix}.b1", np.zeros((1, hidden), dtype=store.dtype))
        store.add(f"{prefix}.w2", xavier_uniform((hidden, width), rng, store.dtype))
        store.add(f"{prefix}.b2", np.zeros((1, width), dtype=store.dtype))

    def __call__(self, x: Tensor2) -> Tensor2:
        s = self.store
        return ad.ffn_core(x, s.leaf(f"{self.prefix}.w1"), s.leaf(f"{self.prefix}.b1"),
                           s.leaf(f"{self.prefix}.w2"), s.leaf(f"{self.prefix}.b2"))


class _Norm:
    def __init__(self, store: ParamStore, prefix: str, width: int):
        self.store = store
        self.prefix = prefix
        store.add(f"{prefix}.g", np.ones((1, width), dtype=store.dtype))
        store.add(f"{prefix}.b", np.zeros((1, width), dtype=store.dtype))

    def __call__(self, x: Tensor2) -> Tensor2:
        return layer_norm(x, self.store.leaf(f"{self.prefix}.g"),
                          self.store.leaf(f"{self.prefix}.b"))


class AttnSublayer:
    """x + MHAttn(LN(x), k, v)"""

    def __init__(self, store, prefix, width, heads, rng):
        self.norm = _Norm(store, f"{prefix}.ln", width)
        self.mha = MultiHeadAttention(store, f"{prefix}.mha", width, heads, rng)

    def __call__(self, x: Tensor2, k: Tensor2, v: Tensor2) -> Tensor2:
        return x + self.mha(self.norm(x), k, v)


class FfnSublayer:
    """x + FFN(LN(x))"""

    def __init__(self, store, prefix, width, hidden, rng):
        self.norm = _Norm(store, f"{prefix}.ln", width)
        self.ffn = FeedForward(store, f"{prefix}.ffn", width, hidden, rng)

    def __call__(self, x: Tensor2) -> Tensor2:
        return x + self.ffn(self.norm(x))


class AttentionBlock:
    """The attention block A(q, k, v): pre-norm cross-attention + FFN."""

    def __init__(self, store: ParamStore, prefix: str, width: int, heads: int,
                 ffn_hidden: int, rng: np.random.Generator):
        self.width = width
        self.heads = heads
        self.attn = AttnSublayer(store, f"{prefix}.attn", width, heads, rng)
        self.ffn = FfnSublayer(store, f"{prefix}.ffn", width, ffn_hidden, rng)

    def __call__(self, q: Tensor2, k: Tensor2, v: Tensor2) -> Tensor2:
        x = self.attn(q, k, v)
        return self.ffn(x)


def attention_block(q: Tensor2, k: Tensor2, v: Tensor2, block: AttentionBlock) -> Tensor2:
    return block(q, k, v)


class DecoderLayer:
    """Self-attention over queries, cross-attention to memory, feed-forward."""

    def __init__(self, store, prefix, width, heads, ffn_hidden, rng):
        self.self_attn = AttnSublayer(store, f"{prefix}.self", width, heads, rng)
        self.cross_attn = AttnSublayer(store, f"{prefix}.cross", width, heads, rng)
        self.ffn = FfnSublayer(store, f"{prefix}.out", width, ffn_hidden, rng)

    def __call__(self, x: Tensor2, memory: Tensor2) -> Tensor2:
        x = self.self_attn(x, x, x)
        x = self.cross_attn(x, memory, memory)
        return self.ffn(x)


class MLPHead:
    """Two-layer MLP head; optional sigmoid squashing for box outputs."""

    def __init__(self, store, prefix, width, out_dim, rng, sigmoid_out=False):
        self.store = store
        self.prefix = prefix
        self.sigmoid_out = sigmoid_out
        store.add(f"{prefix}.w1", xavier_uniform((width, width), rng, store.dtype))
        store.add(f"{prefix}.b1", np.zeros((1, width), dtype=store.dtype))
        store.add(f"{prefix}.w2", xavier_uniform((width, out_dim), rng, store.dtype))
        store.add(f"{prefix}.b2", np.zeros((1, out_dim), dtype=store.dtype))

    def __call__(self, x: Tensor2) -> Tensor2:
        s = self.store
        y = ad.ffn_core(x, s.leaf(f"{self.prefix}.w1"), s.leaf(f"{self.prefix}.b1"),
                        s.leaf(f"{self.prefix}.w2"), s.leaf(f"{self.prefix}.b2"))
        return ad.sigmoid(y) if self.sigmoid_out else y
