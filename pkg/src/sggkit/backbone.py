"""Feature-grid tokenizer and entity query decoder.

Stands in for a CNN+transformer detector backbone: the rendered grid is
projected to model width, tagged with fixed 2-D sinusoidal positions, and
a stack of decoder layers refines learnable entity queries against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor2, constant
from .blocks import DecoderLayer
from .errors import ConfigError, ShapeError
from .params import ParamStore, xavier_uniform


@dataclass
class FeatureGrid:
    """Image stand-in: height x width x channels of rendered features."""
    width: int
    height: int
    channels: int
    values: np.ndarray      # (height, width, channels)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (self.height, self.width, self.channels):
            raise ShapeError(f"grid values shape {v.shape} != "
                             f"({self.height}, {self.width}, {self.channels})")
        if not np.isfinite(v).all():
            raise ShapeError("grid contains non-finite values")
        self.values = v

    def tokens(self) -> np.ndarray:
        """Row-major (height*width, channels) view."""
        return self.values.reshape(self.height * self.width, self.channels)


def sinusoidal_positions(width: int, height: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal positional table, (width*height, dim).

    Half the channels encode x, half encode y, interleaved sin/cos pairs.
    """
    if dim % 4 != 0:
        raise ConfigError(f"positional encoding needs dim divisible by 4, got {dim}")
    half = dim // 2
    out = np.zeros((height * width, dim), dtype=np.float64)
    div = np.exp(np.arange(0, half, 2) / half * -np.log(10000.0))
    ys, xs = np.divmod(np.arange(height * width), width)
    for base, coord in ((0, xs), (half, ys)):
        ang = coord[:, None] * div[None, :]
        out[:, base:base + half:2] = np.sin(ang)
        out[:, base + 1:base + half:2] = np.cos(ang)
    return out


class Backbone:
    def __init__(self, store: ParamStore, prefix: str, *, channels_in: int, width: int,
                 heads: int, ffn_hidden: int, n_queries: int, n_layers: int,
                 rng: np.random.Generator, pos_scale: float = 0.25):
        self.store = store
        self.prefix = prefix
        self.channels_in = channels_in
        self.width = width
        self.n_queries = n_queries
        self.pos_scale = pos_scale
        store.add(f"{prefix}.proj.w", xavier_uniform((channels_in, width), rng, store.dtype))
        store.add(f"{prefix}.proj.b", np.zeros((1, width), dtype=store.dtype))
        store.add(f"{prefix}.queries",
                  xavier_uniform((n_queries, width), rng, store.dtype))
        self.layers = [DecoderLayer(store, f"{prefix}.layer{i}", width, heads, ffn_hidden, rng)
                       for i in range(n_layers)]
        self._pos_cache = {}

    def _positions(self, width: int, height: int) -> np.ndarray:
        key = (width, height)
        if key not in self._pos_cache:
            pos = sinusoidal_positions(width, height, self.width) * self.pos_scale
            self._pos_cache[key] = pos.astype(self.store.dtype)
        return self._pos_cache[key]

    def encode_grid(self, grid: FeatureGrid) -> Tensor2:
        """Project grid cells to tokens of model width + positional encoding."""
        if grid.channels != self.channels_in:
            raise ConfigError(f"grid has {grid.channels} channels, backbone expects "
                              f"{self.channels_in}")
        raw = constant(grid.tokens().astype(self.store.dtype))
        pos = constant(self._positions(grid.width, grid.height))
        w = self.store.leaf(f"{self.prefix}.proj.w")
        b = self.store.leaf(f"{self.prefix}.proj.b")
        return raw @ w + b + pos

    def entity_decode(self, tokens: Tensor2) -> Tensor2:
        """Refine the learnable entity queries against image tokens."""
        if tokens.rows < 1:
            raise ShapeError("entity_decode needs at least one token")
        x = self.store.leaf(f"{self.prefix}.queries")
        for layer in self.layers:
            x = layer(x, tokens)
        return x
