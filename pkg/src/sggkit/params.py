"""Named parameter store and seeded initialization.

Every parameter is a named 2-D array with a learnable flag and a per-name
learning-rate multiplier.  Forward passes fetch leaf tensors through
``leaf()``; the same leaf object is reused within a step so gradients from
several scenes in a batch accumulate on it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor2, backward
from .errors import ConfigError, UsageError


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream name).

    Philox keys are derived from a hash of the pair, so streams are
    independent and platform-stable.
    """
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def xavier_uniform(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


@dataclass
class Param:
    value: np.ndarray
    learnable: bool = True
    lr_mult: float = 1.0


@dataclass
class ParamStore:
    dtype: type = np.float32
    _params: dict = field(default_factory=dict)
    _leaves: dict = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, learnable: bool = True,
            lr_mult: float = 1.0) -> None:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.asarray(value, dtype=self.dtype)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ConfigError(f"parameter {name!r} must be 1-D or 2-D")
        self._params[name] = Param(arr, learnable, lr_mult)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def param(self, name: str) -> Param:
        return self._params[name]

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def set_value(self, name: str, value: np.ndarray) -> None:
        p = self._params[name]
        arr = np.asarray(value, dtype=self.dtype)
        if arr.shape != p.value.shape:
            raise ConfigError(f"shape mismatch for {name!r}: {arr.shape} vs {p.value.shape}")
        p.value = arr

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def leaf(self, name: str) -> Tensor2:
        """Tensor leaf for a parameter; cached until the next begin_step()."""
        t = self._leaves.get(name)
        if t is None:
            p = self._params[name]
            t = Tensor2(p.value, requires_grad=p.learnable)
            self._leaves[name] = t
        return t

    def begin_step(self) -> None:
        self._leaves.clear()

    def grads(self) -> dict:
        """Gradients accumulated on learnable leaves since begin_step()."""
        out = {}
        for name, t in self._leaves.items():
            if self._params[name].learnable and t.grad is not None:
                out[name] = t.grad
        return out

    def state_dict(self) -> dict:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, value in state.items():
            self.set_value(name, value)

    def frozen_fingerprint(self) -> str:
        """Hash of all frozen parameters; bit-stability check across training."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            p = self._params[name]
            if not p.learnable:
                h.update(name.encode("utf-8"))
                h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()


def grad(loss: Tensor2, store: ParamStore) -> dict:
    """Analytic gradients of a scalar loss for every learnable parameter."""
    if loss.shape != (1, 1):
        raise UsageError("grad() requires a scalar loss node")
    backward(loss)
    return store.grads()
