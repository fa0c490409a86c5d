"""Masked feature distillation against a frozen teacher.

The teacher is a deterministic stand-in for a pretrained vision-language
encoder: mean-pooled grid features through a frozen random linear map,
L2-normalized.  Random mask vectors select which query rows participate in
each alignment step, and the classifiers are initialized from a frozen
table of unit class embeddings and fine-tuned with a reduced learning
rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor2
from .backbone import FeatureGrid
from .errors import ConfigError, SchemaError
from .params import ParamStore, named_rng


@dataclass
class TeacherEmbedding:
    vector: np.ndarray      # (width,), unit L2 norm

    def __post_init__(self):
        v = np.asarray(self.vector)
        if not np.isfinite(v).all():
            raise ConfigError("teacher embedding must be finite")
        self.vector = v


@dataclass
class MaskVector:
    entries: np.ndarray     # each 0 or 1/(1-ratio); at least one nonzero
    ratio: float


@dataclass
class ClassEmbeddingTable:
    """Frozen unit embedding per class label; anchors the classifiers."""
    rows: dict              # label -> (width,) unit vector
    prompt_template: str = "A photo of a/an *"

    def matrix(self, labels) -> np.ndarray:
        return np.stack([self.rows[lab] for lab in labels])


def make_class_table(labels, width: int, seed: int, stream: str,
                     prompt_template: str = "A photo of a/an *") -> ClassEmbeddingTable:
    """Deterministic frozen unit vectors, one per class label."""
    rows = {}
    for lab in labels:
        rng = named_rng(seed, f"{stream}:{lab}")
        v = rng.standard_normal(width)
        rows[lab] = (v / np.linalg.norm(v)).astype(np.float32)
    return ClassEmbeddingTable(rows=rows, prompt_template=prompt_template)


class Teacher:
    """Frozen embedding of a whole grid; pure and deterministic from its seed."""

    def __init__(self, store: ParamStore, prefix: str, *, channels_in: int, width: int,
                 seed: int):
        self.store = store
        self.prefix = prefix
        rng = named_rng(seed, "teacher.map")
        lin = rng.standard_normal((channels_in, width)) / np.sqrt(channels_in)
        store.add(f"{prefix}.map", lin.astype(store.dtype), learnable=False)
        d = named_rng(seed, "teacher.default").standard_normal(width)
        d /= np.linalg.norm(d)
        store.add(f"{prefix}.default", d.astype(store.dtype), learnable=False)

    def embed(self, grid: FeatureGrid) -> TeacherEmbedding:
        pooled = grid.tokens().astype(self.store.dtype).mean(axis=0)
        mapped = pooled @ self.store.value(f"{self.prefix}.map")
        norm = np.linalg.norm(mapped)
        if norm == 0.0:
            return TeacherEmbedding(self.store.value(f"{self.prefix}.default")[0].copy())
        return TeacherEmbedding(mapped / norm)


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskVector:
    """i.i.d. mask entries: 0 with probability `ratio`, else 1/(1-ratio).

    An all-zero draw is resampled so the masked mean stays defined.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    if n < 1:
        raise ConfigError(f"mask length must be >= 1, got {n}")
    keep_value = 1.0 / (1.0 - ratio)
    while True:
        keep = rng.random(n) >= ratio
        if keep.any():
            break
    return MaskVector(entries=np.where(keep, keep_value, 0.0), ratio=ratio)


def mimic_loss(q_pred_end: Tensor2, q_ent_end: Tensor2, teacher: TeacherEmbedding,
               ratio: float, rng: np.random.Generator) -> Tensor2:
    """L1 alignment of masked query means to the teacher embedding.

    Independent masks for the predicate and entity branches; the L1 is the
    absolute difference summed over feature dimensions.
    """
    width = q_pred_end.cols
    if q_ent_end.cols != width or teacher.vector.shape[0] != width:
        raise ConfigError("mimic_loss width mismatch between queries and teacher")
    target = ad.constant(teacher.vector.reshape(1, -1).astype(q_pred_end.dtype))
    total = None
    for q in (q_pred_end, q_ent_end):
        mask = sample_mask(q.rows, ratio, rng)
        mask_col = ad.constant(mask.entries.reshape(-1, 1).astype(q.dtype))
        mean = ad.scale(ad.col_sum(q * mask_col), 1.0 / q.rows)
        term = ad.sum_all(ad.absval(target - mean))
        total = term if total is None else total + term
    return total


def init_classifier(store: ParamStore, prefix: str, table: ClassEmbeddingTable,
                    labels, lr_mult: float) -> None:
    """Linear classifier rows from the embedding table + a zero no-object row.

    The weight stays learnable but steps at `lr_mult` times the base rate.
    Logit k of input x is the plain dot product with row k.
    """
    missing = [lab for lab in labels if lab not in table.rows]
    if missing:
        raise SchemaError(f"class table missing labels: {missing}")
    width = next(iter(table.rows.values())).shape[0]
    rows = table.matrix(labels)
    weight = np.concatenate([rows, np.zeros((1, width), dtype=rows.dtype)], axis=0)
    store.add(f"{prefix}.w", weight.astype(store.dtype), learnable=True, lr_mult=lr_mult)


def classifier_logits(store: ParamStore, prefix: str, x: Tensor2) -> Tensor2:
    return x @ ad.transpose(store.leaf(f"{prefix}.w"))
