"""Bidirectional conditioning generator.

Composite predicate queries (predicate + subject/object indicator
sub-queries) are initialized from entity features, then refined for T
stages.  Each stage cross-attends queries to image tokens, conditions the
indicators on blended entity features, augments the predicate queries with
the indicators, and finally runs the configured entity<->predicate
interaction: bidirectional attention, predicate-to-entity only, or none.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor2
from .blocks import AttentionBlock
from .errors import ConfigError
from .params import ParamStore, xavier_uniform

MODES = ("biatt", "uniatt", "none")


@dataclass
class CompositeQueries:
    """Predicate query bundle: subject indicator, predicate, object indicator."""
    sub_ind: Tensor2
    pred: Tensor2
    obj_ind: Tensor2

    def shapes(self):
        return (self.sub_ind.shape, self.pred.shape, self.obj_ind.shape)


@dataclass
class GeneratorState:
    stage: int
    q_ent: Tensor2
    composite: CompositeQueries
    v_ent: Tensor2          # cached entity features, constant across stages


@dataclass
class _StageBlocks:
    ent_img: AttentionBlock
    pred_img: AttentionBlock
    sub_ind: AttentionBlock
    obj_ind: AttentionBlock
    ent_from_pred: AttentionBlock
    pred_from_ent: AttentionBlock


class ConditioningGenerator:
    def __init__(self, store: ParamStore, prefix: str, *, width: int, heads: int,
                 ffn_hidden: int, n_pred_queries: int, stages: int, mode: str = "biatt",
                 blend: float = 0.5, rng: np.random.Generator = None):
        if stages < 1:
            raise ConfigError(f"stage count must be >= 1, got {stages}")
        if mode not in MODES:
            raise ConfigError(f"interaction mode {mode!r} not in {MODES}")
        if blend < 0:
            raise ConfigError(f"blend coefficient must be >= 0, got {blend}")
        self.store = store
        self.prefix = prefix
        self.width = width
        self.n_pred_queries = n_pred_queries
        self.stages = stages
        self.mode = mode
        self.blend = blend
        for seed_name in ("seed_pred", "seed_sub", "seed_obj"):
            store.add(f"{prefix}.{seed_name}",
                      xavier_uniform((n_pred_queries, width), rng, store.dtype))
        self.init_attn = AttentionBlock(store, f"{prefix}.init", width, heads, ffn_hidden, rng)
        self.stage_blocks = []
        for t in range(stages):
            sp = f"{prefix}.stage{t}"
            self.stage_blocks.append(_StageBlocks(
                ent_img=AttentionBlock(store, f"{sp}.ent_img", width, heads, ffn_hidden, rng),
                pred_img=AttentionBlock(store, f"{sp}.pred_img", width, heads, ffn_hidden, rng),
                sub_ind=AttentionBlock(store, f"{sp}.sub_ind", width, heads, ffn_hidden, rng),
                obj_ind=AttentionBlock(store, f"{sp}.obj_ind", width, heads, ffn_hidden, rng),
                ent_from_pred=AttentionBlock(store, f"{sp}.ent_from_pred", width, heads,
                                             ffn_hidden, rng),
                pred_from_ent=AttentionBlock(store, f"{sp}.pred_from_ent", width, heads,
                                             ffn_hidden, rng),
            ))
            store.add(f"{sp}.w_ind", xavier_uniform((width, width), rng, store.dtype))
            store.add(f"{sp}.w_pred", xavier_uniform((width, width), rng, store.dtype))
        # parameterless normalization for the entity-feature blend
        self._unit_gain = None
        self._zero_bias = None

    def _plain_norm(self, x: Tensor2) -> Tensor2:
        if self._unit_gain is None or self._unit_gain.cols != x.cols \
                or self._unit_gain.dtype != x.dtype:
            self._unit_gain = ad.constant(np.ones((1, x.cols), dtype=x.dtype))
            self._zero_bias = ad.constant(np.zeros((1, x.cols), dtype=x.dtype))
        return ad.layer_norm(x, self._unit_gain, self._zero_bias)

    def init_composite(self, v_ent: Tensor2) -> CompositeQueries:
        """Seed the composite queries by attending the learnable seeds over V_e."""
        s = self.store
        return CompositeQueries(
            sub_ind=self.init_attn(s.leaf(f"{self.prefix}.seed_sub"), v_ent, v_ent),
            pred=self.init_attn(s.leaf(f"{self.prefix}.seed_pred"), v_ent, v_ent),
            obj_ind=self.init_attn(s.leaf(f"{self.prefix}.seed_obj"), v_ent, v_ent),
        )

    def stage(self, state: GeneratorState, tokens: Tensor2, *, mode: str = None) -> GeneratorState:
        if state.stage >= self.stages:
            raise ConfigError(f"stage {state.stage} out of range (T={self.stages})")
        mode = self.mode if mode is None else mode
        if mode not in MODES:
            raise ConfigError(f"interaction mode {mode!r} not in {MODES}")
        blocks = self.stage_blocks[state.stage]
        s = self.store
        comp = state.composite

        ent_hat = blocks.ent_img(state.q_ent, tokens, tokens)
        pred_hat = blocks.pred_img(comp.pred, tokens, tokens)
        v_blend = state.v_ent + ad.scale(self._plain_norm(ent_hat), self.blend)
        sub_hat = blocks.sub_ind(comp.sub_ind, v_blend, v_blend)
        obj_hat = blocks.obj_ind(comp.obj_ind, v_blend, v_blend)

        w_ind = s.leaf(f"{self.prefix}.stage{state.stage}.w_ind")
        w_pred = s.leaf(f"{self.prefix}.stage{state.stage}.w_pred")
        pred_tilde = (pred_hat + (obj_hat + sub_hat) @ w_ind) @ w_pred

        if mode == "biatt":
            ent_next = blocks.ent_from_pred(ent_hat, pred_tilde, pred_tilde)
            pred_next = blocks.pred_from_ent(pred_tilde, ent_hat, ent_hat)
        elif mode == "uniatt":
            ent_next = ent_hat
            pred_next = blocks.pred_from_ent(pred_tilde, ent_hat, ent_hat)
        else:
            ent_next = ent_hat
            pred_next = pred_tilde

        return GeneratorState(
            stage=state.stage + 1,
            q_ent=ent_next,
            composite=CompositeQueries(sub_ind=sub_hat, pred=pred_next, obj_ind=obj_hat),
            v_ent=state.v_ent,
        )

    def run(self, tokens: Tensor2, v_ent: Tensor2, *, mode: str = None):
        """Full multi-stage refinement; returns (q_ent_end, composite_end)."""
        state = GeneratorState(stage=0, q_ent=v_ent,
                               composite=self.init_composite(v_ent), v_ent=v_ent)
        for _ in range(self.stages):
            state = self.stage(state, tokens, mode=mode)
        return state.q_ent, state.composite
