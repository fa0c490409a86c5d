"""Full scene-graph model: backbone, conditioning generator, heads, teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembler import EntityPrediction, Indicator, PredicatePrediction
from .autodiff import Tensor2
from .backbone import Backbone, FeatureGrid
from .blocks import MLPHead
from .conditioning import ConditioningGenerator
from .config import DataConfig, ModelConfig
from .distill import (Teacher, classifier_logits, init_classifier, make_class_table)
from .data import entity_labels, predicate_labels
from .errors import ConfigError
from .losses import _softmax_np
from .metrics import logit_adjust
from .params import ParamStore, named_rng


@dataclass
class ModelOutput:
    ent_logits: Tensor2
    ent_boxes: Tensor2
    pred_logits: Tensor2
    pred_boxes: Tensor2
    sub_logits: Tensor2
    sub_boxes: Tensor2
    obj_logits: Tensor2
    obj_boxes: Tensor2
    q_ent_end: Tensor2
    q_pred_end: Tensor2


class SGModel:
    def __init__(self, model_cfg: ModelConfig, data_cfg: DataConfig,
                 classifier_lr_mult: float = 0.1, dtype=np.float32):
        model_cfg.validate()
        if model_cfg.width != data_cfg.grid_channels:
            raise ConfigError(
                "model width must equal grid channels so the class embedding "
                f"table can anchor both rendering and classifiers "
                f"({model_cfg.width} vs {data_cfg.grid_channels})")
        self.cfg = model_cfg
        self.data_cfg = data_cfg
        self.store = ParamStore(dtype=dtype)
        rng = named_rng(model_cfg.init_seed, "init")

        self.backbone = Backbone(
            self.store, "backbone", channels_in=data_cfg.grid_channels,
            width=model_cfg.width, heads=model_cfg.heads,
            ffn_hidden=model_cfg.ffn_hidden, n_queries=model_cfg.entity_queries,
            n_layers=model_cfg.entity_layers, rng=rng,
            pos_scale=model_cfg.pos_scale)
        self.generator = ConditioningGenerator(
            self.store, "bcg", width=model_cfg.width, heads=model_cfg.heads,
            ffn_hidden=model_cfg.ffn_hidden, n_pred_queries=model_cfg.predicate_queries,
            stages=model_cfg.stages, mode=model_cfg.bcg_mode, blend=model_cfg.blend,
            rng=rng)
        self.teacher = Teacher(self.store, "teacher",
                               channels_in=data_cfg.grid_channels,
                               width=model_cfg.width, seed=model_cfg.teacher_seed)

        ent_labels = entity_labels(data_cfg.entity_classes)
        pred_labels = predicate_labels(data_cfg.predicate_classes)
        self.class_table = make_class_table(ent_labels + pred_labels,
                                            data_cfg.grid_channels,
                                            data_cfg.embedding_seed, "cls")
        for prefix, labels in (("head.ent_cls", ent_labels),
                               ("head.pred_cls", pred_labels),
                               ("head.sub_cls", ent_labels),
                               ("head.obj_cls", ent_labels)):
            init_classifier(self.store, prefix, self.class_table, labels,
                            classifier_lr_mult)
        self.ent_box = MLPHead(self.store, "head.ent_box", model_cfg.width, 4, rng,
                               sigmoid_out=True)
        self.pred_box = MLPHead(self.store, "head.pred_box", model_cfg.width, 4, rng,
                                sigmoid_out=True)
        self.sub_box = MLPHead(self.store, "head.sub_box", model_cfg.width, 4, rng,
                               sigmoid_out=True)
        self.obj_box = MLPHead(self.store, "head.obj_box", model_cfg.width, 4, rng,
                               sigmoid_out=True)

    def forward(self, grid: FeatureGrid, *, mode: str = None) -> ModelOutput:
        tokens = self.backbone.encode_grid(grid)
        v_ent = self.backbone.entity_decode(tokens)
        q_ent_end, comp = self.generator.run(tokens, v_ent, mode=mode)
        s = self.store
        return ModelOutput(
            ent_logits=classifier_logits(s, "head.ent_cls", q_ent_end),
            ent_boxes=self.ent_box(q_ent_end),
            pred_logits=classifier_logits(s, "head.pred_cls", comp.pred),
            pred_boxes=self.pred_box(comp.pred),
            sub_logits=classifier_logits(s, "head.sub_cls", comp.sub_ind),
            sub_boxes=self.sub_box(comp.sub_ind),
            obj_logits=classifier_logits(s, "head.obj_cls", comp.obj_ind),
            obj_boxes=self.obj_box(comp.obj_ind),
            q_ent_end=q_ent_end,
            q_pred_end=comp.pred)

    def predict(self, grid: FeatureGrid, *, tau: float = 0.0, frequency=None,
                mode: str = None):
        """Detached prediction records for assembly and evaluation."""
        self.store.begin_step()
        out = self.forward(grid, mode=mode)
        ent_probs = _softmax_np(np.asarray(out.ent_logits.data, dtype=np.float64))
        pred_logits = np.asarray(out.pred_logits.data, dtype=np.float64)
        if tau > 0:
            if frequency is None:
                raise ConfigError("logit adjustment needs a frequency table")
            smoothed = np.asarray(frequency, dtype=np.float64) + 1.0
            pred_logits = logit_adjust(pred_logits, smoothed, tau)
        pred_probs = _softmax_np(pred_logits)
        sub_probs = _softmax_np(np.asarray(out.sub_logits.data, dtype=np.float64))
        obj_probs = _softmax_np(np.asarray(out.obj_logits.data, dtype=np.float64))

        entities = [EntityPrediction(box=out.ent_boxes.data[i].astype(np.float64),
                                     probs=ent_probs[i], query_index=i)
                    for i in range(ent_probs.shape[0])]
        predicates = [PredicatePrediction(
            probs=pred_probs[j],
            box=out.pred_boxes.data[j].astype(np.float64),
            subject=Indicator(box=out.sub_boxes.data[j].astype(np.float64),
                              probs=sub_probs[j]),
            object=Indicator(box=out.obj_boxes.data[j].astype(np.float64),
                             probs=obj_probs[j]),
            query_index=j) for j in range(pred_probs.shape[0])]
        return entities, predicates
