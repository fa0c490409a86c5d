"""Training loop, optimizers, checkpoint IO and the evaluation driver.

Two-phase regime: phase 1 trains with feature distillation but without the
entity branch (interaction mode "none", entity-loss weight 0); phase 2
switches to the configured interaction mode with the full objective.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assembler import adjacency, assemble, postprocess
from .config import (DataConfig, RunConfig, _section_from_dict, config_from_dict)
from .data import Dataset
from .distill import mimic_loss
from .errors import DataError, NumericalError, SchemaError
from .losses import (LossReport, entity_loss, predicate_loss, render_gt_triplets,
                     total_loss)
from .metrics import compute_metrics, match_triplets
from .model import SGModel
from .params import ParamStore, named_rng

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BCTR"
CKPT_VERSION = 1


def data_config_from_manifest(manifest) -> DataConfig:
    return _section_from_dict(DataConfig, dict(manifest.generator), "manifest.generator")


# -- optimizers -------------------------------------------------------------

class SGD:
    def __init__(self, lr: float, momentum: float = 0.9, clip_norm: float = 1.0):
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.buf = {}

    def step(self, store: ParamStore, grads: dict) -> None:
        scale = _clip_scale(grads, self.clip_norm)
        for name, g in grads.items():
            p = store.param(name)
            if not p.learnable:
                continue
            g = g * scale
            buf = self.buf.get(name)
            buf = g if buf is None else self.momentum * buf + g
            self.buf[name] = buf
            # multiplier applied last so a 0.1 multiplier scales the step by exactly 0.1
            p.value = p.value - p.lr_mult * (self.lr * buf)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float = 1.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, store: ParamStore, grads: dict) -> None:
        scale = _clip_scale(grads, self.clip_norm)
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = store.param(name)
            if not p.learnable:
                continue
            g = g * scale
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            base = self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.value = p.value - p.lr_mult * base


def _clip_scale(grads: dict, clip_norm: float) -> float:
    """Global-norm clip factor as a python float (keeps float32 params float32)."""
    if clip_norm <= 0:
        return 1.0
    sq = sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())
    norm = float(np.sqrt(sq))
    return 1.0 if norm <= clip_norm else float(clip_norm / norm)


def make_optimizer(tcfg):
    if tcfg.optimizer == "sgd":
        return SGD(tcfg.lr, tcfg.momentum, tcfg.clip_norm)
    return Adam(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.clip_norm)


# -- training ---------------------------------------------------------------

def scene_loss(model: SGModel, scene, grid, loss_cfg, *, mode=None,
               entity_weight: float = 1.0, mask_rng=None):
    """Forward + full objective for one scene; returns (node, LossReport)."""
    out = model.forward(grid, mode=mode)
    l_ent = entity_loss(out.ent_logits, out.ent_boxes,
                        [c for c, _ in scene.entities],
                        [b for _, b in scene.entities], loss_cfg)
    gt = render_gt_triplets(scene)
    l_pre_i, l_pre_p, _ = predicate_loss(
        out.pred_logits, out.pred_boxes, out.sub_logits, out.sub_boxes,
        out.obj_logits, out.obj_boxes, gt, loss_cfg)
    l_mimic = None
    if loss_cfg.mimic_weight > 0:
        teacher = model.teacher.embed(grid)
        l_mimic = mimic_loss(out.q_pred_end, out.q_ent_end, teacher,
                             model.cfg.mask_ratio, mask_rng)
    return total_loss(l_ent, l_pre_i, l_pre_p, l_mimic, loss_cfg.mimic_weight,
                      entity_weight=entity_weight)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)


def train(run_cfg: RunConfig, dataset: Dataset, model: SGModel = None,
          log_path=None, abort_ckpt_path=None) -> tuple:
    """Train a model on the dataset's training split; returns (model, result)."""
    run_cfg.validate()
    tcfg = run_cfg.train
    if model is None:
        model = SGModel(run_cfg.model, data_config_from_manifest(dataset.manifest),
                        classifier_lr_mult=tcfg.classifier_lr_mult)
    opt = make_optimizer(tcfg)
    shuffle_rng = named_rng(run_cfg.seed, "train.shuffle")
    mask_rng = named_rng(run_cfg.seed, "train.mask")
    scenes = [dataset.scene(i) for i in dataset.train_indices]
    result = TrainResult()
    last_good = model.store.state_dict()
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(tcfg.epochs):
            phase1 = epoch < tcfg.phase1_epochs
            mode = "none" if phase1 else None
            ent_weight = 0.0 if phase1 else 1.0
            order = shuffle_rng.permutation(len(scenes))
            sums = np.zeros(5)
            n_seen = 0
            for start in range(0, len(order), tcfg.batch_size):
                batch = order[start:start + tcfg.batch_size]
                model.store.begin_step()
                batch_total = None
                for idx in batch:
                    scene, grid = scenes[int(idx)]
                    node, report = scene_loss(
                        model, scene, grid, run_cfg.loss, mode=mode,
                        entity_weight=ent_weight, mask_rng=mask_rng)
                    sums += [report.l_ent, report.l_pre_i, report.l_pre_p,
                             report.l_mimic, report.total]
                    n_seen += 1
                    batch_total = node if batch_total is None else batch_total + node
                ad.backward(ad.scale(batch_total, 1.0 / len(batch)))
                opt.step(model.store, model.store.grads())
            means = sums / max(n_seen, 1)
            entry = {"epoch": epoch, "phase": 1 if phase1 else 2,
                     "l_ent": means[0], "l_pre_i": means[1], "l_pre_p": means[2],
                     "l_mimic": means[3], "total": means[4]}
            result.history.append(entry)
            log.info("epoch %d phase %d total %.4f", epoch, entry["phase"], means[4])
            if log_f:
                log_f.write(json.dumps(entry, sort_keys=True) + "\n")
            last_good = model.store.state_dict()
    except NumericalError:
        model.store.load_state_dict(last_good)
        if abort_ckpt_path is not None:
            save_checkpoint(abort_ckpt_path, model, run_cfg)
            log.error("non-finite loss; last-good checkpoint written to %s",
                      abort_ckpt_path)
        raise
    finally:
        if log_f:
            log_f.close()
    return model, result


# -- checkpoint IO ------------------------------------------------------------

def save_checkpoint(path, model: SGModel, run_cfg: RunConfig) -> None:
    tensors = dict(sorted(model.store.state_dict().items()))
    cfg_bytes = run_cfg.to_json().encode("utf-8")
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<I", CKPT_VERSION)
    buf += struct.pack("<Q", len(tensors) + 1)

    def emit(name: str, arr: np.ndarray) -> None:
        nb = name.encode("utf-8")
        buf.extend(struct.pack("<I", len(nb)))
        buf.extend(nb)
        dims = arr.shape
        buf.extend(struct.pack("<I", len(dims)))
        buf.extend(struct.pack(f"<{len(dims)}I", *dims))
        buf.extend(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    # config snapshot rides along as a reserved tensor of utf-8 byte values
    emit("__config__", np.frombuffer(cfg_bytes, dtype=np.uint8).astype(np.float32))
    for name, arr in tensors.items():
        emit(name, arr)
    with open(path, "wb") as f:
        f.write(bytes(buf))


def _read_exact(raw: bytes, off: int, n: int):
    if off + n > len(raw):
        raise DataError("truncated checkpoint file")
    return raw[off:off + n], off + n


def load_checkpoint(path):
    """Rebuild (model, run_cfg) from a checkpoint file."""
    with open(path, "rb") as f:
        raw = f.read()
    head, off = _read_exact(raw, 0, 4)
    if head != CKPT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    ver_b, off = _read_exact(raw, off, 4)
    (version,) = struct.unpack("<I", ver_b)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    cnt_b, off = _read_exact(raw, off, 8)
    (count,) = struct.unpack("<Q", cnt_b)
    tensors = {}
    for _ in range(count):
        nlen_b, off = _read_exact(raw, off, 4)
        (nlen,) = struct.unpack("<I", nlen_b)
        name_b, off = _read_exact(raw, off, nlen)
        name = name_b.decode("utf-8")
        rank_b, off = _read_exact(raw, off, 4)
        (rank,) = struct.unpack("<I", rank_b)
        dims_b, off = _read_exact(raw, off, 4 * rank)
        dims = struct.unpack(f"<{rank}I", dims_b)
        n_vals = int(np.prod(dims)) if rank else 1
        data_b, off = _read_exact(raw, off, 4 * n_vals)
        tensors[name] = np.frombuffer(data_b, dtype="<f4").reshape(dims).copy()
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    if "__config__" not in tensors:
        raise DataError(f"{path}: missing config snapshot")
    cfg_text = tensors.pop("__config__").astype(np.uint8).tobytes().decode("utf-8")
    run_cfg = config_from_dict(json.loads(cfg_text))
    model = SGModel(run_cfg.model, run_cfg.data,
                    classifier_lr_mult=run_cfg.train.classifier_lr_mult)
    expected = set(model.store.names())
    got = set(tensors)
    if got != expected:
        unknown = sorted(got - expected)
        missing = sorted(expected - got)
        raise DataError(f"{path}: tensor name mismatch (unknown={unknown[:3]}, "
                        f"missing={missing[:3]})")
    model.store.load_state_dict(tensors)
    return model, run_cfg


# -- evaluation ---------------------------------------------------------------

def check_schema(model_data_cfg: DataConfig, manifest) -> None:
    if (model_data_cfg.entity_classes != manifest.entity_classes
            or model_data_cfg.predicate_classes != manifest.predicate_classes
            or model_data_cfg.embedding_seed != manifest.generator.get("embedding_seed")):
        raise SchemaError("checkpoint schema does not match dataset manifest")


def graph_record(scene_id: int, graph) -> dict:
    def box(b):
        return [float(x) for x in b]
    return {"scene": scene_id, "triplets": [{
        "subject": {"box": box(t.subject.box), "class": t.subject_class,
                    "prob": t.subject_prob, "query": t.subject.query_index},
        "object": {"box": box(t.object.box), "class": t.object_class,
                   "prob": t.object_prob, "query": t.object.query_index},
        "predicate": {"class": t.predicate_class, "prob": t.predicate_prob,
                      "box": box(t.predicate_box), "query": t.predicate_query_index},
        "belief": t.belief} for t in graph.triplets]}


def evaluate(model: SGModel, dataset: Dataset, eval_cfg, *, mode=None,
             indices=None):
    """Run inference over the test split; returns (MetricReport, dump records)."""
    check_schema(model.data_cfg, dataset.manifest)
    manifest = dataset.manifest
    tau = eval_cfg.logit_adjust_tau
    hits_all = []
    dumps = []
    for idx in (indices if indices is not None else dataset.test_indices):
        scene, grid = dataset.scene(idx)
        entities, predicates = model.predict(
            grid, tau=tau, frequency=manifest.frequency if tau > 0 else None, mode=mode)
        adj = adjacency(entities, predicates)
        trips = assemble(adj, entities, predicates, eval_cfg.topk_pairs)
        graph = postprocess(trips, eval_cfg.topk_final)
        hits_all.append(match_triplets(graph, scene, eval_cfg.iou_thresh,
                                       eval_cfg.graph_constrained))
        dumps.append(graph_record(idx, graph))
    report = compute_metrics(hits_all, manifest, eval_cfg.k_list)
    return report, dumps
