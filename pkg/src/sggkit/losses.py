"""Hungarian-matched set losses for entity and predicate predictions.

Cost matrices are computed on detached numpy values; the losses themselves
are differentiable graph nodes.  Matching cost uses negative class
probability, the losses use cross-entropy, both with L1 + (1-GIoU) box
terms.  Unmatched queries are supervised toward the no-object/no-relation
class with a 0.1 down-weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor2
from .boxes import giou_tensor, l1_tensor, pairwise_giou, pairwise_l1, union_box
from .errors import NumericalError
from .matching import AssignmentResult, hungarian


@dataclass
class LossReport:
    l_ent: float
    l_pre_i: float
    l_pre_p: float
    l_mimic: float
    total: float

    def as_dict(self):
        return {"l_ent": self.l_ent, "l_pre_i": self.l_pre_i,
                "l_pre_p": self.l_pre_p, "l_mimic": self.l_mimic, "total": self.total}


@dataclass
class GtTriplets:
    """Ground-truth relationships rendered into prediction form."""
    sub_classes: np.ndarray
    sub_boxes: np.ndarray
    obj_classes: np.ndarray
    obj_boxes: np.ndarray
    pred_classes: np.ndarray
    pred_boxes: np.ndarray      # union of subject and object boxes

    @property
    def count(self) -> int:
        return len(self.pred_classes)


def render_gt_triplets(scene) -> GtTriplets:
    subs, sboxes, objs, oboxes, preds, pboxes = [], [], [], [], [], []
    for s, p, o in scene.triplets:
        s_cls, s_box = scene.entities[s]
        o_cls, o_box = scene.entities[o]
        subs.append(s_cls)
        sboxes.append(s_box)
        objs.append(o_cls)
        oboxes.append(o_box)
        preds.append(p)
        pboxes.append(union_box(np.asarray(s_box), np.asarray(o_box)))
    n = len(preds)
    return GtTriplets(
        sub_classes=np.asarray(subs, dtype=np.intp),
        sub_boxes=np.asarray(sboxes, dtype=np.float64).reshape(n, 4),
        obj_classes=np.asarray(objs, dtype=np.intp),
        obj_boxes=np.asarray(oboxes, dtype=np.float64).reshape(n, 4),
        pred_classes=np.asarray(preds, dtype=np.intp),
        pred_boxes=np.asarray(pboxes, dtype=np.float64).reshape(n, 4))


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def weighted_ce(logits: Tensor2, targets: np.ndarray, noobj_class: int,
                noobj_weight: float) -> Tensor2:
    """Cross-entropy with the background class down-weighted.

    Normalized by the sum of per-row weights (so background-only batches
    stay on a comparable scale).
    """
    targets = np.asarray(targets, dtype=np.intp)
    logp = ad.log_softmax_rows(logits)
    picked = ad.select_entries(logp, np.arange(len(targets)), targets)
    weights = np.where(targets == noobj_class, noobj_weight, 1.0).astype(logits.dtype)
    w_col = ad.constant(weights.reshape(-1, 1))
    return ad.scale(ad.sum_all(picked * w_col), -1.0 / float(weights.sum()))


def _matched_box_terms(boxes: Tensor2, pred_idx, gt_boxes: np.ndarray, w):
    """w_l1 * L1 + w_giou * (1 - GIoU), averaged over matched pairs."""
    picked = ad.gather_rows(boxes, pred_idx)
    target = ad.constant(np.asarray(gt_boxes, dtype=boxes.dtype))
    n = len(pred_idx)
    l1 = ad.scale(ad.sum_all(l1_tensor(picked, target)), w.w_l1 / n)
    gi = ad.scale(ad.sum_all(1.0 - giou_tensor(picked, target)), w.w_giou / n)
    return l1 + gi


def _check_finite(*tensors):
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NumericalError("non-finite predictions reached the loss")


def entity_loss(logits: Tensor2, boxes: Tensor2, gt_classes, gt_boxes, w) -> Tensor2:
    """DETR-style detection loss for the entity branch."""
    _check_finite(logits, boxes)
    n_pred = logits.rows
    noobj = logits.cols - 1
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    targets = np.full(n_pred, noobj, dtype=np.intp)
    if len(gt_classes) == 0:
        return ad.scale(weighted_ce(logits, targets, noobj, w.noobj_weight), w.w_cls)

    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    probs = _softmax_np(np.asarray(logits.data, dtype=np.float64))
    cost = (w.w_cls * -probs[:, gt_classes]
            + w.w_l1 * pairwise_l1(boxes.data, gt_boxes)
            + w.w_giou * (1.0 - pairwise_giou(boxes.data, gt_boxes)))
    assignment = hungarian(cost)
    pred_idx = np.array([p for p, _ in assignment.pairs], dtype=np.intp)
    gt_idx = np.array([g for _, g in assignment.pairs], dtype=np.intp)
    targets[pred_idx] = gt_classes[gt_idx]
    ce = ad.scale(weighted_ce(logits, targets, noobj, w.noobj_weight), w.w_cls)
    return ce + _matched_box_terms(boxes, pred_idx, gt_boxes[gt_idx], w)


def predicate_cost_matrix(pred_probs, pred_boxes, sub_probs, sub_boxes,
                          obj_probs, obj_boxes, gt: GtTriplets, w) -> np.ndarray:
    """(n_pred_queries, n_gt) matching cost: lambda_p * C_p + lambda_e * C_e."""
    c_p = w.w_cls * -pred_probs[:, gt.pred_classes]
    if w.pred_box_in_cost:
        c_p = c_p + (w.w_l1 * pairwise_l1(pred_boxes, gt.pred_boxes)
                     + w.w_giou * (1.0 - pairwise_giou(pred_boxes, gt.pred_boxes)))
    c_e = (w.w_cls * -sub_probs[:, gt.sub_classes]
           + w.w_l1 * pairwise_l1(sub_boxes, gt.sub_boxes)
           + w.w_giou * (1.0 - pairwise_giou(sub_boxes, gt.sub_boxes))
           + w.w_cls * -obj_probs[:, gt.obj_classes]
           + w.w_l1 * pairwise_l1(obj_boxes, gt.obj_boxes)
           + w.w_giou * (1.0 - pairwise_giou(obj_boxes, gt.obj_boxes)))
    return w.lambda_p * c_p + w.lambda_e * c_e


def triplet_cost(pred_probs, pred_box, sub_probs, sub_box, obj_probs, obj_box,
                 gt: GtTriplets, gt_index: int, w) -> float:
    """Matching cost of one predicate query against one rendered gt triplet."""
    one = GtTriplets(
        sub_classes=gt.sub_classes[gt_index:gt_index + 1],
        sub_boxes=gt.sub_boxes[gt_index:gt_index + 1],
        obj_classes=gt.obj_classes[gt_index:gt_index + 1],
        obj_boxes=gt.obj_boxes[gt_index:gt_index + 1],
        pred_classes=gt.pred_classes[gt_index:gt_index + 1],
        pred_boxes=gt.pred_boxes[gt_index:gt_index + 1])
    m = predicate_cost_matrix(pred_probs.reshape(1, -1), np.asarray(pred_box).reshape(1, 4),
                              sub_probs.reshape(1, -1), np.asarray(sub_box).reshape(1, 4),
                              obj_probs.reshape(1, -1), np.asarray(obj_box).reshape(1, 4),
                              one, w)
    return float(m[0, 0])


def predicate_loss(pred_logits: Tensor2, pred_boxes: Tensor2,
                   sub_logits: Tensor2, sub_boxes: Tensor2,
                   obj_logits: Tensor2, obj_boxes: Tensor2,
                   gt: GtTriplets, w):
    """(indicator loss, predicate loss, assignment) for the predicate branch."""
    _check_finite(pred_logits, pred_boxes, sub_logits, sub_boxes, obj_logits, obj_boxes)
    n_pred = pred_logits.rows
    norel = pred_logits.cols - 1
    noobj = sub_logits.cols - 1
    targets = np.full(n_pred, norel, dtype=np.intp)
    if gt.count == 0:
        l_pre_p = ad.scale(weighted_ce(pred_logits, targets, norel, w.noobj_weight), w.w_cls)
        zero = ad.constant(np.zeros((1, 1), dtype=pred_logits.dtype))
        return zero, l_pre_p, AssignmentResult(pairs=[], total_cost=0.0)

    f64 = np.float64
    cost = predicate_cost_matrix(
        _softmax_np(np.asarray(pred_logits.data, dtype=f64)), pred_boxes.data,
        _softmax_np(np.asarray(sub_logits.data, dtype=f64)), sub_boxes.data,
        _softmax_np(np.asarray(obj_logits.data, dtype=f64)), obj_boxes.data,
        gt, w)
    assignment = hungarian(cost)
    pred_idx = np.array([p for p, _ in assignment.pairs], dtype=np.intp)
    gt_idx = np.array([g for _, g in assignment.pairs], dtype=np.intp)

    targets[pred_idx] = gt.pred_classes[gt_idx]
    l_pre_p = ad.scale(weighted_ce(pred_logits, targets, norel, w.noobj_weight), w.w_cls)
    l_pre_p = l_pre_p + _matched_box_terms(pred_boxes, pred_idx, gt.pred_boxes[gt_idx], w)

    # indicator terms are defined on matched pairs only
    n_match = len(pred_idx)
    l_pre_i = None
    for logits, boxes, cls, bx in (
            (sub_logits, sub_boxes, gt.sub_classes[gt_idx], gt.sub_boxes[gt_idx]),
            (obj_logits, obj_boxes, gt.obj_classes[gt_idx], gt.obj_boxes[gt_idx])):
        logp = ad.log_softmax_rows(logits)
        picked = ad.select_entries(logp, pred_idx, cls)
        ce = ad.scale(ad.sum_all(picked), -w.w_cls / n_match)
        term = ce + _matched_box_terms(boxes, pred_idx, bx, w)
        l_pre_i = term if l_pre_i is None else l_pre_i + term
    return l_pre_i, l_pre_p, assignment


def total_loss(l_ent: Tensor2, l_pre_i: Tensor2, l_pre_p: Tensor2,
               l_mimic, mimic_weight: float, entity_weight: float = 1.0):
    """Weighted multi-task objective; returns (graph node, LossReport)."""
    total = ad.scale(l_ent, entity_weight) + l_pre_i + l_pre_p
    mimic_val = 0.0
    if l_mimic is not None and mimic_weight > 0:
        total = total + ad.scale(l_mimic, mimic_weight)
        mimic_val = l_mimic.item()
    report = LossReport(l_ent=l_ent.item(), l_pre_i=l_pre_i.item(),
                        l_pre_p=l_pre_p.item(), l_mimic=mimic_val,
                        total=total.item())
    if not np.isfinite(report.total):
        raise NumericalError(f"non-finite loss: {report.as_dict()}")
    return total, report
