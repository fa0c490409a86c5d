"""Recall metrics over assembled scene graphs.

Matching is graph-constrained and greedy in rank order: a prediction hits
a ground-truth triplet when all three classes match and both endpoint
boxes clear the IoU threshold; each ground truth is consumed at most once
and each prediction consumes at most one ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import iou
from .errors import ConfigError, UsageError


@dataclass
class GtHit:
    predicate_class: int
    combo: tuple                # (subject class, predicate class, object class)
    rank: int | None            # 1-based rank of the first hit, None if missed


def match_triplets(graph, scene, iou_thresh: float = 0.5,
                   graph_constrained: bool = True) -> list:
    """Hit rank per ground-truth triplet of one scene."""
    preds = graph.triplets
    beliefs = [t.belief for t in preds]
    if any(beliefs[i] < beliefs[i + 1] for i in range(len(beliefs) - 1)):
        raise UsageError("predictions must be sorted by belief score")
    gts = []
    for s, p, o in scene.triplets:
        s_cls, s_box = scene.entities[s]
        o_cls, o_box = scene.entities[o]
        gts.append({"combo": (s_cls, p, o_cls), "s_box": s_box, "o_box": o_box,
                    "rank": None})
    for rank, t in enumerate(preds, start=1):
        for gt in gts:
            if gt["rank"] is not None:
                continue
            if (t.subject_class, t.predicate_class, t.object_class) != gt["combo"]:
                continue
            if iou(t.subject.box, gt["s_box"]) < iou_thresh:
                continue
            if iou(t.object.box, gt["o_box"]) < iou_thresh:
                continue
            gt["rank"] = rank
            if graph_constrained:
                break  # this prediction is consumed
    return [GtHit(predicate_class=g["combo"][1], combo=g["combo"], rank=g["rank"])
            for g in gts]


@dataclass
class MetricReport:
    k_list: list
    iou_thresh: float
    recall: dict                 # K -> R@K (or None when undefined)
    mean_recall: dict            # K -> mR@K
    zero_shot_recall: dict       # K -> zR@K; None when undefined
    group_recall: dict           # group -> recall at the group cutoff
    group_k: int
    total_gt: int
    per_class_gt: list
    zr_defined: bool

    def to_dict(self):
        return {
            "k_list": list(self.k_list),
            "iou_thresh": self.iou_thresh,
            "recall": {str(k): v for k, v in self.recall.items()},
            "mean_recall": {str(k): v for k, v in self.mean_recall.items()},
            "zero_shot_recall": {str(k): v for k, v in self.zero_shot_recall.items()},
            "group_recall": self.group_recall,
            "group_k": self.group_k,
            "total_gt": self.total_gt,
            "per_class_gt": self.per_class_gt,
            "zr_defined": self.zr_defined,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        def fmt(v):
            return "  undef" if v is None else f"{v:7.4f}"
        lines = ["metric      " + "".join(f"  @{k:<5d}" for k in self.k_list)]
        lines.append("R         " + "".join(fmt(self.recall[k]) for k in self.k_list))
        lines.append("mR        " + "".join(fmt(self.mean_recall[k]) for k in self.k_list))
        lines.append("zR        " + "".join(fmt(self.zero_shot_recall[k]) for k in self.k_list))
        lines.append(f"groups @{self.group_k}: "
                     + "  ".join(f"{g}={fmt(self.group_recall[g]).strip()}"
                                 for g in ("head", "body", "tail")))
        lines.append(f"total_gt: {self.total_gt}")
        return "\n".join(lines) + "\n"


def compute_metrics(hits_per_image, manifest, k_list) -> MetricReport:
    """Aggregate hit ranks into R@K, mR@K, zR@K and group recalls."""
    k_list = sorted(k_list)
    n_classes = manifest.predicate_classes
    holdout = set(tuple(c) for c in manifest.holdout)
    group_k = 100 if 100 in k_list else max(k_list)

    all_hits = [h for img in hits_per_image for h in img]
    total_gt = len(all_hits)
    per_class_gt = [0] * n_classes
    for h in all_hits:
        per_class_gt[h.predicate_class] += 1

    def recall_at(k, subset):
        if not subset:
            return None
        got = sum(1 for h in subset if h.rank is not None and h.rank <= k)
        return got / len(subset)

    recall = {k: recall_at(k, all_hits) for k in k_list}
    mean_recall = {}
    per_class = {c: [h for h in all_hits if h.predicate_class == c]
                 for c in range(n_classes)}
    present = [c for c in range(n_classes) if per_class[c]]
    for k in k_list:
        vals = [recall_at(k, per_class[c]) for c in present]
        mean_recall[k] = float(np.mean(vals)) if vals else None

    zr_hits = [h for h in all_hits if h.combo in holdout]
    zr_defined = manifest.zr_defined and bool(zr_hits)
    zero_shot = {k: (recall_at(k, zr_hits) if zr_defined else None) for k in k_list}

    group_recall = {}
    for gname, classes in manifest.groups.items():
        vals = [recall_at(group_k, per_class[c]) for c in classes if per_class[c]]
        group_recall[gname] = float(np.mean(vals)) if vals else None

    return MetricReport(k_list=k_list, iou_thresh=0.5, recall=recall,
                        mean_recall=mean_recall, zero_shot_recall=zero_shot,
                        group_recall=group_recall, group_k=group_k,
                        total_gt=total_gt, per_class_gt=per_class_gt,
                        zr_defined=zr_defined)


def logit_adjust(logits: np.ndarray, frequency, tau: float) -> np.ndarray:
    """Subtract tau * log class prior from predicate logits.

    The trailing no-relation logit is left unadjusted.  Frequencies must be
    positive; callers smooth raw counts (+1) before passing them in.
    """
    if tau < 0:
        raise ConfigError(f"logit adjustment tau must be >= 0, got {tau}")
    freq = np.asarray(frequency, dtype=np.float64)
    if (freq <= 0).any():
        raise ConfigError("logit_adjust requires positive frequencies")
    logits = np.asarray(logits, dtype=np.float64)
    n_classes = freq.shape[0]
    if logits.shape[1] != n_classes + 1:
        raise ConfigError(f"expected {n_classes}+1 logit columns, got {logits.shape[1]}")
    out = logits.copy()
    out[:, :n_classes] -= tau * np.log(freq / freq.sum())
    return out
