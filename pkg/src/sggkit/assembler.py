"""Bipartite graph assembly: entity/predicate adjacency, top-K triplet
extraction and inference post-processing.

Adjacency entry (j, i) scores how well entity i matches predicate j's
subject (or object) indicator: location term (GIoU+1)/2 times the dot
product of the class distributions with the no-object slot excluded.
Both factors live in [0, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .boxes import pairwise_giou
from .errors import UsageError

log = logging.getLogger(__name__)


@dataclass
class EntityPrediction:
    box: np.ndarray             # (4,) cx/cy/w/h in [0, 1]
    probs: np.ndarray           # entity classes + trailing no-object slot
    query_index: int

    def best_class(self):
        """(class, prob) over real classes, no-object excluded."""
        k = int(np.argmax(self.probs[:-1]))
        return k, float(self.probs[k])


@dataclass
class Indicator:
    box: np.ndarray
    probs: np.ndarray           # entity classes + no-object slot


@dataclass
class PredicatePrediction:
    probs: np.ndarray           # predicate classes + trailing no-relation slot
    box: np.ndarray
    subject: Indicator
    object: Indicator
    query_index: int

    def best_class(self):
        k = int(np.argmax(self.probs[:-1]))
        return k, float(self.probs[k])


@dataclass
class Triplet:
    subject: EntityPrediction
    object: EntityPrediction
    predicate_class: int
    predicate_prob: float
    subject_class: int
    subject_prob: float
    object_class: int
    object_prob: float
    predicate_box: np.ndarray
    belief: float
    match_subject: float
    match_object: float
    predicate_query_index: int


@dataclass
class AdjacencyMatrices:
    subject: np.ndarray         # (n_predicates, n_entities)
    object: np.ndarray


@dataclass
class SceneGraph:
    triplets: list = field(default_factory=list)


def adjacency(entities, predicates) -> AdjacencyMatrices:
    if not entities or not predicates:
        raise UsageError("adjacency needs non-empty entity and predicate lists")
    ent_boxes = np.stack([e.box for e in entities])
    ent_probs = np.stack([e.probs[:-1] for e in entities])
    out = {}
    for name, inds in (("subject", [p.subject for p in predicates]),
                       ("object", [p.object for p in predicates])):
        ind_boxes = np.stack([i.box for i in inds])
        ind_probs = np.stack([i.probs[:-1] for i in inds])
        d_loc = (pairwise_giou(ind_boxes, ent_boxes) + 1.0) / 2.0
        d_cls = ind_probs @ ent_probs.T
        out[name] = np.clip(d_loc * d_cls, 0.0, 1.0)
    return AdjacencyMatrices(subject=out["subject"], object=out["object"])


def assemble(adj: AdjacencyMatrices, entities, predicates, k: int) -> list:
    """Rank-aligned top-K pairing: exactly K triplets per predicate node.

    The r-th best subject is paired with the r-th best object; ties in the
    adjacency scores break toward the lower entity index.
    """
    if k < 1:
        raise UsageError(f"top-K must be >= 1, got {k}")
    n_ent = len(entities)
    if k > n_ent:
        log.warning("top-K %d exceeds entity count %d; clamping", k, n_ent)
        k = n_ent
    triplets = []
    for j, pred in enumerate(predicates):
        # stable argsort on negated scores: equal scores keep index order
        order_s = np.argsort(-adj.subject[j], kind="stable")
        order_o = np.argsort(-adj.object[j], kind="stable")
        p_cls, p_prob = pred.best_class()
        for r in range(k):
            si = int(order_s[r])
            oi = int(order_o[r])
            subj = entities[si]
            obj = entities[oi]
            s_cls, s_prob = subj.best_class()
            o_cls, o_prob = obj.best_class()
            triplets.append(Triplet(
                subject=subj, object=obj,
                predicate_class=p_cls, predicate_prob=p_prob,
                subject_class=s_cls, subject_prob=s_prob,
                object_class=o_cls, object_prob=o_prob,
                predicate_box=pred.box,
                belief=s_prob * o_prob * p_prob,
                match_subject=float(adj.subject[j, si]),
                match_object=float(adj.object[j, oi]),
                predicate_query_index=pred.query_index))
    return triplets


def postprocess(triplets, k_final: int) -> SceneGraph:
    """Drop self-connections, re-rank by belief score, keep the top K."""
    kept = [t for t in triplets
            if t.subject.query_index != t.object.query_index]
    kept.sort(key=lambda t: (-t.belief, t.predicate_query_index, t.subject.query_index))
    return SceneGraph(triplets=kept[:k_final])
