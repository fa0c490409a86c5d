"""Finite-difference gradient checking harness.

Runs in float64.  The forward closure must rebuild the graph from the
store's current values on every call (store.begin_step() is issued here).
Checks a directional derivative over all learnable parameters plus a
sample of individual coordinates with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore, grad, named_rng


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


SIGNIFICANT = 1e-5   # gradients below this are compared absolutely


def _rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b), 1e-6)
    return abs(a - b) / denom


def _compare(result: GradCheckResult, label, idx, fd: float, an: float,
             rtol: float) -> None:
    result.n_checked += 1
    if max(abs(fd), abs(an)) > SIGNIFICANT:
        err = _rel_err(fd, an)
        result.max_rel_err = max(result.max_rel_err, err)
        if err > rtol:
            result.failures.append((label, idx, fd, an, err))
    elif abs(fd - an) > 1e-8:
        result.failures.append((label, idx, fd, an, abs(fd - an)))


def check_gradients(store: ParamStore, forward_fn, rng: np.random.Generator,
                    name: str = "block", n_coords: int = 24, step: float = 1e-5,
                    rtol: float = 1e-4) -> GradCheckResult:
    if store.dtype != np.float64:
        raise ValueError("gradient checking requires a float64 store")

    def evaluate() -> float:
        store.begin_step()
        return forward_fn().item()

    store.begin_step()
    loss = forward_fn()
    analytic = grad(loss, store)

    learnable = [n for n, p in store.items() if p.learnable]
    result = GradCheckResult(name=name, max_rel_err=0.0, n_checked=0)

    # directional derivative across all learnable parameters at once
    direction = {n: rng.standard_normal(store.value(n).shape) for n in learnable}
    norm = np.sqrt(sum(float((d * d).sum()) for d in direction.values()))
    dot = 0.0
    for n in learnable:
        direction[n] /= max(norm, 1e-12)
        g = analytic.get(n)
        if g is not None:
            dot += float((g * direction[n]).sum())
    saved = {n: store.value(n).copy() for n in learnable}
    for n in learnable:
        store.set_value(n, saved[n] + step * direction[n])
    f_plus = evaluate()
    for n in learnable:
        store.set_value(n, saved[n] - step * direction[n])
    f_minus = evaluate()
    for n in learnable:
        store.set_value(n, saved[n])
    fd_dir = (f_plus - f_minus) / (2 * step)
    _compare(result, "<direction>", 0, fd_dir, dot, rtol)

    # individual coordinates, sampled proportionally to tensor size
    sizes = np.array([store.value(n).size for n in learnable], dtype=np.float64)
    probs = sizes / sizes.sum()
    for _ in range(n_coords):
        n = learnable[int(rng.choice(len(learnable), p=probs))]
        arr = store.value(n)
        flat = int(rng.integers(arr.size))
        i, j = np.unravel_index(flat, arr.shape)
        orig = arr[i, j]
        mod = arr.copy()
        mod[i, j] = orig + step
        store.set_value(n, mod)
        f_plus = evaluate()
        mod[i, j] = orig - step
        store.set_value(n, mod)
        f_minus = evaluate()
        mod[i, j] = orig
        store.set_value(n, mod)
        fd = (f_plus - f_minus) / (2 * step)
        an = float(analytic[n][i, j]) if n in analytic else 0.0
        _compare(result, n, flat, fd, an, rtol)
    return result


# -- finite-difference suite over the composite blocks used downstream -------

def _readout(t, r):
    from . import autodiff as ad
    return ad.sum_all(t * ad.constant(r.astype(np.float64)))


def _case_attention_block(seed):
    from . import autodiff as ad
    from .blocks import AttentionBlock
    rng = named_rng(seed, "gc.attn")
    store = ParamStore(dtype=np.float64)
    block = AttentionBlock(store, "blk", 16, 2, 24, rng)
    q = ad.constant(rng.standard_normal((5, 16)))
    kv = ad.constant(rng.standard_normal((7, 16)))
    r = rng.standard_normal((5, 16))

    def forward():
        return _readout(block(q, kv, kv), r)

    return store, forward


def _case_decoder_layer(seed):
    from . import autodiff as ad
    from .blocks import DecoderLayer
    rng = named_rng(seed, "gc.dec")
    store = ParamStore(dtype=np.float64)
    layer = DecoderLayer(store, "dec", 16, 2, 24, rng)
    x = ad.constant(rng.standard_normal((4, 16)))
    mem = ad.constant(rng.standard_normal((9, 16)))
    r = rng.standard_normal((4, 16))

    def forward():
        return _readout(layer(x, mem), r)

    return store, forward


def _case_bcg_stage(seed):
    from . import autodiff as ad
    from .conditioning import ConditioningGenerator
    rng = named_rng(seed, "gc.bcg")
    store = ParamStore(dtype=np.float64)
    gen = ConditioningGenerator(store, "bcg", width=16, heads=2, ffn_hidden=24,
                                n_pred_queries=5, stages=1, mode="biatt", rng=rng)
    tokens = ad.constant(rng.standard_normal((9, 16)))
    v_ent = ad.constant(rng.standard_normal((4, 16)))
    r_ent = rng.standard_normal((4, 16))
    r_pred = rng.standard_normal((5, 16))

    def forward():
        q_ent, comp = gen.run(tokens, v_ent)
        return _readout(q_ent, r_ent) + _readout(comp.pred, r_pred)

    return store, forward


def _toy_loss_cfg():
    from .config import LossConfig
    return LossConfig()


def _toy_scene(rng, n_ent=3, n_tri=2, ent_classes=5, pred_classes=4):
    ents = []
    for _ in range(n_ent):
        w, h = rng.uniform(0.15, 0.4, size=2)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        ents.append((int(rng.integers(ent_classes)), (cx, cy, w, h)))
    tris = []
    for _ in range(n_tri):
        s = int(rng.integers(n_ent))
        o = int(rng.integers(n_ent - 1))
        if o >= s:
            o += 1
        tris.append((s, int(rng.integers(pred_classes)), o))
    return ents, tris


def _case_entity_loss(seed):
    from . import autodiff as ad
    from .losses import entity_loss
    rng = named_rng(seed, "gc.entloss")
    store = ParamStore(dtype=np.float64)
    store.add("logits", rng.standard_normal((6, 6)))
    store.add("rawbox", rng.standard_normal((6, 4)))
    ents, _ = _toy_scene(rng)
    w = _toy_loss_cfg()

    def forward():
        return entity_loss(store.leaf("logits"), ad.sigmoid(store.leaf("rawbox")),
                           [c for c, _ in ents], [b for _, b in ents], w)

    return store, forward


def _case_predicate_loss(seed):
    from . import autodiff as ad
    from .losses import GtTriplets, predicate_loss, render_gt_triplets
    rng = named_rng(seed, "gc.predloss")
    store = ParamStore(dtype=np.float64)
    store.add("p_logits", rng.standard_normal((5, 5)))
    store.add("p_rawbox", rng.standard_normal((5, 4)))
    store.add("s_logits", rng.standard_normal((5, 6)))
    store.add("s_rawbox", rng.standard_normal((5, 4)))
    store.add("o_logits", rng.standard_normal((5, 6)))
    store.add("o_rawbox", rng.standard_normal((5, 4)))
    ents, tris = _toy_scene(rng)

    class _Scene:
        entities = ents
        triplets = tris

    gt = render_gt_triplets(_Scene)
    w = _toy_loss_cfg()

    def forward():
        l_i, l_p, _ = predicate_loss(
            store.leaf("p_logits"), ad.sigmoid(store.leaf("p_rawbox")),
            store.leaf("s_logits"), ad.sigmoid(store.leaf("s_rawbox")),
            store.leaf("o_logits"), ad.sigmoid(store.leaf("o_rawbox")), gt, w)
        return l_i + l_p

    return store, forward


def _case_mimic_loss(seed):
    from .distill import TeacherEmbedding, mimic_loss
    rng = named_rng(seed, "gc.mimic")
    store = ParamStore(dtype=np.float64)
    store.add("q_pred", rng.standard_normal((5, 16)))
    store.add("q_ent", rng.standard_normal((4, 16)))
    t = rng.standard_normal(16)
    teacher = TeacherEmbedding(t / np.linalg.norm(t))

    def forward():
        # fresh rng stream per call so the mask draw is identical every time
        mask_rng = named_rng(seed, "gc.mimic.mask")
        return mimic_loss(store.leaf("q_pred"), store.leaf("q_ent"), teacher,
                          0.5, mask_rng)

    return store, forward


SUITE_CASES = {
    "attention_block": _case_attention_block,
    "decoder_layer": _case_decoder_layer,
    "bcg_stage": _case_bcg_stage,
    "entity_loss": _case_entity_loss,
    "predicate_loss": _case_predicate_loss,
    "mimic_loss": _case_mimic_loss,
}


def gradcheck_suite(seed: int = 0, instances: int = 20, n_coords: int = 6,
                    rtol: float = 1e-4, step: float = 1e-5):
    """Finite-difference checks over every composite block, many instances."""
    results = []
    for name, builder in SUITE_CASES.items():
        worst = GradCheckResult(name=name, max_rel_err=0.0, n_checked=0)
        for k in range(instances):
            store, forward = builder(seed * 1000 + k)
            rng = named_rng(seed, f"gc.pick.{name}.{k}")
            res = check_gradients(store, forward, rng, name=name,
                                  n_coords=n_coords, step=step, rtol=rtol)
            worst.max_rel_err = max(worst.max_rel_err, res.max_rel_err)
            worst.n_checked += res.n_checked
            worst.failures.extend(res.failures)
        results.append(worst)
    return results
