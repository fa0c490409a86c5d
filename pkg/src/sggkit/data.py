"""Synthetic long-tail scene corpus.

Scenes hold class-labelled boxes plus (subject, predicate, object)
triplets whose predicate labels follow a Zipf law.  Rendering paints each
entity's class embedding into its box cells and each triplet's predicate
cue into the union box, so both entity identity and relations are
recoverable from the grid.  Splits carve out a zero-shot holdout of
triplet class combos that is scrubbed from training by regeneration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .backbone import FeatureGrid
from .boxes import iou, union_box
from .distill import ClassEmbeddingTable, make_class_table
from .errors import ConfigError, DataError
from .params import named_rng

log = logging.getLogger(__name__)

SCENE_MAGIC = b"BSCN"
SCENE_VERSION = 1


@dataclass
class SceneRecord:
    entities: list          # [(class_idx, (cx, cy, w, h))]
    triplets: list          # [(subject_idx, predicate_idx, object_idx)]
    seed: int

    def __post_init__(self):
        n = len(self.entities)
        for s, p, o in self.triplets:
            if s == o:
                raise DataError("self-triplet in scene record")
            if not (0 <= s < n and 0 <= o < n):
                raise DataError("triplet endpoint out of range")

    def combos(self):
        """Class-level (subject, predicate, object) combos present."""
        out = set()
        for s, p, o in self.triplets:
            out.add((self.entities[s][0], p, self.entities[o][0]))
        return out


def derive_seed(master_seed: int, *parts) -> int:
    text = ":".join([str(master_seed)] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def zipf_weights(n_classes: int, exponent: float) -> np.ndarray:
    w = (np.arange(1, n_classes + 1, dtype=np.float64)) ** (-exponent)
    return w / w.sum()


def _sample_box(rng, wh_lo, wh_hi):
    w = rng.uniform(wh_lo, wh_hi)
    h = rng.uniform(wh_lo, wh_hi)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return (cx, cy, w, h)


def gen_scene(cfg, seed: int) -> SceneRecord:
    """One scene from a config and an integer seed, fully deterministic."""
    rng = named_rng(seed, "scene")
    ent_lo, ent_hi = cfg.entities_per_scene
    tri_lo, tri_hi = cfg.triplets_per_scene
    n_ent = int(rng.integers(ent_lo, ent_hi + 1))

    classes = rng.integers(0, cfg.entity_classes, size=n_ent)
    boxes = []
    for _ in range(n_ent):
        placed = None
        for _attempt in range(cfg.box_retries):
            cand = _sample_box(rng, cfg.box_wh[0], cfg.box_wh[1])
            if all(iou(cand, b) <= cfg.max_pair_iou for b in boxes):
                placed = cand
                break
        if placed is None:
            log.warning("scene %d: box overlap constraint relaxed after %d retries",
                        seed, cfg.box_retries)
            placed = _sample_box(rng, cfg.box_wh[0], cfg.box_wh[1])
        boxes.append(placed)
    entities = [(int(c), b) for c, b in zip(classes, boxes)]

    triplets = []
    n_tri = int(rng.integers(tri_lo, tri_hi + 1)) if n_ent >= 2 else 0
    weights = zipf_weights(cfg.predicate_classes, cfg.zipf_s)
    seen = set()
    for _ in range(n_tri):
        for _attempt in range(20):
            p = int(rng.choice(cfg.predicate_classes, p=weights))
            subj = obj = None
            if rng.random() < cfg.compat_prob:
                s_cls = p % cfg.entity_classes
                o_cls = (p + 1) % cfg.entity_classes
                subj_pool = [i for i, (c, _) in enumerate(entities) if c == s_cls]
                obj_pool = [i for i, (c, _) in enumerate(entities) if c == o_cls]
                if subj_pool and obj_pool:
                    subj = int(rng.choice(subj_pool))
                    obj_pool = [i for i in obj_pool if i != subj]
                    if obj_pool:
                        obj = int(rng.choice(obj_pool))
                    else:
                        subj = None
            if subj is None:
                subj = int(rng.integers(n_ent))
                obj = int(rng.integers(n_ent - 1))
                if obj >= subj:
                    obj += 1
            if (subj, p, obj) not in seen:
                seen.add((subj, p, obj))
                triplets.append((subj, p, obj))
                break
    return SceneRecord(entities=entities, triplets=triplets, seed=seed)


def _cells_in_box(box, grid_w: int, grid_h: int):
    cx, cy, w, h = box
    xs = (np.arange(grid_w) + 0.5) / grid_w
    ys = (np.arange(grid_h) + 0.5) / grid_h
    in_x = np.abs(xs - cx) <= w / 2
    in_y = np.abs(ys - cy) <= h / 2
    rows, cols = np.nonzero(np.outer(in_y, in_x))
    if rows.size == 0:
        rows = np.array([min(grid_h - 1, max(0, int(cy * grid_h)))])
        cols = np.array([min(grid_w - 1, max(0, int(cx * grid_w)))])
    return rows, cols


def render_features(scene: SceneRecord, entity_embed: np.ndarray, cue_embed: np.ndarray,
                    cfg) -> FeatureGrid:
    """Paint entity embeddings into boxes and predicate cues into union boxes."""
    gw, gh, c_in = cfg.grid_width, cfg.grid_height, cfg.grid_channels
    values = np.zeros((gh, gw, c_in), dtype=np.float32)
    noise_rng = named_rng(scene.seed, "render")
    for cls, box in scene.entities:
        vec = entity_embed[cls].astype(np.float32)
        if cfg.noise_sigma > 0:
            vec = vec + cfg.noise_sigma * noise_rng.standard_normal(c_in).astype(np.float32)
        rows, cols = _cells_in_box(box, gw, gh)
        values[rows, cols] += vec
    for s, p, o in scene.triplets:
        ub = union_box(np.array(scene.entities[s][1]), np.array(scene.entities[o][1]))
        rows, cols = _cells_in_box(ub, gw, gh)
        values[rows, cols] += cue_embed[p].astype(np.float32)
    return FeatureGrid(width=gw, height=gh, channels=c_in, values=values)


def schema_tables(cfg):
    """Frozen embedding tables derived from the schema and embedding seed.

    Returns (class_table, cue_matrix): the class table anchors classifiers
    and paints entities; the separate cue matrix paints relations.
    """
    ent_labels = entity_labels(cfg.entity_classes)
    pred_labels = predicate_labels(cfg.predicate_classes)
    table = make_class_table(ent_labels + pred_labels, cfg.grid_channels,
                             cfg.embedding_seed, "cls")
    cue = make_class_table(pred_labels, cfg.grid_channels, cfg.embedding_seed, "cue")
    cue_mat = cue.matrix(pred_labels)
    return table, cue_mat


def entity_labels(n: int):
    return [f"entity_{i:02d}" for i in range(n)]


def predicate_labels(n: int):
    return [f"predicate_{i:02d}" for i in range(n)]


@dataclass
class DatasetManifest:
    entity_classes: int
    predicate_classes: int
    train_count: int
    test_count: int
    frequency: list                      # train triplet count per predicate class
    holdout: list                        # [(s_cls, p_cls, o_cls)] zero-shot combos
    zr_defined: bool
    groups: dict                         # {"head": [...], "body": [...], "tail": [...]}
    master_seed: int
    generator: dict                      # full data config
    version: int = 1

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "entity_classes": self.entity_classes,
            "predicate_classes": self.predicate_classes,
            "train_count": self.train_count,
            "test_count": self.test_count,
            "frequency": self.frequency,
            "holdout": [list(c) for c in self.holdout],
            "zr_defined": self.zr_defined,
            "groups": self.groups,
            "master_seed": self.master_seed,
            "generator": self.generator,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("version") != 1:
            raise DataError(f"unsupported manifest version {d.get('version')}")
        return DatasetManifest(
            entity_classes=d["entity_classes"], predicate_classes=d["predicate_classes"],
            train_count=d["train_count"], test_count=d["test_count"],
            frequency=d["frequency"], holdout=[tuple(c) for c in d["holdout"]],
            zr_defined=d["zr_defined"], groups=d["groups"],
            master_seed=d["master_seed"], generator=d["generator"])


def predicate_groups(frequency, n_classes: int) -> dict:
    """Head/body/tail split of predicate classes at rank terciles."""
    order = sorted(range(n_classes), key=lambda k: (-frequency[k], k))
    c1 = math.ceil(n_classes / 3)
    c2 = math.ceil(2 * n_classes / 3)
    return {"head": sorted(order[:c1]), "body": sorted(order[c1:c2]),
            "tail": sorted(order[c2:])}


def make_splits(cfg, master_seed: int):
    """Generate train/test scenes with a zero-shot holdout scrubbed from train.

    Returns (manifest, train_scenes, test_scenes).
    """
    if not 0.0 <= cfg.holdout_fraction <= 0.3:
        raise ConfigError(f"holdout fraction must be in [0, 0.3], got {cfg.holdout_fraction}")
    train = [gen_scene(cfg, derive_seed(master_seed, i, 0)) for i in range(cfg.train_scenes)]
    test = [gen_scene(cfg, derive_seed(master_seed, cfg.train_scenes + i, 0))
            for i in range(cfg.test_scenes)]

    test_combos = sorted(set().union(*[s.combos() for s in test]) if test else set())
    n_holdout = int(round(cfg.holdout_fraction * len(test_combos)))
    holdout = []
    if n_holdout > 0:
        rng = named_rng(master_seed, "holdout")
        idx = rng.choice(len(test_combos), size=n_holdout, replace=False)
        holdout = sorted(test_combos[i] for i in idx)
    holdout_set = set(holdout)

    for i, scene in enumerate(train):
        attempt = 0
        while scene.combos() & holdout_set:
            attempt += 1
            if attempt > 200:
                raise ConfigError(f"cannot scrub holdout combos from train scene {i}")
            scene = gen_scene(cfg, derive_seed(master_seed, i, attempt))
        train[i] = scene

    frequency = [0] * cfg.predicate_classes
    for scene in train:
        for _, p, _ in scene.triplets:
            frequency[p] += 1
    starved = {p for p in range(cfg.predicate_classes) if frequency[p] == 0}
    holdout_preds = {p for _, p, _ in holdout}
    if starved & holdout_preds:
        raise ConfigError(
            f"holdout removed every training instance of predicates {sorted(starved)}")

    manifest = DatasetManifest(
        entity_classes=cfg.entity_classes,
        predicate_classes=cfg.predicate_classes,
        train_count=len(train), test_count=len(test),
        frequency=frequency, holdout=holdout, zr_defined=bool(holdout),
        groups=predicate_groups(frequency, cfg.predicate_classes),
        master_seed=master_seed, generator=cfg.to_dict())
    return manifest, train, test


# -- on-disk format ---------------------------------------------------------

def write_scene_file(path, scene: SceneRecord, grid: FeatureGrid) -> None:
    record = {
        "entities": [[c, list(b)] for c, b in scene.entities],
        "triplets": [list(t) for t in scene.triplets],
        "seed": scene.seed,
    }
    blob = json.dumps(record, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<IIII", SCENE_VERSION, grid.width, grid.height, grid.channels))
        f.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def read_scene_file(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SCENE_MAGIC:
        raise DataError(f"{path}: bad scene magic")
    version, w, h, c = struct.unpack_from("<IIII", raw, 4)
    if version != SCENE_VERSION:
        raise DataError(f"{path}: unsupported scene version {version}")
    off = 4 + 16
    n_vals = w * h * c
    end = off + 4 * n_vals
    if len(raw) < end + 4:
        raise DataError(f"{path}: truncated scene file")
    values = np.frombuffer(raw[off:end], dtype="<f4").reshape(h, w, c).copy()
    (blob_len,) = struct.unpack_from("<I", raw, end)
    blob = raw[end + 4:end + 4 + blob_len]
    if len(blob) != blob_len:
        raise DataError(f"{path}: truncated scene record")
    rec = json.loads(blob.decode("utf-8"))
    scene = SceneRecord(
        entities=[(int(c_), tuple(b)) for c_, b in rec["entities"]],
        triplets=[tuple(t) for t in rec["triplets"]],
        seed=rec["seed"])
    grid = FeatureGrid(width=w, height=h, channels=c, values=values)
    return scene, grid


def write_dataset(out_dir, cfg, master_seed: int) -> DatasetManifest:
    from pathlib import Path
    out = Path(out_dir)
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    manifest, train, test = make_splits(cfg, master_seed)
    table, cue_mat = schema_tables(cfg)
    ent_mat = table.matrix(entity_labels(cfg.entity_classes))
    for i, scene in enumerate(train + test):
        grid = render_features(scene, ent_mat, cue_mat, cfg)
        write_scene_file(scenes_dir / f"{i:06d}.bin", scene, grid)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


class Dataset:
    """Lazy reader over a generated dataset directory."""

    def __init__(self, root):
        from pathlib import Path
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise DataError(f"{self.root}: manifest.json not found")
        self.manifest = DatasetManifest.from_json(mpath.read_text(encoding="utf-8"))

    @property
    def train_indices(self):
        return list(range(self.manifest.train_count))

    @property
    def test_indices(self):
        return list(range(self.manifest.train_count,
                          self.manifest.train_count + self.manifest.test_count))

    def scene(self, idx: int):
        return read_scene_file(self.root / "scenes" / f"{idx:06d}.bin")

    def holdout_set(self):
        return set(self.manifest.holdout)
