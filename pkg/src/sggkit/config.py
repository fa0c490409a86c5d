"""Run configuration: nested sections, JSON round-trip, strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class DataConfig:
    entity_classes: int = 10
    predicate_classes: int = 7
    train_scenes: int = 500
    test_scenes: int = 100
    zipf_s: float = 1.5
    entities_per_scene: tuple = (3, 6)
    triplets_per_scene: tuple = (1, 3)
    grid_width: int = 16
    grid_height: int = 16
    grid_channels: int = 64
    box_wh: tuple = (0.25, 0.5)
    max_pair_iou: float = 0.3
    box_retries: int = 100
    compat_prob: float = 0.8
    noise_sigma: float = 0.05
    holdout_fraction: float = 0.1
    embedding_seed: int = 7

    def validate(self):
        if self.entity_classes < 1 or self.predicate_classes < 1:
            raise ConfigError("class counts must be >= 1")
        if self.entities_per_scene[0] > self.entities_per_scene[1]:
            raise ConfigError("entities_per_scene range inverted")
        if self.triplets_per_scene[0] > self.triplets_per_scene[1]:
            raise ConfigError("triplets_per_scene range inverted")
        if not 0.0 <= self.holdout_fraction <= 0.3:
            raise ConfigError("holdout_fraction must be in [0, 0.3]")
        if self.zipf_s < 0:
            raise ConfigError("zipf_s must be >= 0")

    def to_dict(self):
        return _to_jsonable(self)


@dataclass
class ModelConfig:
    width: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    entity_queries: int = 20
    predicate_queries: int = 16
    entity_layers: int = 3
    stages: int = 2
    bcg_mode: str = "biatt"
    blend: float = 0.5
    mask_ratio: float = 0.5
    pos_scale: float = 0.25
    teacher_seed: int = 11
    init_seed: int = 5

    def validate(self):
        if self.width % self.heads != 0:
            raise ConfigError("width must be divisible by heads")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.bcg_mode not in ("biatt", "uniatt", "none"):
            raise ConfigError(f"unknown bcg_mode {self.bcg_mode!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if self.blend < 0:
            raise ConfigError("blend must be >= 0")
        if self.entity_queries < 1 or self.predicate_queries < 1:
            raise ConfigError("query counts must be >= 1")


@dataclass
class LossConfig:
    lambda_p: float = 1.0
    lambda_e: float = 1.0
    w_cls: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    noobj_weight: float = 0.1
    mimic_weight: float = 1.0
    pred_box_in_cost: bool = True

    def validate(self):
        for name in ("lambda_p", "lambda_e", "w_cls", "w_l1", "w_giou",
                     "noobj_weight", "mimic_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 16
    phase1_fraction: float = 0.5
    batch_size: int = 8
    lr: float = 1e-3
    classifier_lr_mult: float = 0.1
    clip_norm: float = 1.0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("bad epoch/batch settings")
        if not 0.0 < self.classifier_lr_mult <= 1.0:
            raise ConfigError("classifier_lr_mult must be in (0, 1]")
        if not 0.0 <= self.phase1_fraction <= 1.0:
            raise ConfigError("phase1_fraction must be in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @property
    def phase1_epochs(self) -> int:
        return int(round(self.epochs * self.phase1_fraction))


@dataclass
class EvalConfig:
    topk_pairs: int = 7
    topk_final: int = 100
    k_list: tuple = (10, 20, 50, 100)
    iou_thresh: float = 0.5
    logit_adjust_tau: float = 0.0
    graph_constrained: bool = True

    def validate(self):
        if self.topk_pairs < 1 or self.topk_final < 1:
            raise ConfigError("top-k settings must be >= 1")
        if self.logit_adjust_tau < 0:
            raise ConfigError("logit_adjust_tau must be >= 0")
        if self.topk_final < max(self.k_list):
            raise ConfigError("topk_final must cover the largest recall cutoff")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for section in (self.data, self.model, self.loss, self.train, self.eval):
            section.validate()
        return self

    def to_dict(self):
        return _to_jsonable(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


_TUPLE_FIELDS = {"entities_per_scene", "triplets_per_scene", "box_wh", "k_list"}
_SECTIONS = {"data": DataConfig, "model": ModelConfig, "loss": LossConfig,
             "train": TrainConfig, "eval": EvalConfig}


def _to_jsonable(obj):
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = _to_jsonable(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _section_from_dict(cls, d: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys under {path!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        kwargs[k] = tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
    return cls(**kwargs)


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"seed"} | set(_SECTIONS)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    cfg = RunConfig(seed=d.get("seed", 0))
    for name, cls in _SECTIONS.items():
        if name in d:
            setattr(cfg, name, _section_from_dict(cls, d[name], name))
    return cfg.validate()


def load_config(path=None, overrides: dict = None) -> RunConfig:
    """Config from an optional JSON file plus {"section.key": value} overrides."""
    d = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
    cfg = config_from_dict(d)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            target = getattr(cfg, section)
            if not hasattr(target, key):
                raise ConfigError(f"unknown config key {dotted!r}")
            setattr(target, key, value)
        else:
            if not hasattr(cfg, dotted):
                raise ConfigError(f"unknown config key {dotted!r}")
            setattr(cfg, dotted, value)
    return cfg.validate()
