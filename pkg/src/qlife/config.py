"""Run configuration: one validated tree of every tunable, loaded from YAML.

Unknown keys are rejected at every level so a typo fails before any compute
starts. Command-line flags are merged on top of the file.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data import CLASSES, SyntheticSpec, class_index
from .incremental import StageSchedule
from .model import BackboneConfig, TrainConfig
from .novelty import HypothesisConfig


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataSection(_Section):
    image_size: int = Field(32, ge=16)
    count_scale: float = Field(1.0, gt=0)
    split: tuple[float, float, float] = (0.5, 0.2, 0.3)

    @field_validator("split")
    @classmethod
    def _sums_to_one(cls, v):
        if any(f < 0 for f in v) or abs(sum(v) - 1.0) > 1e-6:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {v}")
        return v


class BackboneSection(_Section):
    conv_channels: list[int] = [8, 16, 32]
    spp_levels: list[int] = [4, 2, 1]
    embed_dim: int = Field(64, ge=1)
    dropout_rate: float = Field(0.5, ge=0, lt=1)


class TrainSection(_Section):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(3e-3, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    momentum: float = Field(0.9, ge=0, lt=1)
    scl_weight: float = Field(0.1, ge=0)
    schedule: Literal["cosine", "constant"] = "cosine"


class DetectionSection(_Section):
    batch_size: int = Field(20, ge=1)
    percentile: float = Field(95.0, ge=0, le=100)
    alpha: float = Field(0.05, gt=0, le=1)
    null_trials: int = Field(500, ge=1)
    null_mode: Literal["mixed", "per-class"] = "per-class"
    ridge: float = Field(0.1, ge=0)
    eval_trials: int = Field(100, ge=1)


class IncrementalSection(_Section):
    shots: int = Field(20, ge=1)
    head_epochs: int = Field(15, ge=1)
    head_lr: float = Field(1e-3, gt=0)
    e2e_epochs: int = Field(15, ge=1)
    e2e_lr: float = Field(5e-5, gt=0)
    zero_init_head: bool = True
    # "per-class": K replayed samples of every known class; "total": K split across them
    replay_reading: Literal["per-class", "total"] = "per-class"
    baseline: Literal["full-old", "k-shots"] = "full-old"
    sweep_shots: list[int] = [5, 10, 15, 20]
    sweep_seeds: int = Field(3, ge=1)


class DannSection(_Section):
    shots: int = Field(5, ge=1)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=2)
    lr: float = Field(1e-3, gt=0)
    lambda_grl: float = Field(1.0, ge=0)
    ramp: bool = False
    w_target: float = 0.5
    domain_hidden: int = Field(64, ge=1)
    domain_lr_scale: float = Field(10.0, gt=0)
    domain_on_labeled_target: bool = True
    source_epochs: int = Field(30, ge=1)


class RunConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    new_class: str = "minor-damaged"
    data: DataSection = DataSection()
    backbone: BackboneSection = BackboneSection()
    train: TrainSection = TrainSection()
    detection: DetectionSection = DetectionSection()
    incremental: IncrementalSection = IncrementalSection()
    dann: DannSection = DannSection()

    @field_validator("new_class")
    @classmethod
    def _known_class(cls, v):
        return CLASSES[class_index(v)]


def _set_path(tree: dict, dotted: str, value):
    node = tree
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (YAML, may be ``None`` for defaults) and apply dotted-key ``overrides``."""
    tree: dict = {}
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        tree = loaded
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_path(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def default_config_path() -> Path:
    return Path(__file__).with_name("desk.yaml")


def dump_config(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")


# -- converters to the library's own config objects ---------------------------

def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    return SyntheticSpec.scaled(cfg.data.count_scale, image_size=cfg.data.image_size, seed=cfg.seed)


def backbone_config(cfg: RunConfig, num_classes: int) -> BackboneConfig:
    b = cfg.backbone
    return BackboneConfig(conv_channels=tuple(b.conv_channels), spp_levels=tuple(b.spp_levels), embed_dim=b.embed_dim,
                          num_classes=num_classes, scl_weight=cfg.train.scl_weight, dropout_rate=b.dropout_rate)


def train_config(cfg: RunConfig, seed: int | None = None, epochs: int | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=epochs or t.epochs, batch_size=t.batch_size, lr=t.lr, momentum=t.momentum,
                       optimizer=t.optimizer, scl_weight=t.scl_weight, schedule=t.schedule,
                       seed=cfg.seed if seed is None else seed)


def hypothesis_config(cfg: RunConfig) -> HypothesisConfig:
    d = cfg.detection
    return HypothesisConfig(d.batch_size, d.percentile, d.alpha, d.null_trials, d.null_mode)


def stage_schedule(cfg: RunConfig) -> StageSchedule:
    inc = cfg.incremental
    return StageSchedule(inc.head_epochs, inc.head_lr, inc.e2e_epochs, inc.e2e_lr)


def dann_config(cfg: RunConfig, seed: int | None = None):
    from .dann import DannConfig

    d = cfg.dann
    return DannConfig(epochs=d.epochs, batch_size=d.batch_size, lr=d.lr, lambda_grl=d.lambda_grl, ramp=d.ramp,
                      w_target=d.w_target, domain_hidden=d.domain_hidden, domain_lr_scale=d.domain_lr_scale,
                      domain_on_labeled_target=d.domain_on_labeled_target, seed=cfg.seed if seed is None else seed)
