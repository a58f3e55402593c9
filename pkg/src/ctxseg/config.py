"""Configuration schema, YAML loading, and dotted-key overrides.

Defaults follow the reference training recipe: confidence threshold 0.75,
temperature 0.1, K=4 auxiliary heads per perturbation type, noise range
(-0.3, 0.3), feature-dropout thresholds (0.75, 0.9), spatial-dropout keep
probability 0.5, loss weights (1, 0.1, 0.01, 0.01), SGD lr 0.001 with poly
power 0.9, batch size 8, input size 320, 80 epochs with a 5-epoch
supervised warm-up, and a 1200-entry negative bank.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values in a config file/override."""


@dataclass
class AugmentConfig:
    hflip: float = 0.5
    vflip: float = 0.5
    blur: float = 0.25
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    color_jitter: float = 0.25
    jitter_strength: float = 0.2
    grayscale: float = 0.1


@dataclass
class DataConfig:
    root: str = ""
    manifest: str = "manifest.json"
    test_root: str = ""
    split_mode: str = "by_center"        # by_center | by_image
    fraction: str = "1/8"                # of {1, 1/2, 1/4, 1/8, 1/16, 1/32}
    round_centers_up: bool = False       # ceil instead of floor when selecting centers
    input_size: int = 320
    overlap_range: tuple[float, float] = (0.1, 1.0)
    crop_scale: tuple[float, float] = (0.5, 1.0)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class ModelConfig:
    num_classes: int = 5
    width: int = 32
    feature_dim: int = 64
    proj_dim: int = 128
    pretrained: str = ""                 # optional path to backbone weights


@dataclass
class PerturbConfig:
    noise_lo: float = -0.3
    noise_hi: float = 0.3
    fdrop_lo: float = 0.75
    fdrop_hi: float = 0.9
    dropout_keep: float = 0.5
    aux_heads: int = 4                   # K per perturbation type
    fdrop_literal: bool = False          # mask the normalized channel-sum map instead of raw features
    fdrop_drop_low: bool = False         # drop low activations (prose variant) instead of high
    dropout_is_drop_prob: bool = False   # treat dropout_keep as drop probability instead

    def validate(self) -> None:
        if self.noise_lo > self.noise_hi:
            raise ConfigError("perturb.noise_lo must be <= perturb.noise_hi")
        if not (0.0 < self.fdrop_lo <= self.fdrop_hi < 1.0):
            raise ConfigError("perturb feature-dropout range must satisfy 0 < lo <= hi < 1")
        if not (0.0 < self.dropout_keep < 1.0):
            raise ConfigError("perturb.dropout_keep must lie in (0, 1)")
        if self.aux_heads < 1:
            raise ConfigError("perturb.aux_heads must be >= 1")


@dataclass
class LossConfig:
    w_sup: float = 1.0
    w_cont: float = 0.1
    w_cross: float = 0.01
    w_ent: float = 0.01
    threshold: float = 0.75              # confidence gate for positives
    temperature: float = 0.1
    detach_target: bool = True           # stop-gradient on the confident side + negatives
    detach_cross_target: bool = True     # stop-gradient on the main prediction in cross-consistency
    mean_over_positives: bool = True     # divide by gated positives, not total overlap pixels

    def validate(self) -> None:
        if self.w_sup <= 0:
            raise ConfigError("loss.w_sup must be positive")
        for name in ("w_cont", "w_cross", "w_ent"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be nonnegative")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError("loss.threshold must lie in (0, 1)")
        if self.temperature <= 0:
            raise ConfigError("loss.temperature must be positive")


@dataclass
class BankConfig:
    capacity: int = 1200
    sample_cap: int = 256                # entries pushed per step
    negatives: int = 1200                # entries drawn per direction per step
    push_confident_only: bool = True
    per_pixel_negatives: bool = False
    serialize: bool = False              # include bank state in checkpoints


@dataclass
class TrainSettings:
    epochs: int = 80
    warmup_epochs: int = 5
    batch_size: int = 8
    unlabeled_batch_size: int = 8
    base_lr: float = 1e-3
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_every: int = 5                  # epochs between held-out evaluations
    checkpoint_every: int = 10           # epochs between periodic checkpoints
    float64: bool = False                # run model + losses in float64 (gradient-check mode)

    def validate(self) -> None:
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("train.warmup_epochs must be < train.epochs")
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr must be positive")


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    run_dir: str = "runs/default"


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def validate(self) -> "Config":
        self.perturb.validate()
        self.loss.validate()
        self.train.validate()
        return self


def _valid_keys(obj: Any) -> list[str]:
    return [f.name for f in fields(obj)]


def _coerce(value: Any, target: Any) -> Any:
    # YAML gives lists where the schema uses tuples, and ints where floats go.
    if isinstance(target, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(target, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _apply_mapping(obj: Any, mapping: dict, prefix: str = "") -> None:
    valid = _valid_keys(obj)
    for key, value in mapping.items():
        dotted = f"{prefix}{key}"
        if key not in valid:
            raise ConfigError(
                f"unknown config key '{dotted}'; valid keys here: {', '.join(sorted(valid))}"
            )
        current = getattr(obj, key)
        if is_dataclass(current) and not isinstance(current, type):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{dotted}' expects a mapping")
            _apply_mapping(current, value, prefix=f"{dotted}.")
        else:
            setattr(obj, key, _coerce(value, current))


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    """Build a Config from an optional YAML file plus dotted-key overrides.

    Overrides look like ``train.base_lr=0.01``; values are parsed as YAML.
    Unknown keys raise ConfigError listing the valid keys at that level.
    """
    cfg = Config()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        _apply_mapping(cfg, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        dotted, _, raw_value = item.partition("=")
        value = yaml.safe_load(raw_value)
        node: dict = {}
        leaf = node
        parts = dotted.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = value
        _apply_mapping(cfg, node)
    return cfg.validate()


def config_to_dict(cfg: Any) -> dict:
    return dataclasses.asdict(cfg)


def save_config(cfg: Config, path: str | Path) -> None:
    """Echo the full effective config (defaults included) to a YAML file."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))


def clone_config(cfg: Config) -> Config:
    return copy.deepcopy(cfg)


SCHEMES = {
    "sup_only": dict(w_cont=0.0, w_cross=0.0, w_ent=0.0),
    "scheme1": dict(w_cross=0.0, w_ent=0.0),
    "scheme2": dict(w_cross=0.0),
    "scheme3": dict(),
}


def apply_scheme(cfg: Config, scheme: str) -> Config:
    """Zero out loss weights to reproduce an ablation scheme.

    sup_only: supervised CE only. scheme1: + contrastive. scheme2: + entropy.
    scheme3: full framework (+ cross-consistency).
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme '{scheme}'; valid: {', '.join(SCHEMES)}")
    out = clone_config(cfg)
    for key, value in SCHEMES[scheme].items():
        setattr(out.loss, key, value)
    return out
