"""Experiment configuration.

A config is a flat key-value document (YAML syntax, scalars and two-element
lists only). Every key is a field of :class:`ExperimentConfig`; unknown keys
are rejected so a misspelled hyperparameter cannot silently fall back to its
default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from mrissl.augment import AugmentationConfig, AugmentationConfigError
from mrissl.dataset import DatasetError, SplitSpec

METHODS = ("simclr", "byol", "dino", "mocov3")
METHOD_NAMES = {"simclr": "SimCLR", "byol": "BYOL", "dino": "DINO", "mocov3": "MoCoV3"}
PROFILES = ("paper", "tiny")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    dataset_root: str = ""
    taxonomy_file: str = ""
    output_dir: str = "runs"
    seed: int = 0
    method: str = "simclr"
    balance_target: int = 625
    split_train_frac: float = 0.8
    split_val_frac: float = 0.1
    split_test_frac: float = 0.1
    # augmentation (supervised / balancing regime)
    rotation_range: float = 20.0
    width_shift_range: float = 0.1
    height_shift_range: float = 0.1
    zoom_range: float = 0.1
    horizontal_flip: bool = True
    brightness_range: list = field(default_factory=lambda: [0.8, 1.2])
    fill_mode: str = "nearest"
    # SSL view extras
    ssl_crop_scale: list = field(default_factory=lambda: [0.5, 1.0])
    ssl_crop_ratio: list = field(default_factory=lambda: [0.75, 1.3333333333333333])
    ssl_blur_sigma: list = field(default_factory=lambda: [0.1, 2.0])
    ssl_blur_probability: float = 0.5
    normalize_mean: float = 0.5
    normalize_std: float = 0.5
    # model
    encoder: str = "resnet50"
    projection_hidden_dim: int = 512
    projection_dim: int = 128
    dino_out_dim: int = 4096
    # shared training settings
    batch_size: int = 32
    workers: int = 4
    epochs_ssl: int = 80
    epochs_linear: int = 50
    epochs_finetune: int = 50
    optimizer: str = "AdamW"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    loss: str = "CrossEntropy"
    early_stopping_patience: int = 10
    early_stopping_min_delta: float = 1e-6
    ema_momentum: float = 0.996
    dino_center_momentum: float = 0.9
    # per-method settings
    mocov3_lr_ssl: float = 1e-3
    mocov3_lr_probe: float = 3e-3
    mocov3_lr_finetune: float = 5e-4
    mocov3_weight_decay: float = 1e-4
    mocov3_temperature: float = 0.2
    mocov3_head_batchnorm: bool = False
    dino_lr_ssl: float = 1e-4
    dino_lr_probe: float = 3e-3
    dino_lr_finetune: float = 1e-4
    dino_weight_decay: float = 1e-6
    dino_student_temp: float = 0.1
    dino_teacher_temp: float = 0.04
    byol_lr_ssl: float = 1e-4
    byol_lr_probe: float = 1e-3
    byol_lr_finetune: float = 1e-4
    byol_weight_decay: float = 1e-4
    byol_head_batchnorm: bool = True
    simclr_lr_ssl: float = 3e-4
    simclr_lr_probe: float = 1e-3
    # "1e-4 x 10" read as 1e-3; set 1e-4 for the other reading
    simclr_lr_finetune: float = 1e-3
    simclr_weight_decay: float = 1e-6
    simclr_temperature: float = 0.5
    # embedding analysis
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 1000
    kmeans_clusters: int = 17
    # synthetic data (tiny profile)
    synthetic_classes: int = 4
    synthetic_train_per_class: int = 125
    synthetic_val_per_class: int = 25
    synthetic_test_per_class: int = 25
    synthetic_pattern: str = "bands"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.encoder not in ("resnet50", "tiny"):
            raise ConfigError(f"encoder must be 'resnet50' or 'tiny', got {self.encoder!r}")
        if self.optimizer != "AdamW":
            raise ConfigError("only the AdamW optimizer is supported")
        if self.loss != "CrossEntropy":
            raise ConfigError("only the CrossEntropy supervised loss is supported")
        if self.early_stopping_patience < 1:
            raise ConfigError("early_stopping_patience must be >= 1")
        for m in METHODS:
            for suffix in ("lr_ssl", "lr_probe", "lr_finetune"):
                if getattr(self, f"{m}_{suffix}") <= 0:
                    raise ConfigError(f"{m}_{suffix} must be positive")
        for name in ("mocov3_temperature", "dino_student_temp", "dino_teacher_temp", "simclr_temperature"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("ema_momentum", "dino_center_momentum"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1 or self.workers < 0:
            raise ConfigError("batch_size must be >= 1 and workers >= 0")
        # constructing these validates their own invariants
        try:
            self.split_spec()
            self.augmentation()
            self.ssl_augmentation()
        except (DatasetError, AugmentationConfigError) as e:
            raise ConfigError(str(e)) from None

    # -- derived objects ---------------------------------------------------

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.split_train_frac, self.split_val_frac, self.split_test_frac, self.seed)

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(
            rotation_range=self.rotation_range,
            width_shift_range=self.width_shift_range,
            height_shift_range=self.height_shift_range,
            zoom_range=self.zoom_range,
            horizontal_flip=self.horizontal_flip,
            brightness_range=tuple(self.brightness_range),
            fill_mode=self.fill_mode,
        )

    def ssl_augmentation(self) -> AugmentationConfig:
        return dataclasses.replace(
            self.augmentation(),
            random_resized_crop=tuple(self.ssl_crop_scale),
            crop_ratio=tuple(self.ssl_crop_ratio),
            gaussian_blur=tuple(self.ssl_blur_sigma),
            blur_probability=self.ssl_blur_probability,
        )

    def method_config(self, method: Optional[str] = None) -> "SSLMethodConfig":
        m = method or self.method
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
        temperature = {"simclr": self.simclr_temperature, "mocov3": self.mocov3_temperature}.get(m)
        return SSLMethodConfig(
            method=m,
            temperature=temperature,
            dino_student_temp=self.dino_student_temp,
            dino_teacher_temp=self.dino_teacher_temp,
            dino_center_momentum=self.dino_center_momentum,
            dino_out_dim=self.dino_out_dim,
            ema_momentum=self.ema_momentum,
            lr_ssl=getattr(self, f"{m}_lr_ssl"),
            lr_probe=getattr(self, f"{m}_lr_probe"),
            lr_finetune=getattr(self, f"{m}_lr_finetune"),
            weight_decay=getattr(self, f"{m}_weight_decay"),
            betas=(self.adam_beta1, self.adam_beta2),
            head_batchnorm=getattr(self, f"{m}_head_batchnorm", False),
        )

    def hyperparams(self) -> "TrainingHyperparams":
        return TrainingHyperparams(
            batch_size=self.batch_size,
            workers=self.workers,
            epochs_ssl=self.epochs_ssl,
            epochs_linear=self.epochs_linear,
            epochs_finetune=self.epochs_finetune,
            patience=self.early_stopping_patience,
            min_delta=self.early_stopping_min_delta,
            seed=self.seed,
            normalize_mean=self.normalize_mean,
            normalize_std=self.normalize_std,
        )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def snapshot_hash(self) -> str:
        """Hash of every setting shared by one experiment's artifacts.

        The output root and worker count do not change results, and the SSL
        method only selects which artifacts a command reads or writes, so
        none of them enter the hash.
        """
        d = self.to_dict()
        for k in ("output_dir", "workers", "method"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, data: dict[str, Any], base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = (base or cls()).to_dict()
        for k, v in data.items():
            if isinstance(v, dict):
                raise ConfigError(f"config must be flat; key {k!r} holds a mapping")
            merged[k] = _coerce(k, v, merged[k])
        return cls(**merged)

    @classmethod
    def from_file(cls, path: str | Path, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a key-value document")
        return cls.from_mapping(data, base)


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {value!r}") from None
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{key} expects a list of {len(default)} numbers, got {value!r}")
        return [float(v) for v in value]
    if isinstance(default, str):
        if value is None:
            return ""
        return str(value)
    return value


# Tiny profile: desk-scale encoder, synthetic 32x32 data, shortened schedules.
TINY_PROFILE = {
    "encoder": "tiny",
    "balance_target": 0,
    "dino_out_dim": 256,
    # with only 30 epochs on the small encoder, DINO and BYOL need a larger step to leave their
    # early plateau (uniform teacher output / near-constant predictions)
    "dino_lr_ssl": 1e-3,
    "byol_lr_ssl": 1e-3,
    "epochs_ssl": 30,
    "epochs_linear": 50,
    "epochs_finetune": 50,
    "workers": 0,
    "kmeans_clusters": 4,
    "tsne_iterations": 500,
}


def profile_defaults(profile: str) -> ExperimentConfig:
    if profile == "paper":
        return ExperimentConfig()
    if profile == "tiny":
        return ExperimentConfig.from_mapping(TINY_PROFILE)
    raise ConfigError(f"unknown profile {profile!r}")


@dataclass(frozen=True)
class SSLMethodConfig:
    method: str
    temperature: Optional[float] = None
    dino_student_temp: float = 0.1
    dino_teacher_temp: float = 0.04
    dino_center_momentum: float = 0.9
    dino_out_dim: int = 4096
    ema_momentum: float = 0.996
    lr_ssl: float = 3e-4
    lr_probe: float = 1e-3
    lr_finetune: float = 1e-3
    weight_decay: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    head_batchnorm: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method in ("simclr", "mocov3") and (self.temperature is None or self.temperature <= 0):
            raise ConfigError(f"{self.method} needs a positive temperature")
        if self.dino_student_temp <= 0 or self.dino_teacher_temp <= 0:
            raise ConfigError("DINO temperatures must be positive")
        if not (0 <= self.ema_momentum <= 1 and 0 <= self.dino_center_momentum <= 1):
            raise ConfigError("momenta must lie in [0, 1]")

    @classmethod
    def defaults_for(cls, method: str) -> "SSLMethodConfig":
        return ExperimentConfig().method_config(method)

    @property
    def uses_momentum_target(self) -> bool:
        return self.method in ("byol", "dino", "mocov3")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainingHyperparams:
    batch_size: int = 32
    workers: int = 4
    epochs_ssl: int = 80
    epochs_linear: int = 50
    epochs_finetune: int = 50
    patience: int = 10
    min_delta: float = 1e-6
    seed: int = 0
    normalize_mean: float = 0.5
    normalize_std: float = 0.5

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
