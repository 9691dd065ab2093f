"""Strict, flat, JSON-compatible command configurations.

Every config carries ``schema_version``; unknown keys are errors. Shared
field groups (dataset, head, recipe) are mixed in by inheritance so each
command still sees one flat key namespace.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .errors import InvalidConfigError
from .heads import HeadConfig
from .probe import ProbeRecipe

SCHEMA_VERSION = 1


@dataclass
class _Base:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict):
        if not isinstance(d, dict):
            raise InvalidConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfigError(f"unknown config key(s) for {cls.__name__}: {unknown}")
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise InvalidConfigError(
                f"unsupported schema_version {d['schema_version']!r} (expected {SCHEMA_VERSION})")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise InvalidConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.seed, int):
            raise InvalidConfigError("seed must be an integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _DatasetFields:
    dataset_source: str = "synthetic"
    dataset_path: str | None = None
    dataset_classes: int = 10
    dataset_per_class: int = 100
    dataset_seed: int = 0
    resolution: int = 16
    on_corrupt: str = "skip"

    def validate_dataset(self) -> None:
        if self.dataset_source not in ("synthetic", "directory"):
            raise InvalidConfigError(f"dataset_source must be 'synthetic' or 'directory', "
                                     f"got {self.dataset_source!r}")
        if self.dataset_source == "directory":
            if not self.dataset_path:
                raise InvalidConfigError("dataset_path is required for a directory dataset")
            if not Path(self.dataset_path).is_dir():
                raise InvalidConfigError(f"dataset_path {self.dataset_path!r} does not exist")


@dataclass
class _CheckpointFields:
    checkpoint: str = ""
    checkpoint_digest: str | None = None

    def validate_checkpoint(self) -> None:
        if not self.checkpoint:
            raise InvalidConfigError("checkpoint path is required")


@dataclass
class _HeadFields:
    family: str = "linear"
    hidden_sizes: list = field(default_factory=list)
    conv_channels: list | None = None
    num_blocks: int | None = None
    token_grid: int = 8
    num_heads: int = 8

    def head_config(self, channels: int, pool: int, num_classes: int) -> HeadConfig:
        return HeadConfig(family=self.family, input_channels=channels, num_classes=num_classes,
                          pool=pool, hidden_sizes=tuple(self.hidden_sizes),
                          conv_channels=None if self.conv_channels is None
                          else tuple(self.conv_channels),
                          num_blocks=self.num_blocks, token_grid=self.token_grid,
                          num_heads=self.num_heads)


@dataclass
class _RecipeFields:
    epochs: int = 28
    lr: float = 1e-3
    gamma: float = 0.1
    period: int = 8
    batch_size: int = 64
    augmentation: list = field(default_factory=lambda: ["center_crop", "horizontal_flip"])
    frozen: bool = True

    def recipe(self) -> ProbeRecipe:
        return ProbeRecipe(epochs=self.epochs, lr=self.lr, gamma=self.gamma, period=self.period,
                           batch_size=self.batch_size, augmentation=tuple(self.augmentation),
                           frozen=self.frozen)


@dataclass
class TrainDiffusionConfig(_DatasetFields, _Base):
    base_channels: int = 32
    channel_multipliers: list = field(default_factory=lambda: [1, 2, 2])
    num_res_blocks: int = 2
    attention_resolutions: list = field(default_factory=lambda: [8])
    head_channels: int = 64
    norm_groups: int = 32
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 2000
    batch_size: int = 32
    lr: float = 5e-4
    horizontal_flip: bool = True
    checkpoint_every: int = 500
    log_every: int = 50
    smoothing_window: int = 20

    def validate(self):
        super().validate()
        self.validate_dataset()
        self.backbone()
        if self.steps < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise InvalidConfigError("steps, batch_size and checkpoint_every must be positive")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(resolution=self.resolution, base_channels=self.base_channels,
                              channel_multipliers=tuple(self.channel_multipliers),
                              num_res_blocks=self.num_res_blocks,
                              attention_resolutions=tuple(self.attention_resolutions),
                              head_channels=self.head_channels, norm_groups=self.norm_groups)


@dataclass
class SampleConfig(_CheckpointFields, _Base):
    n: int = 16
    clip: bool = True

    def validate(self):
        super().validate()
        self.validate_checkpoint()


@dataclass
class ExtractConfig(_CheckpointFields, _DatasetFields, _Base):
    split: str = "train"
    t: int = 90
    b: int = 24
    pool: int = 1
    flatten: bool = True

    def validate(self):
        super().validate()
        self.validate_dataset()
        self.validate_checkpoint()


@dataclass
class ProbeConfig(_CheckpointFields, _DatasetFields, _HeadFields, _RecipeFields, _Base):
    t: int = 90
    b: int = 24
    pool: int = 1
    feature_seed: int = 0
    val_split: str = "val"

    def validate(self):
        super().validate()
        self.validate_dataset()
        self.validate_checkpoint()
        self.recipe()


@dataclass
class SweepConfig(_CheckpointFields, _DatasetFields, _HeadFields, _RecipeFields, _Base):
    t_values: list | None = None
    b_values: list | None = None
    pool_values: list = field(default_factory=lambda: [1, 2])
    feature_seed: int = 0
    budget: int | None = None
    val_split: str = "val"

    def validate(self):
        super().validate()
        self.validate_dataset()
        self.validate_checkpoint()
        self.recipe()
        for name in ("t_values", "b_values", "pool_values"):
            v = getattr(self, name)
            if v is not None and not v:
                raise InvalidConfigError(f"{name} must be non-empty when given")


@dataclass
class CkaConfig(_CheckpointFields, _DatasetFields, _Base):
    checkpoint_b: str | None = None
    split: str = "test"
    blocks: list | None = None
    t_a: int = 90
    t_b: int | None = None
    pool: int = 1
    seed_b: int | None = None
    max_samples: int | None = None

    def validate(self):
        super().validate()
        self.validate_dataset()
        self.validate_checkpoint()


CONFIGS = {
    "train-diffusion": TrainDiffusionConfig,
    "sample": SampleConfig,
    "extract": ExtractConfig,
    "probe": ProbeConfig,
    "sweep": SweepConfig,
    "cka": CkaConfig,
}


def load_config(command: str, path: str | Path | None = None, overrides: dict | None = None):
    """Parse ``path`` (JSON) for ``command`` and apply CLI overrides such as ``seed``."""
    cls = CONFIGS[command]
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise InvalidConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"config file {path} is not valid JSON: {exc}") from None
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return cls.from_dict(data)
