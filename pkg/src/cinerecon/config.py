"""Experiment configuration: nested dataclasses with strict key validation.

Config files are YAML with the sections ``knet``, ``mgda``, ``mrf``,
``train`` and ``data``.  Unknown keys and out-of-range values raise
:class:`ConfigError` naming the dotted key.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class KNetConfig:
    depth: int = 4
    base_channels: int = 32
    use_data_consistency: bool = False

    def validate(self):
        _check(self.depth >= 2, "knet.depth", "must be >= 2")
        _check(self.base_channels >= 8, "knet.base_channels", "must be >= 8")


@dataclass
class MgdaConfig:
    enabled: bool = True
    channels: int = 64
    residual_blocks: int = 5
    propagation: str = "SOGP"
    propagation_blocks: int = 2
    pyramid_levels: int = 4
    flow_channels: tuple[int, ...] = (32, 64, 32, 16)
    flow_kernel: int = 7
    kernel_size: int = 3
    offset_groups: int = 8
    offset_clamp: float = 0.25

    def validate(self):
        _check(self.propagation in ("FOGP", "SOGP"), "mgda.propagation", "must be FOGP or SOGP")
        _check(self.channels >= 1, "mgda.channels", "must be positive")
        _check(self.pyramid_levels >= 1, "mgda.pyramid_levels", "must be >= 1")
        _check(len(self.flow_channels) == 4, "mgda.flow_channels",
               "needs 4 hidden widths (5-layer predictor)")
        _check(self.kernel_size % 2 == 1, "mgda.kernel_size", "must be odd")
        _check(self.offset_groups % 2 == 0 and (2 * self.channels) % self.offset_groups == 0,
               "mgda.offset_groups", "must be even and divide 2 * channels")
        _check(0 < self.offset_clamp <= 1, "mgda.offset_clamp", "must be in (0, 1]")


MRF_VARIANTS = {
    "hybrid": ("conv", "attention", "attention"),
    "conv": ("conv", "conv", "conv"),
    "attention": ("attention", "attention", "attention"),
}


@dataclass
class MrfConfig:
    enabled: bool = True
    stages: int = 3
    channels: int = 64
    window_size: int = 8
    heads: tuple[int, int, int] = (1, 2, 4)
    block_types: tuple[str, str, str] = MRF_VARIANTS["hybrid"]
    blocks_per_stage: int = 2
    mlp_ratio: float = 2.0

    def validate(self):
        _check(self.stages >= 1, "mrf.stages", "must be >= 1")
        _check(len(self.block_types) == 3
               and all(b in ("conv", "attention") for b in self.block_types),
               "mrf.block_types", "needs three entries from {conv, attention}")
        _check(len(self.heads) == 3, "mrf.heads", "needs three entries")
        for i, hd in enumerate(self.heads):
            width = self.channels * 2 ** i
            _check(hd >= 1 and width % hd == 0, "mrf.heads", f"branch {i} width {width} not divisible by {hd}")
        _check(self.window_size >= 1, "mrf.window_size", "must be positive")

    @classmethod
    def variant(cls, name: str, **kwargs) -> "MrfConfig":
        if name not in MRF_VARIANTS:
            raise ConfigError(f"unknown MRF variant {name!r}")
        return cls(block_types=MRF_VARIANTS[name], **kwargs)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    max_steps: int | None = None
    batch_size: int = 1
    epoch_repeats: int = 1
    weight_decay: float = 1e-2
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6
    mixed_precision: bool = False
    seed: int = 0
    num_workers: int = 0

    def validate(self):
        _check(self.learning_rate > 0, "train.learning_rate", "must be > 0")
        _check(self.epochs >= 1, "train.epochs", "must be >= 1")
        _check(self.max_steps is None or self.max_steps >= 1, "train.max_steps", "must be >= 1")
        _check(self.batch_size >= 1, "train.batch_size", "must be >= 1")
        _check(self.epoch_repeats >= 1, "train.epoch_repeats", "must be >= 1")
        _check(0 < self.plateau_factor < 1, "train.plateau_factor", "must be in (0, 1)")
        _check(self.plateau_patience >= 0, "train.plateau_patience", "must be >= 0")
        _check(self.weight_decay >= 0, "train.weight_decay", "must be >= 0")


@dataclass
class DataConfig:
    """Where sequences come from and how they are undersampled.

    ``source`` is ``"synthetic"`` (phantom generator, sized by the
    ``synthetic_*`` fields) or ``"prepared"`` (a directory written by
    ``cinerecon prepare``).
    """

    source: str = "synthetic"
    root: str | None = None
    acceleration: float = 4.0
    center_lines: int | None = None
    per_frame_masks: bool = False
    noise_sigma: float = 0.0
    mask_seed: int = 0
    split_seed: int = 0
    synthetic_subjects: tuple[int, int, int] = (2, 1, 2)
    synthetic_frames: int = 8
    synthetic_size: int = 64

    def validate(self):
        _check(self.source in ("synthetic", "prepared"), "data.source", "must be synthetic or prepared")
        _check(self.acceleration >= 1, "data.acceleration", "must be >= 1")
        _check(self.noise_sigma >= 0, "data.noise_sigma", "must be >= 0")
        _check(self.source != "prepared" or bool(self.root), "data.root",
               "required when source is prepared")


@dataclass
class ExperimentConfig:
    knet: KNetConfig = field(default_factory=KNetConfig)
    mgda: MgdaConfig = field(default_factory=MgdaConfig)
    mrf: MrfConfig = field(default_factory=MrfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "ExperimentConfig":
        for section in SECTIONS:
            getattr(self, section).validate()
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``{"mgda.propagation": "FOGP"}``."""
        raw = self.to_dict()
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if section not in raw or name not in raw[section]:
                raise ConfigError(f"unknown config key {key!r}")
            raw[section][name] = value
        return from_dict(raw)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


SECTIONS = {
    "knet": KNetConfig,
    "mgda": MgdaConfig,
    "mrf": MrfConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def _check(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: {message}")


def _coerce(section: str, cls, values: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for name, value in values.items():
        if name not in known:
            raise ConfigError(f"unknown config key '{section}.{name}'")
        default = getattr(cls(), name)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = copy.deepcopy(raw or {})
    for section in raw:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
    cfg = ExperimentConfig(**{name: _coerce(name, cls, raw.get(name) or {})
                              for name, cls in SECTIONS.items()})
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw)


def toy_config(**overrides) -> ExperimentConfig:
    """Small widths for CPU-scale experiments and tests."""
    cfg = ExperimentConfig(
        knet=KNetConfig(depth=2, base_channels=8),
        mgda=MgdaConfig(channels=16, residual_blocks=2, propagation_blocks=1,
                        flow_channels=(16, 16, 16, 8), flow_kernel=5, pyramid_levels=3),
        mrf=MrfConfig(channels=16, window_size=4, blocks_per_stage=1),
        train=TrainConfig(epochs=1000, plateau_patience=50, batch_size=1),
    )
    return cfg.with_overrides(overrides) if overrides else cfg.validate()
