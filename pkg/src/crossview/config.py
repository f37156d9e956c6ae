"""Run configuration: dataclasses plus the flat ``key=value`` file format.

Config files are plain text, one assignment per line, with dotted section
prefixes (``sampler.refresh_interval=6``).  Unknown keys are errors, not
warnings.  ``#`` starts a comment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

from .errors import ConfigError, DataError
from .model import ModelConfig
from .sampler import SamplerConfig


@dataclass
class DataConfig:
    root: str | None = None
    synthetic: bool = True
    n_classes: int = 64
    grid_spacing_deg: float = 1e-4
    channels: int = 3
    height: int = 16
    width: int = 16
    view_noise: float = 0.05


@dataclass
class ModelSettings:
    """Model hyperparameters that do not depend on the dataset."""

    widths: tuple = (16, 32)
    bottleneck: int = 512
    caci_reduction: int = 4
    caci_weight_sharing: bool = True
    spatial_kernel: int = 7


@dataclass
class TrainConfig:
    epochs: int = 120
    lr_backbone: float = 0.003
    lr_new: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_milestones: tuple = (70, 110)
    lr_decay: float = 0.1
    batch: int = 32
    margin: float = 0.3
    seed: int = 0
    desk_scale: bool = False
    augment_pad: int = 2
    validate_every: int = 1
    precision: str = "f64"
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(late_phase_epoch=None))
    model: ModelSettings = field(default_factory=ModelSettings)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        ms = tuple(self.lr_milestones)
        if any(ms[i] >= ms[i + 1] for i in range(len(ms) - 1)):
            raise ConfigError(f"lr_milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.epochs:
            raise ConfigError(f"lr_milestones {ms} must lie below epochs {self.epochs}")
        for name in ("lr_backbone", "lr_new"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 2:
            raise ConfigError(f"batch must be >= 2, got {self.batch}")
        if self.margin < 0:
            raise ConfigError(f"margin must be non-negative, got {self.margin}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.validate_every < 1:
            raise ConfigError(f"validate_every must be >= 1, got {self.validate_every}")

    def resolved_sampler(self) -> SamplerConfig:
        """Sampler config with batch/seed wired in and the late phase defaulted."""
        late = self.sampler.late_phase_epoch
        if late is None:
            late = self.lr_milestones[0] if self.lr_milestones else self.epochs
        return replace(
            self.sampler,
            batch_classes=self.batch,
            seed=self.seed,
            late_phase_epoch=int(late),
        )


def desk_config(seed: int = 0) -> TrainConfig:
    """Preset that trains in minutes on one CPU core: 64 classes, 16x16 payloads.

    Learning rates are the paper-scale values times ten; at this model size
    the original rates barely move the head in 60 epochs.
    """
    cfg = TrainConfig(
        epochs=60,
        lr_backbone=0.03,
        lr_new=0.1,
        lr_milestones=(35, 50),
        batch=16,
        seed=seed,
        desk_scale=True,
        model=ModelSettings(widths=(16, 32), bottleneck=32),
        data=DataConfig(n_classes=64, height=16, width=16),
    )
    cfg.validate()
    return cfg


def build_model_config(cfg: TrainConfig, n_classes: int, input_hw, in_channels: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        n_classes=n_classes,
        in_channels=in_channels,
        input_hw=tuple(input_hw),
        widths=m.widths,
        bottleneck=m.bottleneck,
        caci_reduction=m.caci_reduction,
        caci_weight_sharing=m.caci_weight_sharing,
        spatial_kernel=m.spatial_kernel,
    )


# -- key=value serialization -----------------------------------------------------


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_ints(v: str) -> tuple:
    v = v.strip()
    return tuple(int(x) for x in v.split(",")) if v else ()


def _parse_floats(v: str) -> tuple:
    return tuple(float(x) for x in v.split(","))


def _parse_optional_int(v: str):
    return None if v.strip() in ("", "none") else int(v)


def _parse_optional_str(v: str):
    return None if v.strip() in ("", "none") else v.strip()


# key -> (section attribute path, parser)
_KEY_TABLE = {
    "epochs": ("epochs", int),
    "lr_backbone": ("lr_backbone", float),
    "lr_new": ("lr_new", float),
    "momentum": ("momentum", float),
    "weight_decay": ("weight_decay", float),
    "lr_milestones": ("lr_milestones", _parse_ints),
    "lr_decay": ("lr_decay", float),
    "batch": ("batch", int),
    "margin": ("margin", float),
    "seed": ("seed", int),
    "desk_scale": ("desk_scale", _parse_bool),
    "augment_pad": ("augment_pad", int),
    "validate_every": ("validate_every", int),
    "precision": ("precision", str),
    "sampler.init_epoch": ("sampler.init_epoch", int),
    "sampler.late_phase_epoch": ("sampler.late_phase_epoch", _parse_optional_int),
    "sampler.refresh_interval": ("sampler.refresh_interval", int),
    "sampler.early_ratio": ("sampler.early_ratio", _parse_floats),
    "sampler.late_ratio": ("sampler.late_ratio", _parse_floats),
    "sampler.strategy": ("sampler.strategy", str),
    "model.widths": ("model.widths", _parse_ints),
    "model.bottleneck": ("model.bottleneck", int),
    "model.caci_reduction": ("model.caci_reduction", int),
    "model.caci_weight_sharing": ("model.caci_weight_sharing", _parse_bool),
    "model.spatial_kernel": ("model.spatial_kernel", int),
    "data.root": ("data.root", _parse_optional_str),
    "data.synthetic": ("data.synthetic", _parse_bool),
    "data.n_classes": ("data.n_classes", int),
    "data.grid_spacing_deg": ("data.grid_spacing_deg", float),
    "data.channels": ("data.channels", int),
    "data.height": ("data.height", int),
    "data.width": ("data.width", int),
    "data.view_noise": ("data.view_noise", float),
}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TABLE:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        path, parser = _KEY_TABLE[key]
        try:
            parsed = parser(value)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
        target = cfg
        *heads, leaf = path.split(".")
        for head in heads:
            target = getattr(target, head)
        setattr(target, leaf, parsed)
    if isinstance(cfg.sampler, SamplerConfig):
        cfg.sampler.validate()
    cfg.validate()
    return cfg


def load_config(path: str, base: TrainConfig | None = None) -> TrainConfig:
    if not os.path.isfile(path):
        raise DataError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)


def config_to_text(cfg: TrainConfig) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return str(int(v))
        if isinstance(v, tuple):
            return ",".join(fmt(x) for x in v)
        if v is None:
            return "none"
        return repr(v) if isinstance(v, float) else str(v)

    lines = []
    for key, (path, _) in _KEY_TABLE.items():
        target = cfg
        *heads, leaf = path.split(".")
        for head in heads:
            target = getattr(target, head)
        lines.append(f"{key}={fmt(getattr(target, leaf))}")
    return "\n".join(lines) + "\n"
