"""Shared domain types, run configuration and validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml

ScheduleMode = Literal["self_supervised", "fixed_lur"]


class ConfigError(ValueError):
    """Base class for invalid run configurations."""


class DomainCountError(ConfigError):
    pass


class BatchNotDivisibleError(ConfigError):
    pass


class WarmupExceedsTotalError(ConfigError):
    pass


class ToleranceOutOfRangeError(ConfigError):
    pass


class PatchSizeError(ConfigError):
    pass


class UnlearnStagesError(ConfigError):
    pass


class LURError(ConfigError):
    pass


@dataclass(frozen=True)
class DomainSet:
    """Ordered domain identifiers; list position is the classifier output index."""

    domains: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "domains", tuple(str(d) for d in self.domains))
        if len(set(self.domains)) != len(self.domains):
            raise DomainCountError(f"duplicate domain identifiers in {self.domains}")
        if len(self.domains) < 1:
            raise DomainCountError("a DomainSet needs at least one domain")

    @property
    def n(self) -> int:
        return len(self.domains)

    def index(self, domain: str) -> int:
        try:
            return self.domains.index(str(domain))
        except ValueError:
            raise KeyError(f"unknown domain {domain!r}; known: {self.domains}") from None

    def __len__(self) -> int:
        return self.n

    def __iter__(self):
        return iter(self.domains)


@dataclass
class VolumeSample:
    image: np.ndarray
    label: np.ndarray
    domain: int
    case_id: str = ""

    def __post_init__(self) -> None:
        if self.image.shape != self.label.shape:
            raise ValueError(
                f"image shape {self.image.shape} != label shape {self.label.shape}"
            )
        if self.image.ndim != 3:
            raise ValueError(f"expected a 3D volume, got shape {self.image.shape}")
        if not np.isin(self.label, (0, 1)).all():
            raise ValueError("label values must be 0 or 1")


@dataclass(frozen=True)
class AugmentationConfig:
    """Per-step probabilities and parameter ranges of the augmentation chain.

    Steps run in a fixed order: spatial (rotation + scaling), noise, blur,
    brightness, contrast, gamma, low resolution, mirroring. ``p_mirror`` is
    per axis.
    """

    p_spatial: float = 0.3
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    scale: tuple[float, float] = (0.85, 1.25)
    p_noise: float = 0.2
    noise_variance: tuple[float, float] = (0.0, 0.01)
    p_blur: float = 0.2
    blur_sigma: tuple[float, float] = (0.5, 1.0)
    p_brightness: float = 0.2
    brightness: tuple[float, float] = (0.75, 1.25)
    p_contrast: float = 0.2
    contrast: tuple[float, float] = (0.75, 1.25)
    p_gamma: float = 0.2
    gamma: tuple[float, float] = (0.7, 1.5)
    p_lowres: float = 0.2
    lowres_zoom: tuple[float, float] = (0.5, 1.0)
    p_mirror: float = 0.5

    @classmethod
    def disabled(cls) -> AugmentationConfig:
        return cls(
            p_spatial=0.0, p_noise=0.0, p_blur=0.0, p_brightness=0.0,
            p_contrast=0.0, p_gamma=0.0, p_lowres=0.0, p_mirror=0.0,
        )


@dataclass(frozen=True)
class RunConfig:
    """Everything that defines a training run.

    ``warmup_epochs`` and ``unlearn_stages`` may be left as ``None``; they then
    resolve to 10% of ``epochs`` and the three deepest encoder stages.
    """

    encoder_depth: int = 6
    patch_size: tuple[int, int, int] = (128, 128, 128)
    base_channels: int = 32
    max_channels: int = 320
    epochs: int = 1000
    warmup_epochs: int | None = None
    iterations_per_epoch: int = 50
    tolerance: float = 0.05
    patience: int = 10
    accuracy_window: int = 10
    schedule_mode: ScheduleMode = "self_supervised"
    lur: tuple[int, int] = (1, 1)
    unlearn_stages: tuple[int, ...] | None = None
    batch_size: int = 8
    seed: int = 0
    seg_optimizer: Literal["sgd", "adam"] = "sgd"
    lr_seg: float = 1e-2
    lr_classifier: float = 1e-3
    lr_unlearn: float = 1e-4
    weight_decay: float = 3e-5
    lr_decay: Literal["poly", "none"] = "poly"  # segmentation optimizer only
    foreground_fraction: float = 0.5
    val_every: int = 1
    val_mirroring: bool = True
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    @property
    def effective_warmup(self) -> int:
        if self.warmup_epochs is None:
            return max(1, round(0.1 * self.epochs))
        return self.warmup_epochs

    @property
    def effective_unlearn_stages(self) -> tuple[int, ...]:
        if self.unlearn_stages is None:
            d = self.encoder_depth
            return tuple(s for s in (d - 2, d - 1, d) if s >= 1)
        return tuple(sorted(self.unlearn_stages))

    def stage_sizes(self) -> list[tuple[int, int, int]]:
        """Spatial extent of each encoder stage, shallowest first."""
        return [
            tuple(p // 2 ** (x - 1) for p in self.patch_size)
            for x in range(1, self.encoder_depth + 1)
        ]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for key, value in list(d.items()):
            if isinstance(value, tuple):
                d[key] = list(value)
        d["augmentation"] = {
            k: list(v) if isinstance(v, tuple) else v for k, v in d["augmentation"].items()
        }
        return d

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(raw)
        aug = kw.pop("augmentation", None) or {}
        aug_known = {f.name for f in fields(AugmentationConfig)}
        bad = set(aug) - aug_known
        if bad:
            raise ConfigError(f"unknown augmentation keys: {sorted(bad)}")
        aug = {k: tuple(v) if isinstance(v, list) else v for k, v in aug.items()}
        if isinstance(kw.get("patch_size"), int):
            kw["patch_size"] = (kw["patch_size"],) * 3
        for key in ("patch_size", "lur", "unlearn_stages"):
            if kw.get(key) is not None:
                kw[key] = tuple(int(v) for v in kw[key])
        return cls(augmentation=AugmentationConfig(**aug), **kw)


def uba(domains: DomainSet | int, tolerance: float) -> float:
    """Upper-bound accuracy: chance level plus tolerance."""
    n = domains if isinstance(domains, int) else domains.n
    if n < 2:
        raise DomainCountError("upper-bound accuracy needs at least two domains")
    upper = 1.0 - 1.0 / n
    if not 0.0 <= tolerance <= upper:
        raise ToleranceOutOfRangeError(
            f"tolerance {tolerance} outside [0, {upper:.6g}] for {n} domains"
        )
    return 1.0 / n + tolerance


def validate_config(cfg: RunConfig, domains: DomainSet | int) -> RunConfig:
    """Check every run invariant; return ``cfg`` unchanged or raise a ConfigError."""
    n = domains if isinstance(domains, int) else domains.n
    if n < 2:
        raise DomainCountError(f"unlearning needs at least 2 domains, got {n}")
    d = cfg.encoder_depth
    if d < 2:
        raise PatchSizeError(f"encoder_depth must be >= 2, got {d}")
    if len(cfg.patch_size) != 3 or any(p <= 0 for p in cfg.patch_size):
        raise PatchSizeError(f"patch_size must be 3 positive integers, got {cfg.patch_size}")
    factor = 2 ** (d - 1)
    if any(p % factor for p in cfg.patch_size):
        raise PatchSizeError(
            f"patch_size {cfg.patch_size} not divisible by 2^(D-1) = {factor}"
        )
    if any(p // factor < 4 for p in cfg.patch_size):
        raise PatchSizeError(
            f"deepest stage of patch {cfg.patch_size} is smaller than 4 voxels per axis"
        )
    if cfg.base_channels < 1:
        raise ConfigError("base_channels must be positive")
    if cfg.batch_size < 1 or cfg.batch_size % n:
        raise BatchNotDivisibleError(
            f"batch_size {cfg.batch_size} is not a positive multiple of {n} domains"
        )
    if cfg.epochs < 1:
        raise ConfigError("epochs must be positive")
    if not 0 <= cfg.effective_warmup <= cfg.epochs:
        raise WarmupExceedsTotalError(
            f"warm-up {cfg.effective_warmup} exceeds total epochs {cfg.epochs}"
        )
    uba(n, cfg.tolerance)
    if cfg.patience < 1:
        raise ConfigError("patience must be a positive integer")
    if cfg.accuracy_window < 1:
        raise ConfigError("accuracy_window must be a positive integer")
    if cfg.iterations_per_epoch < 1:
        raise ConfigError("iterations_per_epoch must be positive")
    stages = cfg.effective_unlearn_stages
    if len(set(stages)) != len(stages) or any(not 1 <= s <= d for s in stages):
        raise UnlearnStagesError(f"unlearn_stages {stages} not a subset of 1..{d}")
    if cfg.schedule_mode not in ("self_supervised", "fixed_lur"):
        raise ConfigError(f"unknown schedule_mode {cfg.schedule_mode!r}")
    if cfg.schedule_mode == "fixed_lur":
        if len(cfg.lur) != 2 or min(cfg.lur) < 1:
            raise LURError(f"fixed_lur needs learn_steps >= 1 and unlearn_steps >= 1, got {cfg.lur}")
    if cfg.lr_decay not in ("poly", "none"):
        raise ConfigError(f"unknown lr_decay {cfg.lr_decay!r}")
    if not 0.0 <= cfg.foreground_fraction <= 1.0:
        raise ConfigError("foreground_fraction must lie in [0, 1]")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
