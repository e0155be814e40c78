from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Tuple

from .augment import IMAGENET_MEAN, IMAGENET_STD

METRICS = ("val_loss", "val_miou")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    lr_init: float = 1e-4
    lr_final: float = 1e-7
    poly_power: float = 1.0
    weight_decay: float = 0.01
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    dice_weight: float = 1.0
    p_flip: float = 0.5
    p_brightness_contrast: float = 0.5
    p_clahe: float = 0.3
    brightness_range: float = 0.2
    contrast_range: float = 0.2
    clahe_clip_limit: float = 2.0
    clahe_grid: int = 8
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD
    # early stopping follows validation loss; the retained weights follow validation mIoU
    stop_on: str = "val_loss"
    keep_best_by: str = "val_miou"

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must be in [0, max_epochs]")
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("need 0 < lr_final <= lr_init")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if self.weight_decay < 0 or self.dice_weight < 0:
            raise ValueError("weight_decay and dice_weight must be non-negative")
        for name in ("p_flip", "p_brightness_contrast", "p_clahe"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ValueError("mean/std need 3 entries with positive std")
        if self.clahe_grid < 1 or self.clahe_clip_limit <= 0:
            raise ValueError("clahe_grid must be >= 1 and clahe_clip_limit positive")
        if self.stop_on not in METRICS or self.keep_best_by not in METRICS:
            raise ValueError(f"stop_on/keep_best_by must be one of {METRICS}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)
