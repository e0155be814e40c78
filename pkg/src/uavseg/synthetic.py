"""Synthetic two-class blob scenes for desk-scale training checks."""
from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .core import ClassMask, PlaneImage


def blob_sample(rng: np.random.Generator, size: int = 64) -> Tuple[PlaneImage, ClassMask]:
    """Noisy background with 1-3 brighter, differently tinted ellipses (class 1)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.15, 0.85, 2) * size
        ry, rx = rng.uniform(0.08, 0.22, 2) * size
        mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    bg = rng.uniform(0.15, 0.45) + rng.uniform(-0.05, 0.05, 3)
    fg = rng.uniform(0.55, 0.85) + rng.uniform(-0.05, 0.05, 3)
    img = np.where(mask[..., None], fg, bg) + rng.normal(0.0, 0.06, (size, size, 3))
    return PlaneImage(np.clip(img, 0.0, 1.0).astype(np.float32)), ClassMask(mask.astype(np.uint8))


def blob_dataset(n: int, size: int = 64, seed: int = 0) -> List[Tuple[PlaneImage, ClassMask]]:
    rng = np.random.default_rng(seed)
    return [blob_sample(rng, size) for _ in range(n)]
