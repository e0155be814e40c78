"""Photometric/geometric augmentation and input standardization."""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from ..core import ClassMask, PlaneImage, flip_horizontal

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# named sub-streams of the run seed
STREAM_SHUFFLE = 0
STREAM_AUGMENT = 1
STREAM_INIT = 2
STREAM_DROP_PATH = 3


def substream(seed: int, stream: int, *counters: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, counters...)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, *counters])))


def normalize(img: PlaneImage, mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> PlaneImage:
    if img.channels != 3:
        raise ValueError(f"normalize expects 3 channels, got {img.channels}")
    std_a = np.asarray(std, dtype=np.float64)
    if std_a.shape != (3,) or np.any(std_a <= 0):
        raise ValueError(f"std components must be positive, got {tuple(std)}")
    mean_a = np.asarray(mean, dtype=np.float64)
    out = (img.data.astype(np.float64) - mean_a) / std_a
    return PlaneImage(out.astype(img.data.dtype))


def adjust_brightness_contrast(img: PlaneImage, brightness: float, contrast: float) -> PlaneImage:
    """clamp((x - 0.5) * (1 + contrast) + 0.5 + brightness, 0, 1)."""
    out = (img.data - 0.5) * (1.0 + contrast) + 0.5 + brightness
    return PlaneImage(np.clip(out, 0.0, 1.0).astype(img.data.dtype))


# full-range BT.601 luma/chroma
_KR, _KG, _KB = 0.299, 0.587, 0.114


def rgb_to_ycbcr(rgb: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = _KR * r + _KG * g + _KB * b
    return y, (b - y) / (2.0 * (1.0 - _KB)), (r - y) / (2.0 * (1.0 - _KR))


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    r = y + 2.0 * (1.0 - _KR) * cr
    b = y + 2.0 * (1.0 - _KB) * cb
    g = (y - _KR * r - _KB * b) / _KG
    return np.stack([r, g, b], axis=-1)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * n) // tiles


def _interp_weights(n: int, centers: np.ndarray):
    """For each coordinate: lower/upper tile index and weight of the upper one."""
    pos = np.arange(n, dtype=np.float64)
    hi = np.clip(np.searchsorted(centers, pos, side="right"), 1, max(len(centers) - 1, 1))
    lo = hi - 1
    if len(centers) == 1:
        return np.zeros(n, int), np.zeros(n, int), np.zeros(n)
    wt = (pos - centers[lo]) / (centers[hi] - centers[lo])
    return lo, hi, np.clip(wt, 0.0, 1.0)


def clahe_luma(y: np.ndarray, clip_limit: float, grid: Tuple[int, int]) -> np.ndarray:
    """Contrast-limited adaptive equalization of a [0, 1] luminance plane."""
    gy, gx = grid
    h, w = y.shape
    bins = np.clip(np.floor(y * 255.0 + 0.5), 0, 255).astype(np.intp)
    ey, ex = _tile_edges(h, gy), _tile_edges(w, gx)
    luts = np.empty((gy, gx, 256))
    for i in range(gy):
        for j in range(gx):
            tile = bins[ey[i] : ey[i + 1], ex[j] : ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            if np.isfinite(clip_limit):
                limit = clip_limit * tile.size / 256.0
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / 256.0
            luts[i, j] = np.cumsum(hist) / tile.size
    cy = (ey[:-1] + ey[1:] - 1) / 2.0
    cx = (ex[:-1] + ex[1:] - 1) / 2.0
    y0, y1, wy = _interp_weights(h, cy)
    x0, x1, wx = _interp_weights(w, cx)
    wy, wx = wy[:, None], wx[None, :]

    def look(ti, tj):
        return luts[ti[:, None], tj[None, :], bins]

    top = (1 - wx) * look(y0, x0) + wx * look(y0, x1)
    bottom = (1 - wx) * look(y1, x0) + wx * look(y1, x1)
    return np.clip((1 - wy) * top + wy * bottom, 0.0, 1.0)


def clahe(img: PlaneImage, clip_limit: float = 2.0, grid=8) -> PlaneImage:
    """CLAHE on the luma channel; chroma is carried through unchanged."""
    if img.channels != 3:
        raise ValueError(f"clahe expects 3 channels, got {img.channels}")
    gy, gx = (grid, grid) if np.isscalar(grid) else tuple(grid)
    if gy < 1 or gx < 1:
        raise ValueError("clahe grid must be >= 1 per axis")
    if img.height < gy or img.width < gx:
        raise ValueError(f"image {img.width}x{img.height} smaller than clahe grid {gx}x{gy}")
    y, cb, cr = rgb_to_ycbcr(img.data.astype(np.float64))
    y2 = clahe_luma(y, clip_limit, (gy, gx))
    rgb = np.clip(ycbcr_to_rgb(y2, cb, cr), 0.0, 1.0)
    return PlaneImage(rgb.astype(img.data.dtype))


class Augmenter:
    """Deterministic per-sample transform: same (seed, epoch, index) -> same output.

    Every sample consumes the same draws whether or not a transform fires, so
    changing one probability never shifts another transform's randomness.
    """

    def __init__(self, cfg, seed: int):
        self.cfg = cfg
        self.seed = seed

    def __call__(
        self, img: PlaneImage, mask: Optional[ClassMask], index: int, epoch: int = 0
    ) -> Tuple[PlaneImage, Optional[ClassMask]]:
        c = self.cfg
        u = substream(self.seed, STREAM_AUGMENT, epoch, index).random(5)
        if u[0] < c.p_flip:
            img = flip_horizontal(img)
            mask = None if mask is None else flip_horizontal(mask)
        if u[1] < c.p_brightness_contrast:
            b = (2.0 * u[2] - 1.0) * c.brightness_range
            k = (2.0 * u[3] - 1.0) * c.contrast_range
            img = adjust_brightness_contrast(img, b, k)
        if u[4] < c.p_clahe:
            img = clahe(img, c.clahe_clip_limit, c.clahe_grid)
        return normalize(img, c.mean, c.std), mask


def build_augmenter(cfg, seed: Optional[int] = None) -> Augmenter:
    return Augmenter(cfg, cfg.seed if seed is None else seed)
