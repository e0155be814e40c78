"""Sliding-window inference, flip TTA, geometric-mean ensembling, argmax decoding."""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .core import LOGITS, PROBABILITIES, ClassMask, PlaneImage, Rect, ScoreMap, flip_horizontal
from .dataio import axis_origins

Model = Callable[[PlaneImage], ScoreMap]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class WindowGrid:
    image_w: int
    image_h: int
    window: int
    overlap: int
    origins: Tuple[Rect, ...]

    @property
    def stride(self) -> int:
        return self.window - self.overlap

    def __len__(self) -> int:
        return len(self.origins)


def compute_window_grid(w: int, h: int, window: int = 1024, overlap: int = 128) -> WindowGrid:
    """Windows of side ``window`` (clamped per axis to the image) at stride window - overlap."""
    if not 0 <= overlap < window:
        raise ValueError(f"overlap must be in [0, window), got overlap={overlap}, window={window}")
    if w < 1 or h < 1:
        raise ValueError("image dimensions must be positive")
    stride = window - overlap
    ww, wh = min(window, w), min(window, h)
    xs = axis_origins(w, ww, stride)
    ys = axis_origins(h, wh, stride)
    return WindowGrid(w, h, window, overlap, tuple(Rect(x, y, ww, wh) for y in ys for x in xs))


class StitchAccumulator:
    """Per-pixel class sums plus hit counts."""

    def __init__(self, h: int, w: int, k: int, dtype=np.float32):
        self.sum = np.zeros((h, w, k), dtype=dtype)
        self.count = np.zeros((h, w), dtype=np.int32)

    def add(self, rect: Rect, scores: np.ndarray) -> None:
        rows, cols = rect.slices
        self.sum[rows, cols] += scores
        self.count[rows, cols] += 1

    def result(self) -> np.ndarray:
        if (self.count < 1).any():
            y, x = np.argwhere(self.count < 1)[0]
            raise ValueError(f"pixel (x={x}, y={y}) not covered by any window")
        return self.sum / self.count[..., None].astype(self.sum.dtype)


def stitch_predict(img: PlaneImage, model: Model, grid: WindowGrid, workers: int = 1) -> ScoreMap:
    """Average window logits over overlaps.

    Window results are accumulated in grid order regardless of ``workers``,
    so the output does not depend on the worker count.
    """
    if (grid.image_w, grid.image_h) != (img.width, img.height):
        raise ValueError(f"grid built for {grid.image_w}x{grid.image_h}, image is {img.width}x{img.height}")

    def run(rect: Rect) -> np.ndarray:
        rows, cols = rect.slices
        crop = PlaneImage(np.ascontiguousarray(img.data[rows, cols]))
        try:
            out = model(crop)
        except Exception as e:
            raise RuntimeError(f"model failed on window at (x={rect.x}, y={rect.y}): {e}") from e
        if out.data.shape[:2] != (rect.h, rect.w):
            raise ValueError(f"window at (x={rect.x}, y={rect.y}) returned {out.data.shape[:2]}")
        return out.data

    acc: Optional[StitchAccumulator] = None
    with ThreadPoolExecutor(max(workers, 1)) as pool:
        outputs = pool.map(run, grid.origins) if workers > 1 else map(run, grid.origins)
        for rect, scores in zip(grid.origins, outputs):
            if acc is None:
                acc = StitchAccumulator(img.height, img.width, scores.shape[-1], scores.dtype)
            acc.add(rect, scores)
    return ScoreMap(acc.result(), LOGITS)


def tta_flip_predict(img: PlaneImage, model: Model, grid: WindowGrid, workers: int = 1) -> ScoreMap:
    """Mean of the plain prediction and the un-mirrored prediction of the mirrored image."""
    base = stitch_predict(img, model, grid, workers)
    mirrored = flip_horizontal(stitch_predict(flip_horizontal(img), model, grid, workers))
    return ScoreMap((base.data + mirrored.data) / 2, LOGITS)


def ensemble_geometric_mean(maps: Sequence[ScoreMap]) -> ScoreMap:
    """Per-pixel renormalized geometric mean of member probabilities (log space, floored)."""
    if not maps:
        raise ValueError("ensemble needs at least one map")
    shape = maps[0].data.shape
    for m in maps:
        if m.kind != PROBABILITIES:
            raise ValueError("ensemble members must be probability maps")
        if m.data.shape != shape:
            raise ValueError(f"shape mismatch: {m.data.shape} vs {shape}")
    g = geometric_mean_fusion([m.data for m in maps])
    return ScoreMap(g.astype(maps[0].data.dtype), PROBABILITIES)


def geometric_mean_fusion(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Renormalized geometric mean over the last axis of nonnegative score arrays."""
    logs = np.zeros(np.shape(arrays[0]), dtype=np.float64)
    for a in arrays:
        logs += np.log(np.maximum(np.asarray(a, dtype=np.float64), PROB_FLOOR))
    logs /= len(arrays)
    logs -= logs.max(axis=-1, keepdims=True)
    g = np.exp(logs)
    return g / g.sum(axis=-1, keepdims=True)


def argmax_decode(m: ScoreMap) -> ClassMask:
    """Per-pixel argmax; ties go to the lowest class index."""
    return ClassMask(np.argmax(m.data, axis=-1).astype(np.uint8))


# ---------------------------------------------------------------------------
# raw score dumps: b"SMAP" | u32 w | u32 h | u32 K | u8 kind | float32 (H, W, K)

SMAP_MAGIC = b"SMAP"
_KIND_CODES = {LOGITS: 0, PROBABILITIES: 1}


def save_scores(path: Union[str, Path], m: ScoreMap) -> None:
    header = SMAP_MAGIC + struct.pack("<IIIB", m.width, m.height, m.classes, _KIND_CODES[m.kind])
    Path(path).write_bytes(header + np.ascontiguousarray(m.data, dtype="<f4").tobytes())


def load_scores(path: Union[str, Path]) -> ScoreMap:
    buf = Path(path).read_bytes()
    if buf[:4] != SMAP_MAGIC:
        raise ValueError(f"{path}: not a SMAP score dump")
    if len(buf) < 17:
        raise ValueError(f"{path}: truncated header")
    w, h, k, code = struct.unpack("<IIIB", buf[4:17])
    kinds = {v: key for key, v in _KIND_CODES.items()}
    if code not in kinds:
        raise ValueError(f"{path}: unknown kind code {code}")
    expected = 17 + 4 * w * h * k
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=17).reshape(h, w, k).astype(np.float32)
    return ScoreMap(data, kinds[code])
