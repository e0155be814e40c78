"""Shared raster containers and the UAVid class taxonomy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence, Tuple, Union

import numpy as np

IGNORE_INDEX = 255

RGB = Tuple[int, int, int]


@dataclass(frozen=True)
class LabelEntry:
    index: int
    name: str
    color: RGB


@dataclass(frozen=True)
class LabelSet:
    """Ordered class list with render colors; indices must be 0..K-1."""

    entries: Tuple[LabelEntry, ...]

    def __post_init__(self) -> None:
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ValueError("LabelSet needs at least one class")
        indices = [e.index for e in entries]
        if indices != list(range(len(entries))):
            raise ValueError(f"class indices must be 0..K-1 in order, got {indices}")
        colors = [tuple(e.color) for e in entries]
        if len(set(colors)) != len(colors):
            raise ValueError("class colors must be pairwise distinct")
        for c in colors:
            if len(c) != 3 or any(not 0 <= v <= 255 for v in c):
                raise ValueError(f"invalid 8-bit RGB color {c}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[LabelEntry]:
        return iter(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def colors(self) -> np.ndarray:
        """(K, 3) uint8 palette."""
        return np.array([e.color for e in self.entries], dtype=np.uint8)

    @classmethod
    def from_rows(cls, rows: Sequence[Tuple[int, str, RGB]]) -> "LabelSet":
        return cls(tuple(LabelEntry(int(i), str(n), tuple(int(v) for v in c)) for i, n, c in rows))


# Column order of the UAVid results table; colors are the dataset's published codes.
UAVID_LABELS = LabelSet.from_rows(
    [
        (0, "Clutter", (0, 0, 0)),
        (1, "Buildings", (128, 0, 0)),
        (2, "Road", (128, 64, 128)),
        (3, "Tree", (0, 128, 0)),
        (4, "Low vegetation", (128, 128, 0)),
        (5, "Moving car", (64, 0, 128)),
        (6, "Static car", (192, 0, 192)),
        (7, "Human", (64, 64, 0)),
    ]
)


def _frozen(a: np.ndarray) -> np.ndarray:
    # read-only view; the caller's array keeps its own flags
    v = np.ascontiguousarray(a).view()
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.x < 0 or self.y < 0 or self.w < 1 or self.h < 1:
            raise ValueError(f"invalid rect {self}")

    @property
    def slices(self) -> Tuple[slice, slice]:
        """(row slice, column slice) for indexing an (H, W, ...) array."""
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


@dataclass(frozen=True)
class PlaneImage:
    """Image stored as an (H, W, C) float32 array."""

    data: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.data)
        if a.ndim != 3 or a.shape[0] < 1 or a.shape[1] < 1 or a.shape[2] < 1:
            raise ValueError(f"PlaneImage expects (H, W, C) with H, W, C >= 1, got {a.shape}")
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float32)
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True)
class ClassMask:
    """Per-pixel class indices, (H, W) uint8; ``ignore_value`` marks unscored pixels."""

    data: np.ndarray
    ignore_value: int = IGNORE_INDEX

    def __post_init__(self) -> None:
        a = np.asarray(self.data)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"ClassMask expects (H, W), got {a.shape}")
        if a.dtype != np.uint8:
            if a.size and (a.min() < 0 or a.max() > 255):
                raise ValueError("class indices must fit in one byte")
            a = a.astype(np.uint8)
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def check_labels(self, num_classes: int) -> None:
        bad = (self.data != self.ignore_value) & (self.data >= num_classes)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise ValueError(
                f"class index {self.data[y, x]} at (x={x}, y={y}) outside 0..{num_classes - 1}"
            )

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


LOGITS = "logits"
PROBABILITIES = "probabilities"


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel class scores, (H, W, K) with classes innermost."""

    data: np.ndarray
    kind: str = LOGITS

    def __post_init__(self) -> None:
        if self.kind not in (LOGITS, PROBABILITIES):
            raise ValueError(f"unknown score kind {self.kind!r}")
        a = np.asarray(self.data)
        if a.ndim != 3 or min(a.shape) < 1:
            raise ValueError(f"ScoreMap expects (H, W, K), got {a.shape}")
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float32)
        if __debug__ and self.kind == PROBABILITIES:
            if not np.all((a >= 0) & (a <= 1)):
                raise ValueError("probabilities must lie in [0, 1]")
            if not np.allclose(a.sum(axis=-1), 1.0, atol=1e-5, rtol=0):
                raise ValueError("per-pixel probabilities must sum to 1")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def classes(self) -> int:
        return self.data.shape[2]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


Raster = Union[PlaneImage, ClassMask, ScoreMap]


def softmax_pixelwise(m: ScoreMap) -> ScoreMap:
    """Convert a logits map to per-pixel class probabilities."""
    if m.kind != LOGITS:
        raise ValueError("softmax_pixelwise expects a logits map")
    if not np.all(np.isfinite(m.data)):
        raise ValueError("logits contain non-finite values")
    return ScoreMap(softmax(m.data, axis=-1), PROBABILITIES)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def flip_horizontal(r: Raster) -> Raster:
    """Mirror columns: column j goes to column width-1-j."""
    flipped = r.data[:, ::-1]
    if isinstance(r, ClassMask):
        return ClassMask(flipped, r.ignore_value)
    if isinstance(r, ScoreMap):
        return ScoreMap(flipped, r.kind)
    if isinstance(r, PlaneImage):
        return PlaneImage(flipped)
    raise TypeError(f"cannot flip {type(r).__name__}")
