"""Dataset layout, palette codecs, tile grids and class statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .core import IGNORE_INDEX, ClassMask, LabelSet, PlaneImage, Rect, UAVID_LABELS

SPLITS = ("train", "val", "test")


class DimensionError(ValueError):
    pass


class DecodeError(ValueError):
    pass


class EncodeError(ValueError):
    pass


class LayoutError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tile grids

def axis_origins(dim: int, clip: int, stride: int) -> List[int]:
    """Origins 0, stride, 2*stride, ... plus an edge-aligned final origin."""
    origins = list(range(0, dim - clip + 1, stride))
    if origins[-1] + clip < dim:
        origins.append(dim - clip)
    return origins


@dataclass(frozen=True)
class TileGrid:
    image_w: int
    image_h: int
    clip: int
    stride: int
    origins: Tuple[Rect, ...]

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def x_origins(self) -> List[int]:
        return sorted({r.x for r in self.origins})

    @property
    def y_origins(self) -> List[int]:
        return sorted({r.y for r in self.origins})


def compute_tile_grid(w: int, h: int, clip: int, stride: int) -> TileGrid:
    if clip < 1:
        raise ValueError(f"clip must be >= 1, got {clip}")
    if not 1 <= stride <= clip:
        raise ValueError(f"stride must be in [1, clip={clip}], got {stride}")
    if clip > w:
        raise DimensionError(f"clip {clip} exceeds image width {w}")
    if clip > h:
        raise DimensionError(f"clip {clip} exceeds image height {h}")
    xs = axis_origins(w, clip, stride)
    ys = axis_origins(h, clip, stride)
    rects = tuple(Rect(x, y, clip, clip) for y in ys for x in xs)
    return TileGrid(w, h, clip, stride, rects)


def extract_tiles(
    img: PlaneImage, mask: Optional[ClassMask], grid: TileGrid
) -> List[Tuple[PlaneImage, Optional[ClassMask]]]:
    if (img.width, img.height) != (grid.image_w, grid.image_h):
        raise DimensionError(
            f"grid built for {grid.image_w}x{grid.image_h}, image is {img.width}x{img.height}"
        )
    if mask is not None and (mask.width, mask.height) != (img.width, img.height):
        raise DimensionError("mask and image dimensions differ")
    tiles = []
    for r in grid.origins:
        rows, cols = r.slices
        t_mask = None if mask is None else ClassMask(mask.data[rows, cols].copy(), mask.ignore_value)
        tiles.append((PlaneImage(img.data[rows, cols].copy()), t_mask))
    return tiles


# ---------------------------------------------------------------------------
# palette codecs

def _to_uint8_rgb(rgb: Union[PlaneImage, np.ndarray]) -> np.ndarray:
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DecodeError(f"expected a 3-channel image, got shape {a.shape}")
    if a.dtype == np.uint8:
        return a
    return np.clip(np.rint(a.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def _pack(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.uint32)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


_SENTINEL_KEY = 0xFFFFFF


def decode_mask(rgb: Union[PlaneImage, np.ndarray], labels: LabelSet = UAVID_LABELS) -> ClassMask:
    """Map palette colors to class indices.

    Accepts either a uint8 (H, W, 3) array or a PlaneImage holding [0, 1] values.
    White decodes to the ignore sentinel unless the palette claims it.
    """
    a = _to_uint8_rgb(rgb)
    keys = _pack(a)
    palette = _pack(labels.colors)
    order = np.argsort(palette)
    sorted_pal = palette[order]
    pos = np.searchsorted(sorted_pal, keys)
    pos = np.clip(pos, 0, len(sorted_pal) - 1)
    found = sorted_pal[pos] == keys
    sentinel = ~found & (keys == _SENTINEL_KEY)
    found |= sentinel
    if not found.all():
        y, x = np.argwhere(~found)[0]
        raise DecodeError(f"color {tuple(int(v) for v in a[y, x])} at (x={x}, y={y}) not in palette")
    return ClassMask(np.where(sentinel, IGNORE_INDEX, order[pos]).astype(np.uint8))


def encode_mask(mask: ClassMask, labels: LabelSet = UAVID_LABELS) -> PlaneImage:
    """Render class indices as palette colors in [0, 1]; the sentinel renders white."""
    return PlaneImage(render_mask(mask, labels).astype(np.float32) / 255.0)


def render_mask(mask: ClassMask, labels: LabelSet = UAVID_LABELS) -> np.ndarray:
    """uint8 (H, W, 3) color rendering of a mask."""
    d = mask.data
    sentinel = d == mask.ignore_value
    bad = ~sentinel & (d >= len(labels))
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise EncodeError(f"class index {d[y, x]} at (x={x}, y={y}) outside 0..{len(labels) - 1}")
    lut = np.full((256, 3), 255, dtype=np.uint8)
    lut[: len(labels)] = labels.colors
    return lut[d]


def class_distribution(masks: Iterable[ClassMask], labels: LabelSet = UAVID_LABELS) -> np.ndarray:
    """Per-class pixel fractions over all non-sentinel pixels."""
    k = len(labels)
    counts = np.zeros(k, dtype=np.int64)
    for m in masks:
        valid = m.data[m.data != m.ignore_value]
        if valid.size and valid.max() >= k:
            raise ValueError(f"class index {valid.max()} outside label set")
        counts += np.bincount(valid, minlength=k)[:k]
    total = counts.sum()
    if total == 0:
        raise ValueError("class_distribution needs at least one scored pixel")
    return counts / total


# ---------------------------------------------------------------------------
# files

def read_palette(path: Union[str, Path]) -> LabelSet:
    """Read ``index name R G B`` lines; names may contain spaces."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 5:
            raise ValueError(f"{path}:{lineno}: expected 'index name R G B'")
        try:
            idx = int(parts[0])
            color = tuple(int(v) for v in parts[-3:])
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: {e}") from None
        rows.append((idx, " ".join(parts[1:-3]), color))
    rows.sort(key=lambda r: r[0])
    return LabelSet.from_rows(rows)


def write_palette(path: Union[str, Path], labels: LabelSet = UAVID_LABELS) -> None:
    lines = [f"{e.index} {e.name} {e.color[0]} {e.color[1]} {e.color[2]}" for e in labels]
    Path(path).write_text("\n".join(lines) + "\n")


def load_image(path: Union[str, Path]) -> PlaneImage:
    """Decode an 8-bit RGB file to [0, 1] reals."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float32)
    return PlaneImage(a / 255.0)


def load_rgb(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def image_size(path: Union[str, Path]) -> Tuple[int, int]:
    """(width, height) from the file header without decoding pixels."""
    with Image.open(path) as im:
        return im.size


def load_mask(path: Union[str, Path], labels: LabelSet = UAVID_LABELS) -> ClassMask:
    """Read a label file: grayscale files hold indices, RGB files palette colors."""
    with Image.open(path) as im:
        if im.mode in ("L", "P", "I", "I;16"):
            a = np.asarray(im.convert("L") if im.mode == "P" else im)
            m = ClassMask(a.astype(np.uint8))
            m.check_labels(len(labels))
            return m
        return decode_mask(np.asarray(im.convert("RGB")), labels)


def save_rgb(path: Union[str, Path], rgb: Union[PlaneImage, np.ndarray]) -> None:
    Image.fromarray(_to_uint8_rgb(rgb), mode="RGB").save(path)


def save_index_mask(path: Union[str, Path], mask: ClassMask) -> None:
    Image.fromarray(np.ascontiguousarray(mask.data), mode="L").save(path)


@dataclass(frozen=True)
class DatasetItem:
    image_path: Path
    label_path: Optional[Path]
    width: int
    height: int


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    split: str
    items: Tuple[DatasetItem, ...]

    def __len__(self) -> int:
        return len(self.items)


def index_dataset(root: Union[str, Path], split: str, require_labels: bool = False) -> DatasetIndex:
    """Scan ``<root>/<split>/seq*/Images/*.png`` with labels under ``Labels/``."""
    if split not in SPLITS:
        raise LayoutError(f"unknown split {split!r}")
    root = Path(root)
    items = []
    for img_path in sorted(root.glob(f"{split}/seq*/Images/*.png")):
        lbl = img_path.parent.parent / "Labels" / img_path.name
        w, h = image_size(img_path)
        if lbl.exists():
            lw, lh = image_size(lbl)
            if (lw, lh) != (w, h):
                raise LayoutError(f"{lbl}: label is {lw}x{lh}, image is {w}x{h}")
        elif require_labels:
            raise LayoutError(f"missing label for {img_path}")
        items.append(DatasetItem(img_path, lbl if lbl.exists() else None, w, h))
    return DatasetIndex(root, split, tuple(items))


MANIFEST_FIELDS = ("image_path", "x", "y", "w", "h")


def write_manifest(path: Union[str, Path], rows: Sequence[Tuple[str, Rect]]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(MANIFEST_FIELDS)
        for image_path, r in rows:
            wr.writerow([image_path, r.x, r.y, r.w, r.h])


def read_manifest(path: Union[str, Path]) -> List[Tuple[str, Rect]]:
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if tuple(rd.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: expected columns {','.join(MANIFEST_FIELDS)}")
        return [
            (row["image_path"], Rect(int(row["x"]), int(row["y"]), int(row["w"]), int(row["h"])))
            for row in rd
        ]


