"""Confusion matrices, IoU/mIoU and the latency/FPS harness."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import IGNORE_INDEX, ClassMask, LabelSet, PlaneImage


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns prediction."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    def row_normalized(self) -> np.ndarray:
        """Percent of each ground-truth class assigned to each prediction (NaN rows if empty)."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return 100.0 * self.counts / rows


def confusion_counts(pred: np.ndarray, gt: np.ndarray, k: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    valid = gt != ignore_index
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= k or p.max() >= k):
        raise ValueError(f"class index outside 0..{k - 1}")
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def accumulate_confusion(
    pred: Union[ClassMask, np.ndarray], gt: Union[ClassMask, np.ndarray], cm: ConfusionMatrix
) -> ConfusionMatrix:
    ignore = gt.ignore_value if isinstance(gt, ClassMask) else IGNORE_INDEX
    return ConfusionMatrix(cm.counts + confusion_counts(pred, gt, cm.num_classes, ignore))


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """Intersection over union per class; NaN where the class is in neither gt nor prediction."""
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - inter
    out = np.full(len(inter), np.nan)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def mean_iou(ious: Sequence[float]) -> float:
    """Mean over defined (non-NaN) classes, with a correctly rounded sum so class order cannot matter."""
    a = np.asarray(ious, dtype=np.float64)
    defined = a[~np.isnan(a)]
    if defined.size == 0:
        raise ValueError("mean IoU undefined: no class has a non-empty union")
    return math.fsum(defined.tolist()) / defined.size


@dataclass(frozen=True)
class EffReport:
    model: str
    parameters: int
    image_size: int
    latency_ms: float
    fps: float


def measure_latency(
    model: Callable[[PlaneImage], object],
    cfg=None,
    image_size: int = 1024,
    warmup: int = 10,
    runs: int = 100,
    name: str = "model",
    parameters: Optional[int] = None,
    seed: int = 0,
) -> EffReport:
    """Mean wall time of ``runs`` serial batch-1 forwards on a fixed random input."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if parameters is None and cfg is not None:
        from .model import count_parameters

        parameters = count_parameters(cfg)
    rng = np.random.default_rng(seed)
    img = PlaneImage(rng.standard_normal((image_size, image_size, 3)).astype(np.float32))
    for _ in range(warmup):
        model(img)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model(img)
        times.append(time.perf_counter() - t0)
    latency_ms = 1000.0 * float(np.mean(times))
    return EffReport(name, int(parameters or 0), image_size, latency_ms, 1000.0 / latency_ms)


# ---------------------------------------------------------------------------
# reports

def write_iou_report(path: Union[str, Path], cm: ConfusionMatrix, labels: LabelSet) -> None:
    """One row per class (name, IoU%) plus an mIoU row."""
    ious = iou_per_class(cm)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["class", "IoU%"])
        for name, v in zip(labels.names, ious):
            wr.writerow([name, "" if np.isnan(v) else f"{100.0 * v:.2f}"])
        wr.writerow(["mIoU", f"{100.0 * mean_iou(ious):.2f}"])


def write_confusion(path: Union[str, Path], cm: ConfusionMatrix, labels: LabelSet, normalized: bool = False) -> None:
    data = cm.row_normalized() if normalized else cm.counts
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["gt\\pred"] + labels.names)
        for name, row in zip(labels.names, data):
            cells = [("" if np.isnan(v) else f"{v:.2f}") for v in row] if normalized else [str(int(v)) for v in row]
            wr.writerow([name] + cells)


def write_efficiency(path: Union[str, Path], reports: Sequence[EffReport]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["model", "parameters", "image_size", "latency_ms", "fps"])
        for r in reports:
            wr.writerow([r.model, r.parameters, f"{r.image_size}x{r.image_size}", f"{r.latency_ms:.2f}", f"{r.fps:.2f}"])
