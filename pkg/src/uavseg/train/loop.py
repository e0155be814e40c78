"""Epoch loop: augment, batch, forward, hybrid loss, backprop, AdamW."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core import ClassMask, PlaneImage
from ..metrics import ConfusionMatrix, confusion_counts, iou_per_class, mean_iou
from ..model import ModelConfig, WeightStore, init_weights
from ..model.network import as_params, forward_batch
from .augment import STREAM_DROP_PATH, STREAM_INIT, STREAM_SHUFFLE, build_augmenter, normalize, substream
from .config import TrainConfig
from .losses import hybrid_loss
from .optim import STOP, EarlyStopState, OptimizerState, adamw_step, early_stop_update, poly_lr

log = logging.getLogger(__name__)

Sample = Tuple[PlaneImage, ClassMask]
LossFn = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_mIoU", "lr", "seconds")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    lr: float
    seconds: float

    def row(self, record_time: bool = True) -> list:
        secs = self.seconds if record_time else 0.0
        return [self.epoch, f"{self.train_loss:.6f}", f"{self.val_loss:.6f}", f"{self.val_miou:.6f}",
                f"{self.lr:.6e}", f"{secs:.3f}"]


@dataclass
class TrainResult:
    best: WeightStore
    last: WeightStore
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


class HistoryWriter:
    """Per-epoch CSV rows, flushed as they are written."""

    def __init__(self, path: Optional[Union[str, Path]], record_time: bool = True):
        self.record_time = record_time
        self._f: Optional[io.TextIOBase] = open(path, "w", newline="") if path else None
        if self._f:
            csv.writer(self._f).writerow(HISTORY_FIELDS)
            self._f.flush()

    def write(self, rec: EpochRecord) -> None:
        if self._f:
            csv.writer(self._f).writerow(rec.row(self.record_time))
            self._f.flush()

    def close(self) -> None:
        if self._f:
            self._f.close()
            self._f = None


def _stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.stack([np.asarray(img.data, dtype=np.float32) for img, _ in samples])
    y = np.stack([m.data for _, m in samples])
    return x, y


def evaluate(
    samples: Sequence[Sample],
    cfg: ModelConfig,
    store: WeightStore,
    tcfg: TrainConfig,
    loss_fn: LossFn,
) -> Tuple[float, float]:
    """(mean loss, mIoU) on normalized-only inputs."""
    params = as_params(store)
    cm = ConfusionMatrix.zeros(cfg.num_classes)
    total, weight = 0.0, 0
    for i in range(0, len(samples), tcfg.batch_size):
        chunk = [(normalize(img, tcfg.mean, tcfg.std), m) for img, m in samples[i : i + tcfg.batch_size]]
        x, y = _stack(chunk)
        logits = forward_batch(x, cfg, params).data
        loss, _ = loss_fn(logits, y)
        total += loss * len(chunk)
        weight += len(chunk)
        pred = logits.argmax(axis=-1)
        cm = ConfusionMatrix(cm.counts + confusion_counts(pred, y, cfg.num_classes))
    return total / weight, mean_iou(iou_per_class(cm))


def train_loop(
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    init: Optional[WeightStore] = None,
    history_path: Optional[Union[str, Path]] = None,
    loss_fn: Optional[LossFn] = None,
    record_time: bool = True,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    if not train_set or not val_set:
        raise ValueError("train_loop needs non-empty train and validation sets")
    if loss_fn is None:
        loss_fn = lambda z, t: hybrid_loss(z, t, tcfg.dice_weight)  # noqa: E731
    store = init.copy() if init is not None else init_weights(cfg, np.random.SeedSequence([tcfg.seed, STREAM_INIT]))
    store.validate(cfg)
    augment = build_augmenter(tcfg)
    opt = OptimizerState()
    n = len(train_set)
    per_epoch = math.ceil(n / tcfg.batch_size)
    total_steps = tcfg.max_epochs * per_epoch
    stopper = EarlyStopState(tcfg.patience, "min" if tcfg.stop_on == "val_loss" else "max")
    keeper = EarlyStopState(tcfg.max_epochs, "min" if tcfg.keep_best_by == "val_loss" else "max")
    result = TrainResult(best=store.copy(), last=store)
    history = HistoryWriter(history_path, record_time)
    step = 0
    try:
        for epoch in range(tcfg.max_epochs):
            t0 = time.perf_counter()
            order = substream(tcfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
            losses = []
            lr = poly_lr(step, total_steps, tcfg)
            for b in range(per_epoch):
                idx = order[b * tcfg.batch_size : (b + 1) * tcfg.batch_size]
                x, y = _stack([augment(*train_set[i], index=int(i), epoch=epoch) for i in idx])
                params = as_params(store, requires_grad=True)
                drop_rng = substream(tcfg.seed, STREAM_DROP_PATH, step) if cfg.drop_path_rate > 0 else None
                logits = forward_batch(x, cfg, params, rng=drop_rng)
                loss, grad = loss_fn(logits.data, y)
                if not math.isfinite(loss):
                    raise FloatingPointError(f"non-finite training loss at epoch {epoch + 1}, step {step}")
                logits.backward(grad)
                lr = poly_lr(step, total_steps, tcfg)
                grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in params.items()}
                adamw_step(store, grads, opt, lr, tcfg.weight_decay)
                losses.append(loss)
                step += 1
            val_loss, val_miou = evaluate(val_set, cfg, store, tcfg, loss_fn)
            rec = EpochRecord(epoch + 1, float(np.mean(losses)), val_loss, val_miou, lr, time.perf_counter() - t0)
            result.history.append(rec)
            history.write(rec)
            if on_epoch:
                on_epoch(rec)
            log.info("epoch %d train %.4f val %.4f mIoU %.4f", rec.epoch, rec.train_loss, val_loss, val_miou)
            metric = {"val_loss": val_loss, "val_miou": val_miou}
            early_stop_update(keeper, metric[tcfg.keep_best_by])
            if keeper.best_epoch == epoch + 1:
                result.best = store.copy()
                result.best_epoch = epoch + 1
            if early_stop_update(stopper, metric[tcfg.stop_on]) == STOP:
                result.stopped_early = True
                break
    finally:
        history.close()
    result.last = store
    return result
