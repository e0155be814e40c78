"""Command-line entry point: tile, train, predict, evaluate, profile, synth.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import dataio
from .core import UAVID_LABELS, ClassMask, LabelSet, ScoreMap, softmax_pixelwise
from .infer import (
    argmax_decode,
    compute_window_grid,
    ensemble_geometric_mean,
    save_scores,
    stitch_predict,
    tta_flip_predict,
)
from .metrics import (
    ConfusionMatrix,
    accumulate_confusion,
    iou_per_class,
    mean_iou,
    measure_latency,
    write_confusion,
    write_efficiency,
    write_iou_report,
)
from .model import ModelConfig, Segmenter, init_weights, load_weights, make_config, save_weights
from .train import TrainConfig, normalize, train_loop

log = logging.getLogger("uavseg")

THREADS_ENV = "UAVSEG_THREADS"


class UsageError(Exception):
    """Bad flags, configs or inputs detected before work starts (exit 2)."""


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: Path
    out: Path


def _model_from_section(section: dict) -> ModelConfig:
    section = dict(section)
    if "num_classes" not in section:
        raise ValueError("model.num_classes must be given explicitly")
    variant = section.pop("variant", None)
    if variant is not None:
        return make_config(variant, **section)
    return ModelConfig.from_dict(section)


def load_run_config(path: Optional[Path], data: Path, out: Path, overrides: dict) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    if "model" not in raw:
        raise UsageError("config needs a 'model' section")
    train_section = {**raw.get("train", {}), **{k: v for k, v in overrides.items() if v is not None}}
    try:
        model = _model_from_section(raw["model"])
        train = TrainConfig.from_dict(train_section)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None
    return RunConfig(model, train, Path(data), Path(out))


def sidecar_path(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".json")


def write_checkpoint(path: Path, store, cfg: ModelConfig, tcfg: TrainConfig) -> None:
    save_weights(path, store, cfg)
    meta = {"model": cfg.to_dict(), "mean": list(tcfg.mean), "std": list(tcfg.std)}
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_checkpoint(path: Path) -> Tuple[Segmenter, Tuple[float, ...], Tuple[float, ...]]:
    meta_path = sidecar_path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    if not meta_path.exists():
        raise UsageError(f"{path}: missing model description {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        cfg = ModelConfig.from_dict(meta["model"])
        store = load_weights(path, cfg)
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"{path}: {e}") from None
    return Segmenter(cfg, store), tuple(meta.get("mean", TrainConfig.mean)), tuple(meta.get("std", TrainConfig.std))


def _labels(palette: Optional[str]) -> LabelSet:
    if palette is None:
        return UAVID_LABELS
    try:
        return dataio.read_palette(palette)
    except (OSError, ValueError) as e:
        raise UsageError(f"bad palette: {e}") from None


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


# ---------------------------------------------------------------------------
# commands

def cmd_tile(args) -> int:
    labels = _labels(args.palette)
    root, out = Path(args.input_dir), Path(args.output_dir)
    if args.clip < 1 or not 1 <= args.stride <= args.clip:
        raise UsageError("need clip >= 1 and 1 <= stride <= clip")
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    try:
        indices = [dataio.index_dataset(root, s) for s in splits]
    except ValueError as e:
        raise UsageError(str(e)) from None
    if not any(len(ix) for ix in indices):
        raise UsageError(f"no images found under {root}")
    # validate every grid before writing anything
    plans = []
    for ix in indices:
        for item in ix.items:
            try:
                grid = dataio.compute_tile_grid(item.width, item.height, args.clip, args.stride)
            except ValueError as e:
                raise UsageError(f"{item.image_path}: {e}") from None
            plans.append((ix.split, item, grid))
    manifest = []
    counts = {s: 0 for s in splits}

    def write(plan):
        split, item, grid = plan
        img = dataio.load_image(item.image_path)
        mask = dataio.load_mask(item.label_path, labels) if item.label_path else None
        stem = f"{item.image_path.parent.parent.name}_{item.image_path.stem}"
        (out / split / "images").mkdir(parents=True, exist_ok=True)
        if mask is not None:
            (out / split / "labels").mkdir(parents=True, exist_ok=True)
        for rect, (t_img, t_mask) in zip(grid.origins, dataio.extract_tiles(img, mask, grid)):
            name = f"{stem}_{rect.x}_{rect.y}.png"
            dataio.save_rgb(out / split / "images" / name, t_img)
            if t_mask is not None:
                dataio.save_index_mask(out / split / "labels" / name, t_mask)

    for split, item, grid in plans:
        counts[split] += len(grid)
        manifest.extend((str(item.image_path), r) for r in grid.origins)
    if not args.dry_run:
        out.mkdir(parents=True, exist_ok=True)
        with ThreadPoolExecutor(_threads(args)) as pool:
            list(pool.map(write, plans))
    manifest_path = Path(args.manifest) if args.manifest else out / "manifest.csv"
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_manifest(manifest_path, manifest)
    for ix in indices:
        print(f"{ix.split}: {counts[ix.split]} tiles from {len(ix)} images")
    return 0


def _load_tiles(root: Path, split: str, labels: LabelSet, k: int):
    img_dir, lbl_dir = root / split / "images", root / split / "labels"
    paths = sorted(img_dir.glob("*.png"))
    if not paths:
        raise UsageError(f"no tiles found in {img_dir}")
    samples = []
    for p in paths:
        lbl = lbl_dir / p.name
        if not lbl.exists():
            raise UsageError(f"missing label tile {lbl}")
        try:
            mask = dataio.load_mask(lbl, labels)
            mask.check_labels(k)
        except ValueError as e:
            raise UsageError(f"{lbl}: {e}") from None
        samples.append((dataio.load_image(p), mask))
    return samples


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "max_epochs": args.max_epochs, "batch_size": args.batch_size, "lr_init": args.lr,
                 "patience": args.patience}
    rc = load_run_config(args.config, args.data, args.out, overrides)
    labels = _labels(args.palette)
    train_set = _load_tiles(rc.data, "train", labels, rc.model.num_classes)
    val_set = _load_tiles(rc.data, "val", labels, rc.model.num_classes)
    rc.out.mkdir(parents=True, exist_ok=True)
    (rc.out / "config.json").write_text(
        json.dumps({"model": rc.model.to_dict(), "train": rc.train.to_dict()}, indent=2) + "\n"
    )
    result = train_loop(
        train_set,
        val_set,
        rc.model,
        rc.train,
        history_path=rc.out / "history.csv",
        record_time=not args.no_timing,
        on_epoch=lambda r: print(
            f"epoch {r.epoch}: train {r.train_loss:.4f} val {r.val_loss:.4f} mIoU {r.val_miou:.4f}", flush=True
        ),
    )
    write_checkpoint(rc.out / "best.segw", result.best, rc.model, rc.train)
    write_checkpoint(rc.out / "last.segw", result.last, rc.model, rc.train)
    print(f"best epoch {result.best_epoch}; checkpoints in {rc.out}")
    return 0


def _inputs(path: Path) -> List[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.png"))
    elif path.exists():
        files = [path]
    else:
        files = []
    if not files:
        raise UsageError(f"no input images at {path}")
    return files


def cmd_predict(args) -> int:
    ckpts = [Path(c) for group in args.checkpoint for c in group.split(",") if c]
    members = [read_checkpoint(c) for c in ckpts]
    ks = {m.num_classes for m, _, _ in members}
    if len(ks) != 1:
        raise UsageError(f"checkpoints disagree on number of classes: {sorted(ks)}")
    labels = _labels(args.palette)
    if ks.pop() > len(labels):
        raise UsageError("palette has fewer colors than the model has classes")
    if not 0 <= args.overlap < args.window:
        raise UsageError("need 0 <= overlap < window")
    files = _inputs(Path(args.input))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = _threads(args)
    predict = tta_flip_predict if args.tta else stitch_predict
    for f in files:
        raw = dataio.load_image(f)
        grid = compute_window_grid(raw.width, raw.height, args.window, args.overlap)
        outputs = [predict(normalize(raw, mean, std), model, grid, workers) for model, mean, std in members]
        if len(outputs) == 1:
            scores: ScoreMap = outputs[0]
        else:
            scores = ensemble_geometric_mean([softmax_pixelwise(o) for o in outputs])
        mask = argmax_decode(scores)
        dataio.save_index_mask(out / f"{f.stem}_index.png", mask)
        dataio.save_rgb(out / f"{f.stem}_color.png", dataio.render_mask(mask, labels))
        if args.dump_scores:
            save_scores(out / f"{f.stem}.smap", scores)
        print(f"{f.name}: {len(grid)} windows -> {out / (f.stem + '_index.png')}")
    return 0


def _find_prediction(pred_dir: Path, stem: str) -> Optional[Path]:
    for name in (f"{stem}_index.png", f"{stem}.png"):
        if (pred_dir / name).exists():
            return pred_dir / name
    return None


def cmd_evaluate(args) -> int:
    labels = _labels(args.palette)
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    gts = sorted(gt_dir.glob("*.png"))
    if not gts:
        raise UsageError(f"no ground-truth masks in {gt_dir}")
    pairs = []
    for g in gts:
        p = _find_prediction(pred_dir, g.stem)
        if p is None:
            raise UsageError(f"no prediction for {g.name} in {pred_dir}")
        pairs.append((p, g))

    def one(pair) -> ConfusionMatrix:
        p, g = pair
        pm, gm = dataio.load_mask(p, labels), dataio.load_mask(g, labels)
        if pm.data.shape != gm.data.shape:
            raise UsageError(f"{p.name} and {g.name} differ in size")
        return accumulate_confusion(pm, gm, ConfusionMatrix.zeros(len(labels)))

    try:
        with ThreadPoolExecutor(_threads(args)) as pool:
            parts = list(pool.map(one, pairs))
    except ValueError as e:
        raise UsageError(str(e)) from None
    cm = ConfusionMatrix.zeros(len(labels))
    for part in parts:
        cm = cm + part
    out = Path(args.out) if args.out else pred_dir
    out.mkdir(parents=True, exist_ok=True)
    write_iou_report(out / "iou.csv", cm, labels)
    write_confusion(out / "confusion.csv", cm, labels)
    write_confusion(out / "confusion_normalized.csv", cm, labels, normalized=True)
    ious = iou_per_class(cm)
    for name, v in zip(labels.names, ious):
        print(f"{name:>16s}: {'   n/a' if np.isnan(v) else f'{100 * v:6.2f}'}")
    print(f"{'mIoU':>16s}: {100 * mean_iou(ious):6.2f}")
    return 0


def cmd_profile(args) -> int:
    try:
        cfg = make_config(args.variant, num_classes=args.num_classes)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.runs < 1 or args.warmup < 0 or args.image_size < 1:
        raise UsageError("need runs >= 1, warmup >= 0, image-size >= 1")
    model = Segmenter(cfg, init_weights(cfg, args.seed))
    rep = measure_latency(model, cfg, args.image_size, args.warmup, args.runs, name=f"SegFormer-{args.variant}")
    print(f"{rep.model}: {rep.parameters / 1e6:.1f}M parameters, {rep.image_size}x{rep.image_size}, "
          f"{rep.latency_ms:.2f} ms, {rep.fps:.2f} FPS")
    if args.out:
        write_efficiency(args.out, [rep])
    return 0


def cmd_synth(args) -> int:
    from .synthetic import blob_dataset

    out = Path(args.out)
    for split, n, seed in (("train", args.train, args.seed), ("val", args.val, args.seed + 1)):
        (out / split / "images").mkdir(parents=True, exist_ok=True)
        (out / split / "labels").mkdir(parents=True, exist_ok=True)
        for i, (img, mask) in enumerate(blob_dataset(n, args.size, seed)):
            dataio.save_rgb(out / split / "images" / f"blob_{i:04d}.png", img)
            dataio.save_index_mask(out / split / "labels" / f"blob_{i:04d}.png", mask)
        print(f"{split}: {n} images")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uavseg", description="UAV semantic segmentation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--threads", type=int, default=None, help=f"worker count (default ${THREADS_ENV} or 1)")
        p.add_argument("--palette", default=None, help="palette file: 'index name R G B' per line")

    p = sub.add_parser("tile", help="cut dataset frames into fixed-size tiles")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--clip", type=int, default=512)
    p.add_argument("--stride", type=int, default=512)
    p.add_argument("--manifest", default=None)
    p.add_argument("--splits", default="train,val")
    p.add_argument("--dry-run", action="store_true", help="count tiles and write the manifest only")
    common(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train on a tiled dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--no-timing", action="store_true", help="write 0 in the seconds column for reproducible logs")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="sliding-window prediction, optional TTA and ensembling")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--overlap", type=int, default=128)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--dump-scores", action="store_true")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="IoU / mIoU and confusion matrices")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", help="parameter count, latency and FPS")
    p.add_argument("--variant", required=True)
    p.add_argument("--image-size", type=int, default=1024)
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("synth", help="write a synthetic two-class blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
