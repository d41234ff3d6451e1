"""Training loop, evaluation, and the paradigm comparison matrix.

Everything is seed-deterministic end to end: parameter init, batch order,
and augmentation draws all derive from the configured seed, so two runs of
the same config produce bit-identical checkpoints and reports.

The optimizer is Adam (lr 1e-3 by default, betas 0.9/0.999) with no
schedule; every paradigm trains under the same settings so comparisons
stay internally fair.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..backbones import ModelConfig
from ..datagen import ModalitySample, load_tiles
from ..errors import CheckpointCorrupt, ConfigInvalid
from ..fusion import PARADIGM_ORDER, Paradigm, ParadigmSpec
from ..metrics import (
    ConfusionMatrix,
    mean_acc,
    mean_iou,
    merge,
    per_class_acc,
    per_class_iou,
    report_dict,
    update,
)
from ..segnet import Batch, SegmentationModel, build_model, cross_entropy_loss, forward
from ..tensor import Tensor, tape
from ..tensor.io import load_checkpoint, load_checkpoint_meta, save_checkpoint
from .config import HarnessConfig, TrainSettings

log = logging.getLogger("rgbh.harness")


# --- optimizer -----------------------------------------------------------------

class Adam:
    """Adaptive-moment estimation over a named parameter dict."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        """One update; returns a fresh parameter dict (tensors are values)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self.m[name], self.v[name] = m, v
            stepped = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out[name] = Tensor(stepped, dtype=p.dtype, requires_grad=True)
        return out


# --- batching and augmentation ----------------------------------------------------

def assemble_batch(
    samples: Sequence[ModalitySample], height_scale: float
) -> Batch:
    """Stack samples into model-ready arrays (rgb centered, height scaled)."""
    rgb = np.stack([s.rgb for s in samples]).astype(np.float32) - 0.5
    height = np.stack([s.height for s in samples]).astype(np.float32) * height_scale
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return Batch(rgb=rgb, height=height, labels=labels)


def augment_sample(
    sample: ModalitySample, rng: np.random.Generator, crop: int, flips: bool
) -> ModalitySample:
    """Random flips and random crop, applied jointly to all modalities."""
    rgb, height, labels = sample.rgb, sample.height, sample.labels
    size = labels.shape[-1]
    if crop and crop < size:
        r0 = int(rng.integers(0, size - crop + 1))
        c0 = int(rng.integers(0, size - crop + 1))
        rgb = rgb[:, r0:r0 + crop, c0:c0 + crop]
        height = height[:, r0:r0 + crop, c0:c0 + crop]
        labels = labels[r0:r0 + crop, c0:c0 + crop]
    if flips:
        if rng.random() < 0.5:
            rgb, height, labels = rgb[:, :, ::-1], height[:, :, ::-1], labels[:, ::-1]
        if rng.random() < 0.5:
            rgb, height, labels = rgb[:, ::-1], height[:, ::-1], labels[::-1]
    return ModalitySample(
        rgb=np.ascontiguousarray(rgb),
        height=np.ascontiguousarray(height),
        labels=np.ascontiguousarray(labels),
        meta=sample.meta,
    )


def iter_batches(
    samples: Sequence[ModalitySample],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    crop: int = 0,
    flips: bool = False,
    height_scale: float = 0.05,
) -> Iterable[Batch]:
    order = np.arange(len(samples))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        if rng is not None and (flips or crop):
            chunk = [augment_sample(s, rng, crop, flips) for s in chunk]
        yield assemble_batch(chunk, height_scale)


# --- evaluation --------------------------------------------------------------------

def predict(model: SegmentationModel, batch: Batch) -> np.ndarray:
    logits = forward(model, batch)
    return np.argmax(logits.data, axis=1)


def confusion_over(
    model: SegmentationModel,
    samples: Sequence[ModalitySample],
    height_scale: float,
    batch_size: int = 8,
) -> ConfusionMatrix:
    cm = ConfusionMatrix(np.zeros((model.class_count, model.class_count), dtype=np.int64))
    for batch in iter_batches(samples, batch_size, height_scale=height_scale):
        cm = update(cm, predict(model, batch), batch.labels)
    return cm


# --- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    log_rows: list = field(default_factory=list)
    best_val_miou: Optional[float] = None
    best_epoch: int = 0


def _checkpoint_meta(model: SegmentationModel, settings: TrainSettings) -> dict:
    cfg = asdict(model.config) if hasattr(model.config, "__dataclass_fields__") else {}
    return {
        "paradigm": model.spec.kind.value,
        "backbone": model.spec.backbone,
        "model": cfg,
        "height_scale": settings.height_scale,
        "seed": settings.seed,
    }


def train(config: HarnessConfig, out_dir: Optional[Path] = None) -> TrainResult:
    """Optimize one paradigm; saves the best-on-validation checkpoint."""
    settings = config.train
    out = Path(out_dir if out_dir is not None else (settings.out or "run"))
    out.mkdir(parents=True, exist_ok=True)

    train_tiles = load_tiles(config.data_root, "train")
    val_tiles = load_tiles(config.data_root, "val")

    spec = ParadigmSpec(kind=settings.paradigm, backbone=config.model.backbone)
    model = build_model(spec, config.model, settings.seed)
    optimizer = Adam(lr=settings.lr)
    # one stream drives batch order and augmentation draws; everything
    # hangs off the configured seed
    data_rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 0x7A41]))

    best_params = {k: Tensor(v.data.copy(), dtype=v.dtype) for k, v in model.params.items()}
    best_miou = -1.0
    best_epoch = 0
    rows = []
    started = time.monotonic()
    for epoch in range(settings.epochs):
        losses = []
        for batch in iter_batches(
            train_tiles,
            settings.batch_size,
            rng=data_rng,
            crop=settings.crop,
            flips=settings.flips,
            height_scale=settings.height_scale,
        ):
            with tape() as t:
                loss = cross_entropy_loss(forward(model, batch), batch.labels)
                grads = t.backward(loss)
            named = {n: grads.get(p) for n, p in model.params.items()}
            model.params = optimizer.step(model.params, named)
            losses.append(loss.item())

        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if (epoch + 1) % settings.val_interval == 0 or epoch + 1 == settings.epochs:
            cm = confusion_over(model, val_tiles, settings.height_scale, settings.batch_size)
            miou = mean_iou(cm)
            row["val_miou"] = miou
            if miou is not None and miou > best_miou:
                best_miou = miou
                best_epoch = epoch
                best_params = {
                    k: Tensor(v.data.copy(), dtype=v.dtype) for k, v in model.params.items()
                }
        rows.append(row)
        log.info(
            "paradigm=%s seed=%d epoch=%d loss=%.4f val_miou=%s",
            settings.paradigm.value,
            settings.seed,
            epoch,
            row["loss"],
            f"{row['val_miou']:.4f}" if row.get("val_miou") is not None else "-",
        )

    log.info(
        "paradigm=%s seed=%d done in %.1fs (best val mIoU %.4f @ epoch %d)",
        settings.paradigm.value,
        settings.seed,
        time.monotonic() - started,
        max(best_miou, 0.0),
        best_epoch,
    )

    ckpt = out / "checkpoint.zip"
    save_checkpoint(ckpt, best_params, meta=_checkpoint_meta(model, settings))
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "val_miou"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in writer.fieldnames})
    return TrainResult(
        checkpoint=ckpt,
        log_rows=rows,
        best_val_miou=None if best_miou < 0 else best_miou,
        best_epoch=best_epoch,
    )


def load_model(checkpoint_path) -> tuple:
    """Rebuild a SegmentationModel from a self-describing checkpoint."""
    meta = load_checkpoint_meta(checkpoint_path)
    params = load_checkpoint(checkpoint_path, requires_grad=True)
    try:
        cfg = ModelConfig(**meta["model"])
        spec = ParadigmSpec(kind=Paradigm(meta["paradigm"]), backbone=meta["backbone"])
        height_scale = float(meta["height_scale"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorrupt(f"checkpoint meta incomplete: {exc}") from exc
    model = SegmentationModel(spec=spec, config=cfg, params=params)
    return model, height_scale


def evaluate(checkpoint_path, data_root, split: str = "test", batch_size: int = 8) -> dict:
    """Stream one split through the metrics module; JSON-ready report."""
    model, height_scale = load_model(checkpoint_path)
    tiles = load_tiles(data_root, split)
    cm = confusion_over(model, tiles, height_scale, batch_size)
    rep = report_dict(cm)
    rep["split"] = split
    rep["tiles"] = len(tiles)
    rep["paradigm"] = model.spec.kind.value
    return rep


def evaluate_sharded(checkpoint_path, data_root, split: str, shards: int) -> dict:
    """Shard the split, accumulate per-shard matrices, merge at the end."""
    model, height_scale = load_model(checkpoint_path)
    tiles = load_tiles(data_root, split)
    cm = ConfusionMatrix(np.zeros((model.class_count, model.class_count), dtype=np.int64))
    for shard in range(shards):
        part = tiles[shard::shards]
        if part:
            cm = merge(cm, confusion_over(model, part, height_scale))
    rep = report_dict(cm)
    rep["split"] = split
    rep["tiles"] = len(tiles)
    rep["paradigm"] = model.spec.kind.value
    return rep


# --- the comparison matrix ----------------------------------------------------------

def run_matrix(config: HarnessConfig, out_dir: Optional[Path] = None) -> dict:
    """Train and evaluate every (paradigm, seed) pair; tabulate results.

    Rows come out in the declared paradigm order, per-seed rows first,
    then one seed-mean row per paradigm.
    """
    out = Path(out_dir if out_dir is not None else config.matrix.out)
    out.mkdir(parents=True, exist_ok=True)
    ordered = [p for p in PARADIGM_ORDER if p in config.matrix.paradigms]
    extra = [p for p in config.matrix.paradigms if p not in ordered]
    rows = []
    for paradigm in list(ordered) + extra:
        per_seed = []
        for seed in config.matrix.seeds:
            run_cfg = HarnessConfig(
                data_root=config.data_root,
                model=config.model,
                train=TrainSettings(
                    **{
                        **asdict(config.train),
                        "paradigm": paradigm,
                        "seed": seed,
                        "out": "",
                    }
                ),
                matrix=config.matrix,
            )
            run_dir = out / f"{paradigm.value}_seed{seed}"
            result = train(run_cfg, out_dir=run_dir)
            rep = evaluate(result.checkpoint, config.data_root, "test", config.train.batch_size)
            row = {
                "paradigm": paradigm.value,
                "seed": seed,
                "iou": rep["iou"],
                "miou": rep["miou"],
                "macc": rep["macc"],
                "best_val_miou": result.best_val_miou,
            }
            rows.append(row)
            per_seed.append(row)
        mean_row = {
            "paradigm": paradigm.value,
            "seed": "mean",
            "iou": [
                (None if any(r["iou"][c] is None for r in per_seed)
                 else float(np.mean([r["iou"][c] for r in per_seed])))
                for c in range(len(per_seed[0]["iou"]))
            ],
            "miou": float(np.mean([r["miou"] for r in per_seed])),
            "macc": float(np.mean([r["macc"] for r in per_seed])),
            "best_val_miou": None,
        }
        rows.append(mean_row)
    table = {
        "paradigms": [p.value for p in list(ordered) + extra],
        "seeds": list(config.matrix.seeds),
        "rows": rows,
    }
    (out / "matrix.json").write_text(json.dumps(table, indent=1, sort_keys=True))
    (out / "matrix.csv").write_text(matrix_csv(table))
    return table


def matrix_csv(table: dict) -> str:
    """Delimited comparison table in the fixed class-column order."""
    from .. import REPORT_CLASS_NAMES

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["paradigm", "seed"] + [n.lower() for n in REPORT_CLASS_NAMES] + ["miou", "macc"]
    )
    for row in table["rows"]:
        writer.writerow(
            [row["paradigm"], row["seed"]]
            + ["" if v is None else f"{v:.6f}" for v in row["iou"]]
            + [f"{row['miou']:.6f}", f"{row['macc']:.6f}"]
        )
    return buf.getvalue()


def seed_means(table: dict) -> dict:
    return {
        row["paradigm"]: row["miou"] for row in table["rows"] if row["seed"] == "mean"
    }
