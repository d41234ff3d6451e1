"""Trainable segmentation models: parameter init, dispatch, and the loss.

A SegmentationModel is a paradigm spec, a backbone config, and a flat
{name: Tensor} parameter map. Parameter names are prefixed by branch:
"rgb." / "h." for the modality towers and "fuse." for everything at or
after the fusion seam, which is also the checkpoint naming convention.

The training objective is plain per-pixel cross entropy over non-ignored
pixels (ignore index 255). Class imbalance handling is deliberately out
of scope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .backbones import (
    CONV,
    ModelConfig,
    init_conv_decoder,
    init_conv_encoder,
    init_token_decoder,
    init_token_encoder,
)
from .errors import AllPixelsIgnored, LabelOutOfRange, ModalityMissing, ShapeMismatch
from .fusion import (
    Paradigm,
    ParadigmSpec,
    forward_cross,
    forward_early,
    forward_feature,
    forward_intermediary,
    forward_late,
    forward_single,
    init_intermediary_token,
    init_merge,
)
from .tensor import Tensor, from_op
from .transformer import HEIGHT_TAG, RGB_TAG, init_transformer_layer


@dataclass
class Batch:
    """A spatially uniform batch of co-registered modalities."""

    rgb: Optional[np.ndarray] = None  # (B,3,H,W)
    height: Optional[np.ndarray] = None  # (B,1,H,W)
    labels: Optional[np.ndarray] = None  # (B,H,W) ints, 255 = ignore

    @property
    def size(self) -> int:
        for arr in (self.rgb, self.height, self.labels):
            if arr is not None:
                return arr.shape[0]
        return 0


@dataclass
class SegmentationModel:
    spec: ParadigmSpec
    config: ModelConfig
    params: dict

    @property
    def class_count(self) -> int:
        return self.config.classes

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())


def build_model(spec: ParadigmSpec, cfg: ModelConfig, seed: int) -> SegmentationModel:
    """Initialize all parameters for one paradigm, deterministically."""
    if spec.backbone != cfg.backbone:
        raise ShapeMismatch(
            f"paradigm backbone {spec.backbone!r} != config backbone {cfg.backbone!r}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E6]))
    params: dict = {}
    conv = cfg.backbone == CONV

    def encoder(prefix: str, channels: int) -> None:
        if conv:
            init_conv_encoder(params, prefix, channels, cfg, rng)
        else:
            init_token_encoder(params, prefix, channels, cfg, rng)

    def decoder(prefix: str, in_width: int | None = None) -> None:
        if conv:
            init_conv_decoder(params, prefix, in_width or cfg.conv_widths[-1], cfg, rng)
        else:
            init_token_decoder(params, prefix, cfg, rng, in_dim=in_width)

    kind = spec.kind
    if kind == Paradigm.SINGLE_RGB:
        encoder("rgb.enc.", 3)
        decoder("rgb.dec.")
    elif kind == Paradigm.SINGLE_HEIGHT:
        encoder("h.enc.", 1)
        decoder("h.dec.")
    elif kind == Paradigm.EARLY:
        encoder("fuse.enc.", 4)
        decoder("fuse.dec.")
    elif kind == Paradigm.FEATURE:
        encoder("rgb.enc.", 3)
        encoder("h.enc.", 1)
        decoder("fuse.dec.", (2 * cfg.conv_widths[-1]) if conv else 2 * cfg.embed_dim)
    elif kind == Paradigm.LATE:
        encoder("rgb.enc.", 3)
        decoder("rgb.dec.")
        encoder("h.enc.", 1)
        decoder("h.dec.")
    elif kind == Paradigm.CROSS:
        encoder("rgb.enc.", 3)
        encoder("h.enc.", 1)
        init_transformer_layer(params, "fuse.xrgb.", cfg.stage, rng, dtype=cfg.np_dtype)
        init_transformer_layer(params, "fuse.xh.", cfg.stage, rng, dtype=cfg.np_dtype)
        init_merge(params, "fuse.merge.", cfg, rng)
        decoder("fuse.dec.", None if conv else 2 * cfg.embed_dim)
    elif kind == Paradigm.INTERMEDIARY:
        encoder("rgb.enc.", 3)
        encoder("h.enc.", 1)
        init_intermediary_token(params, "fuse.", cfg, rng)
        init_transformer_layer(params, "fuse.s1.", cfg.stage, rng, dtype=cfg.np_dtype)
        init_transformer_layer(params, "fuse.s2rgb.", cfg.stage, rng, dtype=cfg.np_dtype)
        init_transformer_layer(params, "fuse.s2h.", cfg.stage, rng, dtype=cfg.np_dtype)
        init_merge(params, "fuse.merge.", cfg, rng)
        decoder("fuse.dec.", None if conv else 2 * cfg.embed_dim)
    else:
        raise ShapeMismatch(f"unknown paradigm {kind}")
    return SegmentationModel(spec=spec, config=cfg, params=params)


NEEDS_RGB = {
    Paradigm.SINGLE_RGB,
    Paradigm.EARLY,
    Paradigm.FEATURE,
    Paradigm.LATE,
    Paradigm.CROSS,
    Paradigm.INTERMEDIARY,
}
NEEDS_HEIGHT = {
    Paradigm.SINGLE_HEIGHT,
    Paradigm.EARLY,
    Paradigm.FEATURE,
    Paradigm.LATE,
    Paradigm.CROSS,
    Paradigm.INTERMEDIARY,
}


def forward(model: SegmentationModel, batch: Batch) -> Tensor:
    """Per-pixel class logits (B,C,H,W) for one batch."""
    kind = model.spec.kind
    cfg = model.config
    dt = cfg.np_dtype
    if kind in NEEDS_RGB and batch.rgb is None:
        raise ModalityMissing(f"{kind.value} needs the rgb modality")
    if kind in NEEDS_HEIGHT and batch.height is None:
        raise ModalityMissing(f"{kind.value} needs the height modality")

    rgb = Tensor(batch.rgb, dtype=dt) if batch.rgb is not None else None
    height = Tensor(batch.height, dtype=dt) if batch.height is not None else None

    if kind == Paradigm.SINGLE_RGB:
        return forward_single(rgb, None, model.params, cfg, which=RGB_TAG)
    if kind == Paradigm.SINGLE_HEIGHT:
        return forward_single(None, height, model.params, cfg, which=HEIGHT_TAG)
    if kind == Paradigm.EARLY:
        stacked = Tensor(
            np.concatenate([batch.rgb, batch.height], axis=1), dtype=dt
        )
        return forward_early(stacked, model.params, cfg)
    if kind == Paradigm.FEATURE:
        return forward_feature(rgb, height, model.params, cfg)
    if kind == Paradigm.LATE:
        return forward_late(rgb, height, model.params, cfg)
    if kind == Paradigm.CROSS:
        return forward_cross(rgb, height, model.params, cfg)
    if kind == Paradigm.INTERMEDIARY:
        return forward_intermediary(rgb, height, model.params, cfg)
    raise ShapeMismatch(f"unknown paradigm {kind}")


def cross_entropy_loss(
    logits: Tensor, labels: np.ndarray, ignore_index: int = 255
) -> Tensor:
    """Mean negative log-softmax over non-ignored pixels.

    logits: (B,C,H,W) or (C,H,W); labels: matching (B,H,W) / (H,W) ints in
    {0..C-1} plus ignore_index. Ignored pixels contribute neither loss nor
    gradient.
    """
    squeezed = logits.ndim == 3
    ld = logits.data[None] if squeezed else logits.data
    lab = np.asarray(labels)
    if squeezed:
        lab = lab[None]
    if ld.ndim != 4 or lab.shape != (ld.shape[0],) + ld.shape[2:]:
        raise ShapeMismatch(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    if not np.issubdtype(lab.dtype, np.integer):
        raise LabelOutOfRange(f"labels must be integers, got {lab.dtype}")
    C = ld.shape[1]
    valid = lab != ignore_index
    bad = valid & ((lab < 0) | (lab >= C))
    if bad.any():
        raise LabelOutOfRange(
            f"labels outside 0..{C - 1} (and not {ignore_index}): {np.unique(lab[bad])}"
        )
    count = int(valid.sum())
    if count == 0:
        raise AllPixelsIgnored("no non-ignored pixels in batch")

    shifted = ld - ld.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    safe = np.where(valid, lab, 0)
    picked = np.take_along_axis(log_probs, safe[:, None], axis=1)[:, 0]
    total = -float(picked[valid].sum())
    value = np.asarray(total / count, dtype=ld.dtype)

    def grad(g):
        soft = exp / denom
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        gl = (soft - onehot) * valid[:, None] * (float(g) / count)
        gl = gl.astype(ld.dtype)
        return (gl[0] if squeezed else gl,)

    return from_op(value, (logits,), grad, "cross_entropy")
