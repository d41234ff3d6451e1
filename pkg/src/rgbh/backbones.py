"""Encoder/decoder building blocks shared by the fusion paradigms.

Two families:

* Convolutional: a 4-stage stride-2 encoder (widths 16/32/64/128 by
  default) and a mirrored transposed-conv decoder back to full resolution.
* Transformer: patch embedding followed by a stack of pre-norm layers;
  the decoder is a per-token linear map to class logits for the token's
  own PxP pixel patch. A fused two-grid sequence (2N tokens) is decoded by
  summing the two grids' logit maps.

Both families are neutral on purpose: the point of this package is
comparing fusion paradigms under identical backbones, not reproducing any
particular named architecture.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ShapeMismatch
from .tensor import (
    Tensor,
    concat,
    conv2d,
    conv_transpose2d,
    linear,
    relu,
    reshape,
    transpose,
    tslice,
)
from .transformer import (
    TokenSequence,
    TransformerStageConfig,
    init_patch_embed,
    init_transformer_layer,
    patch_embed,
    transformer_layer,
    trunc_normal,
)

CONV = "conv"
TRANSFORMER = "transformer"


@dataclass(frozen=True)
class ModelConfig:
    """Backbone-independent model hyperparameters."""

    backbone: str = TRANSFORMER
    classes: int = 6
    # transformer family
    embed_dim: int = 32
    num_heads: int = 4
    patch_size: int = 8
    depth: int = 2
    mlp_ratio: float = 2.0
    max_tokens: int = 256
    # conv family
    conv_widths: tuple = (16, 32, 64, 128)
    dtype: str = "f32"

    def __post_init__(self):
        if self.backbone not in (CONV, TRANSFORMER):
            raise ShapeMismatch(f"unknown backbone {self.backbone!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @property
    def stage(self) -> TransformerStageConfig:
        return TransformerStageConfig(
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            patch_size=self.patch_size,
            max_tokens=self.max_tokens,
            mlp_ratio=self.mlp_ratio,
        )


# --- convolutional family ----------------------------------------------------

def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype):
    std = float(np.sqrt(2.0 / fan_in))
    return Tensor(rng.standard_normal(shape) * std, dtype=dtype, requires_grad=True)


def init_conv_encoder(params: dict, prefix: str, in_channels: int, cfg: ModelConfig, rng) -> None:
    dt = cfg.np_dtype
    chans = (in_channels,) + cfg.conv_widths
    for i in range(len(cfg.conv_widths)):
        c_in, c_out = chans[i], chans[i + 1]
        params[f"{prefix}conv{i}.w"] = he_normal(rng, (c_out, c_in, 3, 3), c_in * 9, dt)
        params[f"{prefix}conv{i}.b"] = Tensor(np.zeros(c_out), dtype=dt, requires_grad=True)


def conv_encode(x: Tensor, params: Mapping[str, Tensor], prefix: str, cfg: ModelConfig) -> Tensor:
    for i in range(len(cfg.conv_widths)):
        x = relu(conv2d(x, params[f"{prefix}conv{i}.w"], params[f"{prefix}conv{i}.b"], stride=2, pad=1))
    return x


def init_conv_decoder(params: dict, prefix: str, in_channels: int, cfg: ModelConfig, rng) -> None:
    dt = cfg.np_dtype
    widths = tuple(reversed(cfg.conv_widths[:-1])) + (cfg.conv_widths[0],)
    c_in = in_channels
    for i, c_out in enumerate(widths):
        params[f"{prefix}up{i}.w"] = he_normal(rng, (c_in, c_out, 2, 2), c_in * 4, dt)
        params[f"{prefix}up{i}.b"] = Tensor(np.zeros(c_out), dtype=dt, requires_grad=True)
        c_in = c_out
    params[f"{prefix}head.w"] = he_normal(rng, (cfg.classes, c_in, 1, 1), c_in, dt)
    params[f"{prefix}head.b"] = Tensor(np.zeros(cfg.classes), dtype=dt, requires_grad=True)


def conv_decode(f: Tensor, params: Mapping[str, Tensor], prefix: str, cfg: ModelConfig) -> Tensor:
    n_up = len(cfg.conv_widths)
    for i in range(n_up):
        f = relu(conv_transpose2d(f, params[f"{prefix}up{i}.w"], params[f"{prefix}up{i}.b"], stride=2))
    return conv2d(f, params[f"{prefix}head.w"], params[f"{prefix}head.b"])


# --- transformer family --------------------------------------------------------

def init_token_encoder(params: dict, prefix: str, in_channels: int, cfg: ModelConfig, rng) -> None:
    dt = cfg.np_dtype
    init_patch_embed(params, prefix + "embed.", cfg.stage, in_channels, rng, dtype=dt)
    for i in range(cfg.depth):
        init_transformer_layer(params, f"{prefix}block{i}.", cfg.stage, rng, dtype=dt)


def token_encode(
    image: Tensor, params: Mapping[str, Tensor], prefix: str, cfg: ModelConfig, tag: str
) -> TokenSequence:
    seq = patch_embed(image, params, cfg.stage, prefix + "embed.", tag=tag)
    for i in range(cfg.depth):
        seq = transformer_layer(seq, params, cfg.stage, f"{prefix}block{i}.")
    return seq


def init_token_decoder(
    params: dict, prefix: str, cfg: ModelConfig, rng, in_dim: int | None = None
) -> None:
    dt = cfg.np_dtype
    d = in_dim if in_dim is not None else cfg.embed_dim
    out = cfg.classes * cfg.patch_size * cfg.patch_size
    params[prefix + "dec.w"] = trunc_normal(rng, (d, out), dtype=dt)
    params[prefix + "dec.b"] = Tensor(np.zeros(out), dtype=dt, requires_grad=True)


def token_decode(
    seq: TokenSequence,
    params: Mapping[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
    grid: tuple,
) -> Tensor:
    """Map tokens back to (B,C,H,W) logits on one or two aligned patch grids.

    seq.count must equal gh*gw (one grid) or 2*gh*gw (a fused pair of
    co-registered grids: each patch's two tokens are paired along the
    embedding axis, so the head sees both streams of a patch jointly).
    """
    gh, gw = grid
    n = gh * gw
    tokens = seq.tokens
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = reshape(tokens, (1,) + tokens.shape)
    b = tokens.shape[0]
    if seq.count not in (n, 2 * n):
        raise ShapeMismatch(f"{seq.count} tokens do not cover grid {gh}x{gw}")
    if seq.count == 2 * n:
        tokens = concat(
            [tslice(tokens, 1, 0, n), tslice(tokens, 1, n, 2 * n)], axis=-1
        )

    maps = linear(tokens, params[prefix + "dec.w"], params[prefix + "dec.b"])
    P, C = cfg.patch_size, cfg.classes
    logits = reshape(maps, (b, gh, gw, C, P, P))
    logits = transpose(logits, (0, 3, 1, 4, 2, 5))  # (B,C,gh,P,gw,P)
    logits = reshape(logits, (b, C, gh * P, gw * P))
    if squeeze:
        logits = reshape(logits, logits.shape[1:])
    return logits
