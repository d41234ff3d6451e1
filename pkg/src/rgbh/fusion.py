"""The six RGB/height fusion paradigms as composable model graphs.

Paradigms over a shared pair of modality encoders:

* single_rgb / single_height — one encoder, one decoder.
* early — stack RGB and height into a four-channel input (order R,G,B,H).
* feature — independent encoders, features concatenated at the encoder
  output seam, one decoder over the concatenation.
* late — two complete encoder-decoder towers; raw logits summed (before
  any normalization).
* cross — parallel token streams; at the fusion seam each stream runs a
  transformer layer whose attention queries come from the *other* stream.
* intermediary — a learned single-token go-between: stage 1 runs one
  transformer layer over [rgb tokens || height tokens || M] and splits the
  result; stage 2 fuses the updated token M' into each modality separately
  with its own transformer layer.

Cross and intermediary exist for the transformer backbone only. Both feed
the decoder the same way: the two updated streams are concatenated along
the token axis (2N tokens of width d), passed through a learned linear
merge, and decoded as a fused two-grid sequence, so the two fusion seams
are drop-in interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .backbones import (
    CONV,
    TRANSFORMER,
    ModelConfig,
    conv_decode,
    conv_encode,
    token_decode,
    token_encode,
)
from .errors import ChannelMismatch, ShapeMismatch, TokenCountMismatch
from .tensor import Tensor, add, add_bias, concat, linear, tslice
from .transformer import (
    HEIGHT_TAG,
    INTERMEDIARY_TAG,
    RGB_TAG,
    TokenSequence,
    cross_transformer_layer,
    transformer_layer,
    trunc_normal,
)


class Paradigm(str, Enum):
    SINGLE_RGB = "single_rgb"
    SINGLE_HEIGHT = "single_height"
    EARLY = "early"
    FEATURE = "feature"
    LATE = "late"
    CROSS = "cross"
    INTERMEDIARY = "intermediary"


TOKEN_ONLY = (Paradigm.CROSS, Paradigm.INTERMEDIARY)

# declared report order (single modalities first, fusion variants after)
PARADIGM_ORDER = (
    Paradigm.SINGLE_RGB,
    Paradigm.SINGLE_HEIGHT,
    Paradigm.EARLY,
    Paradigm.LATE,
    Paradigm.CROSS,
    Paradigm.INTERMEDIARY,
)


@dataclass(frozen=True)
class ParadigmSpec:
    kind: Paradigm
    backbone: str = TRANSFORMER

    def __post_init__(self):
        if self.backbone not in (CONV, TRANSFORMER):
            raise ShapeMismatch(f"unknown backbone {self.backbone!r}")
        if self.backbone == CONV and self.kind in TOKEN_ONLY:
            raise ShapeMismatch(
                f"{self.kind.value} requires the transformer backbone"
            )


@dataclass
class FusionOutputs:
    """Stage-2 result of intermediary fusion."""

    z_rgb: TokenSequence
    z_h: TokenSequence
    m_rgb: Tensor
    m_h: Tensor


# --- intermediary-token fusion ------------------------------------------------

def init_intermediary_token(params: dict, prefix: str, cfg: ModelConfig, rng) -> None:
    params[prefix + "m"] = trunc_normal(rng, (1, cfg.embed_dim), dtype=cfg.np_dtype)


def _check_widths(cfg: ModelConfig, *seqs: TokenSequence) -> None:
    for s in seqs:
        if s.dim != cfg.embed_dim:
            raise ShapeMismatch(f"token dim {s.dim} != embed_dim {cfg.embed_dim}")


def _bcast_token(m: Tensor, like: Tensor) -> Tensor:
    """Tile the (1,d) intermediary token across a batch axis if needed.

    Implemented as zeros + suffix-bias so the token's gradient sums over
    the batch, matching its role as a shared parameter.
    """
    if like.ndim == 2:
        return m
    zeros = Tensor(np.zeros((like.shape[0],) + m.shape[-2:]), dtype=m.dtype)
    return add_bias(zeros, m)


def timf_stage1(
    rgb_tokens: TokenSequence,
    h_tokens: TokenSequence,
    m: Tensor,
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    prefix: str = "fuse.s1.",
):
    """One transformer layer over [rgb || height || M], split positionally."""
    _check_widths(cfg, rgb_tokens, h_tokens)
    if m.shape[-2:] != (1, cfg.embed_dim):
        raise ShapeMismatch(f"intermediary token must be (1,{cfg.embed_dim}), got {m.shape}")
    n_r, n_h = rgb_tokens.count, h_tokens.count
    m_b = _bcast_token(m, rgb_tokens.tokens)
    joint = TokenSequence(
        concat([rgb_tokens.tokens, h_tokens.tokens, m_b], axis=-2),
        rgb_tokens.tags + h_tokens.tags + (INTERMEDIARY_TAG,),
    )
    out = transformer_layer(joint, weights, cfg.stage, prefix)
    axis = out.tokens.ndim - 2
    z_rgb = TokenSequence(tslice(out.tokens, axis, 0, n_r), rgb_tokens.tags)
    z_h = TokenSequence(tslice(out.tokens, axis, n_r, n_r + n_h), h_tokens.tags)
    m_prime = tslice(out.tokens, axis, n_r + n_h, n_r + n_h + 1)
    return z_rgb, z_h, m_prime


def timf_stage2(
    z_rgb: TokenSequence,
    z_h: TokenSequence,
    m_prime: Tensor,
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    prefix_rgb: str = "fuse.s2rgb.",
    prefix_h: str = "fuse.s2h.",
) -> FusionOutputs:
    """Fuse M' into each modality separately with independent layers."""
    _check_widths(cfg, z_rgb, z_h)
    outs = []
    for seq, prefix in ((z_rgb, prefix_rgb), (z_h, prefix_h)):
        joint = TokenSequence(
            concat([seq.tokens, m_prime], axis=-2), seq.tags + (INTERMEDIARY_TAG,)
        )
        fused = transformer_layer(joint, weights, cfg.stage, prefix)
        axis = fused.tokens.ndim - 2
        outs.append(
            (
                TokenSequence(tslice(fused.tokens, axis, 0, seq.count), seq.tags),
                tslice(fused.tokens, axis, seq.count, seq.count + 1),
            )
        )
    (zr, mr), (zh, mh) = outs
    return FusionOutputs(z_rgb=zr, z_h=zh, m_rgb=mr, m_h=mh)


def timf_fuse(
    rgb_tokens: TokenSequence,
    h_tokens: TokenSequence,
    m: Tensor,
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    prefix: str = "fuse.",
) -> TokenSequence:
    """Both stages, then merge for the decoder.

    Returns N_rgb + N_h tokens of width d: the two updated streams
    concatenated along the token axis and passed through the learned
    linear merge. The per-modality intermediary outputs M'_rgb / M'_h are
    produced by stage 2 but not consumed downstream.
    """
    z_rgb, z_h, m_prime = timf_stage1(rgb_tokens, h_tokens, m, weights, cfg, prefix + "s1.")
    outs = timf_stage2(
        z_rgb, z_h, m_prime, weights, cfg, prefix + "s2rgb.", prefix + "s2h."
    )
    return merge_streams(outs.z_rgb, outs.z_h, weights, cfg, prefix + "merge.")


# --- cross fusion ---------------------------------------------------------------

def cross_fuse(
    rgb_tokens: TokenSequence,
    h_tokens: TokenSequence,
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    prefix: str = "fuse.",
) -> TokenSequence:
    """Query-exchanged transformer layers on both streams, then merge."""
    _check_widths(cfg, rgb_tokens, h_tokens)
    if rgb_tokens.count != h_tokens.count:
        raise TokenCountMismatch(
            f"stream token counts differ: {rgb_tokens.count} vs {h_tokens.count}"
        )
    z_rgb = cross_transformer_layer(rgb_tokens, h_tokens, weights, cfg.stage, prefix + "xrgb.")
    z_h = cross_transformer_layer(h_tokens, rgb_tokens, weights, cfg.stage, prefix + "xh.")
    return merge_streams(z_rgb, z_h, weights, cfg, prefix + "merge.")


def init_merge(params: dict, prefix: str, cfg: ModelConfig, rng) -> None:
    d = cfg.embed_dim
    params[prefix + "w"] = trunc_normal(rng, (d, d), dtype=cfg.np_dtype)
    params[prefix + "b"] = Tensor(np.zeros(d), dtype=cfg.np_dtype, requires_grad=True)


def merge_streams(
    z_rgb: TokenSequence,
    z_h: TokenSequence,
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    prefix: str,
) -> TokenSequence:
    cat = concat([z_rgb.tokens, z_h.tokens], axis=-2)
    merged = linear(cat, weights[prefix + "w"], weights[prefix + "b"])
    return TokenSequence(merged, z_rgb.tags + z_h.tags)


# --- paradigm forwards ----------------------------------------------------------


def _expect_channels(x: Tensor, want: int, what: str) -> None:
    got = x.shape[-3]
    if got != want:
        raise ChannelMismatch(f"{what} expects {want} channels, got {got}")


def _grid(x: Tensor, cfg: ModelConfig) -> tuple:
    return (x.shape[-2] // cfg.patch_size, x.shape[-1] // cfg.patch_size)


def forward_single(
    rgb: Tensor | None,
    height: Tensor | None,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    which: str = RGB_TAG,
) -> Tensor:
    """Single-modality paradigm: y = decode(encode(x)) on one input."""
    if which == RGB_TAG:
        x, prefix, want = rgb, "rgb.", 3
    elif which == HEIGHT_TAG:
        x, prefix, want = height, "h.", 1
    else:
        raise ShapeMismatch(f"unknown modality {which!r}")
    _expect_channels(x, want, f"single_{which}")
    if cfg.backbone == CONV:
        return conv_decode(conv_encode(x, params, prefix + "enc.", cfg), params, prefix + "dec.", cfg)
    seq = token_encode(x, params, prefix + "enc.", cfg, tag=which)
    return token_decode(seq, params, prefix + "dec.", cfg, _grid(x, cfg))


def forward_early(
    stacked: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig
) -> Tensor:
    """Early fusion on the four-channel R,G,B,H stack."""
    _expect_channels(stacked, 4, "early fusion")
    if cfg.backbone == CONV:
        return conv_decode(
            conv_encode(stacked, params, "fuse.enc.", cfg), params, "fuse.dec.", cfg
        )
    seq = token_encode(stacked, params, "fuse.enc.", cfg, tag=RGB_TAG)
    return token_decode(seq, params, "fuse.dec.", cfg, _grid(stacked, cfg))


def forward_feature(
    rgb: Tensor, height: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig
) -> Tensor:
    """Independent encoders, decoder over the concatenated features."""
    _expect_channels(rgb, 3, "feature fusion rgb branch")
    _expect_channels(height, 1, "feature fusion height branch")
    if cfg.backbone == CONV:
        f_rgb = conv_encode(rgb, params, "rgb.enc.", cfg)
        f_h = conv_encode(height, params, "h.enc.", cfg)
        return conv_decode(concat([f_rgb, f_h], axis=-3), params, "fuse.dec.", cfg)
    s_rgb = token_encode(rgb, params, "rgb.enc.", cfg, tag=RGB_TAG)
    s_h = token_encode(height, params, "h.enc.", cfg, tag=HEIGHT_TAG)
    cat = TokenSequence(concat([s_rgb.tokens, s_h.tokens], axis=-1), s_rgb.tags)
    return token_decode(cat, params, "fuse.dec.", cfg, _grid(rgb, cfg))


def forward_late(
    rgb: Tensor, height: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig
) -> Tensor:
    """Sum of the two full towers' raw logits."""
    y_rgb = forward_single(rgb, None, params, cfg, which=RGB_TAG)
    y_h = forward_single(None, height, params, cfg, which=HEIGHT_TAG)
    return add(y_rgb, y_h)


def forward_cross(
    rgb: Tensor, height: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig
) -> Tensor:
    _expect_channels(rgb, 3, "cross fusion rgb branch")
    _expect_channels(height, 1, "cross fusion height branch")
    s_rgb = token_encode(rgb, params, "rgb.enc.", cfg, tag=RGB_TAG)
    s_h = token_encode(height, params, "h.enc.", cfg, tag=HEIGHT_TAG)
    fused = cross_fuse(s_rgb, s_h, params, cfg, "fuse.")
    return token_decode(fused, params, "fuse.dec.", cfg, _grid(rgb, cfg))


def forward_intermediary(
    rgb: Tensor, height: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig
) -> Tensor:
    _expect_channels(rgb, 3, "intermediary fusion rgb branch")
    _expect_channels(height, 1, "intermediary fusion height branch")
    s_rgb = token_encode(rgb, params, "rgb.enc.", cfg, tag=RGB_TAG)
    s_h = token_encode(height, params, "h.enc.", cfg, tag=HEIGHT_TAG)
    fused = timf_fuse(s_rgb, s_h, params["fuse.m"], params, cfg, "fuse.")
    return token_decode(fused, params, "fuse.dec.", cfg, _grid(rgb, cfg))
