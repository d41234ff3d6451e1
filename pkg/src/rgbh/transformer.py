"""Transformer building blocks over the tensor engine.

Patch embedding with learned positional rows, multi-head self-attention
with *explicit* query/key/value sources (so fusion code can swap streams),
a GELU MLP, and the standard pre-norm two-residual layer:

    u = x + MSA(LN(x))
    y = u + MLP(LN(u))

All functions accept token tensors shaped (N, d) or batched (B, N, d) and
read their weights from a flat {name: Tensor} mapping under a caller-
supplied prefix. Weight layout per layer:

    <p>ln1.g, <p>ln1.b, <p>msa.{wq,bq,wk,bk,wv,bv,wo,bo},
    <p>ln2.g, <p>ln2.b, <p>mlp.{w1,b1,w2,b2}

Conventions the source material leaves open, fixed here: learned
positional embeddings and attention/MLP weights use truncated-normal init
(std 0.02, biases zero); the MLP nonlinearity is GELU; positional rows are
added once at patch embedding and never re-added downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import IndivisibleSpatialExtent, ShapeMismatch, TokenCountMismatch
from .tensor import (
    Tensor,
    add,
    add_bias,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    scale,
    softmax,
    transpose,
    tslice,
)

RGB_TAG = "rgb"
HEIGHT_TAG = "height"
INTERMEDIARY_TAG = "intermediary"


@dataclass(frozen=True)
class TransformerStageConfig:
    """Shape parameters for one transformer stage."""

    embed_dim: int
    num_heads: int
    patch_size: int
    max_tokens: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ShapeMismatch(
                f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class TokenSequence:
    """Token embeddings plus a per-token modality tag.

    tokens has shape (N, d) or (B, N, d); tags has length N and is shared
    across the batch axis.
    """

    tokens: Tensor
    tags: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.tokens.ndim not in (2, 3):
            raise ShapeMismatch(f"tokens must be (N,d) or (B,N,d), got {self.tokens.shape}")
        n = self.tokens.shape[-2]
        if not self.tags:
            self.tags = ("",) * n
        if len(self.tags) != n:
            raise TokenCountMismatch(f"{len(self.tags)} tags for {n} tokens")

    @property
    def count(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


# --- initialization ----------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32):
    """Normal(0, std) resampled until within +-2 std (ViT-style init)."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return Tensor(out, dtype=dtype, requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), dtype=dtype, requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), dtype=dtype, requires_grad=True)


def init_layer_norm(params: dict, prefix: str, d: int, dtype) -> None:
    params[prefix + "g"] = _ones((d,), dtype)
    params[prefix + "b"] = _zeros((d,), dtype)


def init_msa(params: dict, prefix: str, cfg: TransformerStageConfig, rng, dtype) -> None:
    d = cfg.embed_dim
    for name in ("wq", "wk", "wv", "wo"):
        params[prefix + name] = trunc_normal(rng, (d, d), dtype=dtype)
    for name in ("bq", "bk", "bv", "bo"):
        params[prefix + name] = _zeros((d,), dtype)


def init_mlp(params: dict, prefix: str, cfg: TransformerStageConfig, rng, dtype) -> None:
    d, hidden = cfg.embed_dim, cfg.mlp_hidden
    params[prefix + "w1"] = trunc_normal(rng, (d, hidden), dtype=dtype)
    params[prefix + "b1"] = _zeros((hidden,), dtype)
    params[prefix + "w2"] = trunc_normal(rng, (hidden, d), dtype=dtype)
    params[prefix + "b2"] = _zeros((d,), dtype)


def init_transformer_layer(params: dict, prefix: str, cfg, rng, dtype=np.float32) -> None:
    init_layer_norm(params, prefix + "ln1.", cfg.embed_dim, dtype)
    init_msa(params, prefix + "msa.", cfg, rng, dtype)
    init_layer_norm(params, prefix + "ln2.", cfg.embed_dim, dtype)
    init_mlp(params, prefix + "mlp.", cfg, rng, dtype)


def init_patch_embed(
    params: dict, prefix: str, cfg: TransformerStageConfig, in_channels: int, rng, dtype=np.float32
) -> None:
    patch_dim = in_channels * cfg.patch_size * cfg.patch_size
    params[prefix + "proj.w"] = trunc_normal(rng, (patch_dim, cfg.embed_dim), dtype=dtype)
    params[prefix + "proj.b"] = _zeros((cfg.embed_dim,), dtype)
    params[prefix + "pos"] = trunc_normal(rng, (cfg.max_tokens, cfg.embed_dim), dtype=dtype)


def layer_param_count(cfg: TransformerStageConfig) -> int:
    """Analytic parameter count of one transformer layer."""
    d, hidden = cfg.embed_dim, cfg.mlp_hidden
    msa = 4 * (d * d + d)
    mlp = d * hidden + hidden + hidden * d + d
    return msa + mlp + 4 * d  # two layer norms contribute 2d each


# --- forward blocks ----------------------------------------------------------

def patch_embed(
    image: Tensor,
    weights: Mapping[str, Tensor],
    cfg: TransformerStageConfig,
    prefix: str,
    tag: str = RGB_TAG,
) -> TokenSequence:
    """Project non-overlapping PxP patches to tokens and add positional rows.

    image: (C,H,W) or (B,C,H,W) with H, W divisible by patch_size. Tokens
    come out in row-major patch order.
    """
    squeeze = image.ndim == 3
    x = reshape(image, (1,) + image.shape) if squeeze else image
    if x.ndim != 4:
        raise ShapeMismatch(f"patch_embed expects (B,C,H,W), got {image.shape}")
    B, C, H, W = x.shape
    P = cfg.patch_size
    if H % P or W % P:
        raise IndivisibleSpatialExtent(f"{H}x{W} not divisible by patch size {P}")
    gh, gw = H // P, W // P
    n = gh * gw
    if n > cfg.max_tokens:
        raise TokenCountMismatch(f"{n} patches exceed max_tokens {cfg.max_tokens}")

    x = reshape(x, (B, C, gh, P, gw, P))
    x = transpose(x, (0, 2, 4, 1, 3, 5))  # (B, gh, gw, C, P, P)
    x = reshape(x, (B, n, C * P * P))
    tokens = linear(x, weights[prefix + "proj.w"], weights[prefix + "proj.b"])
    pos = tslice(weights[prefix + "pos"], 0, 0, n)
    tokens = add_bias(tokens, pos)
    if squeeze:
        tokens = reshape(tokens, (n, cfg.embed_dim))
    return TokenSequence(tokens, (tag,) * n)


def msa(
    q_src: TokenSequence,
    k_src: TokenSequence,
    v_src: TokenSequence,
    weights: Mapping[str, Tensor],
    cfg: TransformerStageConfig,
    prefix: str,
    return_attn: bool = False,
):
    """Multi-head scaled dot-product attention with explicit Q/K/V sources.

    Queries may come from a different stream than keys/values (cross
    fusion swaps them); key and value sources must have equal token
    counts. Output token count and tags follow q_src.
    """
    if k_src.count != v_src.count:
        raise TokenCountMismatch(
            f"key/value counts differ: {k_src.count} vs {v_src.count}"
        )
    d = cfg.embed_dim
    for s in (q_src, k_src, v_src):
        if s.dim != d:
            raise ShapeMismatch(f"token dim {s.dim} != embed_dim {d}")
    if q_src.tokens.ndim != k_src.tokens.ndim:
        raise ShapeMismatch("q and k/v batchedness differ")

    h, dh = cfg.num_heads, cfg.head_dim
    batched = q_src.tokens.ndim == 3
    B = q_src.tokens.shape[0] if batched else None
    nq, nk = q_src.count, k_src.count

    def split_heads(t: Tensor, n: int) -> Tensor:
        if batched:
            t = reshape(t, (B, n, h, dh))
            return transpose(t, (0, 2, 1, 3))  # (B,h,n,dh)
        t = reshape(t, (n, h, dh))
        return transpose(t, (1, 0, 2))  # (h,n,dh)

    q = split_heads(linear(q_src.tokens, weights[prefix + "wq"], weights[prefix + "bq"]), nq)
    k = split_heads(linear(k_src.tokens, weights[prefix + "wk"], weights[prefix + "bk"]), nk)
    v = split_heads(linear(v_src.tokens, weights[prefix + "wv"], weights[prefix + "bv"]), nk)

    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2) if batched else (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = softmax(logits, axis=-1)
    ctx = matmul(attn, v)
    if batched:
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, nq, d))
    else:
        ctx = reshape(transpose(ctx, (1, 0, 2)), (nq, d))
    out = linear(ctx, weights[prefix + "wo"], weights[prefix + "bo"])
    seq = TokenSequence(out, q_src.tags)
    return (seq, attn) if return_attn else seq


def mlp_block(x: Tensor, weights: Mapping[str, Tensor], prefix: str) -> Tensor:
    hidden = gelu(linear(x, weights[prefix + "w1"], weights[prefix + "b1"]))
    return linear(hidden, weights[prefix + "w2"], weights[prefix + "b2"])


def _pre_norm(x: Tensor, weights, prefix: str) -> Tensor:
    return layer_norm(x, weights[prefix + "g"], weights[prefix + "b"])


def transformer_layer(
    x: TokenSequence,
    weights: Mapping[str, Tensor],
    cfg: TransformerStageConfig,
    prefix: str,
) -> TokenSequence:
    """Pre-norm MSA with residual, then pre-norm MLP with residual."""
    if x.dim != cfg.embed_dim:
        raise ShapeMismatch(f"token dim {x.dim} != embed_dim {cfg.embed_dim}")
    normed = TokenSequence(_pre_norm(x.tokens, weights, prefix + "ln1."), x.tags)
    attended = msa(normed, normed, normed, weights, cfg, prefix + "msa.")
    u = add(x.tokens, attended.tokens)
    y = add(u, mlp_block(_pre_norm(u, weights, prefix + "ln2."), weights, prefix + "mlp."))
    return TokenSequence(y, x.tags)


def cross_transformer_layer(
    x_self: TokenSequence,
    x_other: TokenSequence,
    weights: Mapping[str, Tensor],
    cfg: TransformerStageConfig,
    prefix: str,
) -> TokenSequence:
    """Transformer layer whose MSA takes queries from the other stream.

    Computation order matches transformer_layer exactly; only the query
    source differs, and the residual sticks with the stream being updated,
    so zero sub-block weights still give the identity map.
    """
    if x_self.count != x_other.count:
        raise TokenCountMismatch(
            f"stream token counts differ: {x_self.count} vs {x_other.count}"
        )
    n_self = TokenSequence(_pre_norm(x_self.tokens, weights, prefix + "ln1."), x_self.tags)
    n_other = TokenSequence(_pre_norm(x_other.tokens, weights, prefix + "ln1."), x_other.tags)
    attended = msa(n_other, n_self, n_self, weights, cfg, prefix + "msa.")
    u = add(x_self.tokens, attended.tokens)
    y = add(u, mlp_block(_pre_norm(u, weights, prefix + "ln2."), weights, prefix + "mlp."))
    return TokenSequence(y, x_self.tags)
