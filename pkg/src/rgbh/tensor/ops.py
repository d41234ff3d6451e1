"""Differentiable operations on Tensors.

All ops are pure functions: they read their input tensors, produce a new
Tensor, and (when a tape is active) record a local gradient rule. Shapes
must match exactly; the only broadcast-capable primitive is add_bias,
whose bias shape must be a trailing suffix of x's shape. Outputs of every
op are checked for NaN/Inf and raise NonFiniteValue instead of silently
propagating overflow.

matmul/conv2d follow the usual deep-learning conventions; conv is
cross-correlation with zero padding. Layer norm standardizes the last axis
with biased variance (denominator d), the common transformer convention.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from ..errors import RangeOutOfBounds, ShapeMismatch
from .autodiff import Tensor, from_op

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeMismatch(f"mixed dtypes {dt} vs {t.dtype}")
    return dt


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add shapes differ: {a.shape} vs {b.shape}")
    return from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub shapes differ: {a.shape} vs {b.shape}")
    return from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul shapes differ: {a.shape} vs {b.shape}")
    return from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return from_op(x.data * s, (x,), lambda g: (g * s,), "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias where bias.shape is a trailing suffix of x.shape.

    The single sanctioned broadcast: covers per-feature bias (d,) and
    positional rows (N, d) added across a batch axis.
    """
    _same_dtype(x, bias)
    k = bias.ndim
    if k == 0 or k > x.ndim or x.shape[x.ndim - k:] != bias.shape:
        raise ShapeMismatch(f"bias shape {bias.shape} is not a suffix of {x.shape}")
    lead = tuple(range(x.ndim - k))

    def grad(g):
        gb = g.sum(axis=lead) if lead else g.copy()
        return (g, gb)

    return from_op(x.data + bias.data, (x, bias), grad, "add_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return from_op(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))

    def grad(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return from_op(xd * cdf, (x,), grad, "gelu")


# --- reductions ------------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))
    ax = axis

    def grad(g):
        if ax is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        gg = np.expand_dims(g, ax)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True),)

    return from_op(out, (x,), grad, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


# --- shape plumbing --------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} into {shape}")
    return from_op(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape"
    )


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"axes {axes} is not a permutation of rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return from_op(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat of zero parts")
    _same_dtype(*parts)
    nd = parts[0].ndim
    if axis < -nd or axis >= nd:
        raise RangeOutOfBounds(f"concat axis {axis} out of range for rank {nd}")
    axis = axis % nd
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if p.ndim != nd or other[:axis] != ref[:axis] or other[axis + 1:] != ref[axis + 1:]:
            raise ShapeMismatch(
                f"concat parts disagree off-axis: {parts[0].shape} vs {p.shape}"
            )
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return from_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), grad, "concat")


def tslice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis.

    The gradient scatters back into a zero tensor of x's shape, so
    slice(concat(a, b)) round-trips bit-identically in both directions.
    """
    nd = x.ndim
    if axis < -nd or axis >= nd:
        raise RangeOutOfBounds(f"slice axis {axis} out of range for rank {nd}")
    axis = axis % nd
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise RangeOutOfBounds(f"slice [{start}:{stop}) outside axis extent {n}")
    idx = tuple(slice(None) if a != axis else slice(start, stop) for a in range(nd))

    def grad(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[idx] = g
        return (gx,)

    return from_op(np.ascontiguousarray(x.data[idx]), (x,), grad, "slice")


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b.

    Supports (m,k)@(k,n), identically-batched (...,m,k)@(...,k,n), and the
    shared-weight case (...,m,k)@(k,n).
    """
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    if b.ndim == 2:
        def grad(g):
            ga = g @ b.data.swapaxes(-1, -2)
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)),) * 2)
            return (ga, gb)
    elif a.shape[:-2] == b.shape[:-2]:
        def grad(g):
            return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)
    else:
        raise ShapeMismatch(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    return from_op(a.data @ b.data, (a, b), grad, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


# --- normalization ---------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalize along axis with max-subtraction for stability."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return from_op(y, (x,), grad, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis (biased variance), then scale and shift."""
    _same_dtype(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def grad(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = (g * xhat).sum(axis=lead) if lead else (g * xhat).copy()
        gbias = g.sum(axis=lead) if lead else g.copy()
        return (gx, ggain, gbias)

    return from_op(xhat * gain.data + bias.data, (x, gain, bias), grad, "layer_norm")


# --- convolution -----------------------------------------------------------

def _conv_windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: (C,H,W) or (B,C,H,W); w: (C_out,C_in,k,k); optional bias (C_out,).
    Output spatial extent: floor((H + 2*pad - k)/stride) + 1.
    """
    _same_dtype(x, w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if x.ndim not in (3, 4) or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv2d expects (B,C,H,W) x and (O,C,k,k) w, got {x.shape}, {w.shape}")
    B, C, H, W = xd.shape
    O, Cw, k, _ = w.shape
    if Cw != C:
        raise ShapeMismatch(f"conv2d channel disagreement: input {C} vs kernel {Cw}")
    if stride < 1:
        raise ShapeMismatch(f"stride must be >= 1, got {stride}")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ShapeMismatch(f"kernel {k} exceeds padded input {H + 2 * pad}x{W + 2 * pad}")
    if b is not None:
        _same_dtype(x, b)
        if b.shape != (O,):
            raise ShapeMismatch(f"conv bias must be ({O},), got {b.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = _conv_windows(xp, k, stride)  # (B,C,Ho,Wo,k,k)
    out = np.einsum("bcxyij,ocij->boxy", win, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]
    Ho, Wo = out.shape[2], out.shape[3]

    def grad(g):
        if squeeze:
            g = g[None]
        gw = np.einsum("bcxyij,boxy->ocij", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                patch = np.einsum("boxy,oc->bcxy", g, w.data[:, :, ki, kj], optimize=True)
                gxp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += patch
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        if squeeze:
            gx = gx[0]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        grads = (np.ascontiguousarray(gx), gw) + ((gb,) if b is not None else ())
        return grads

    inputs = (x, w) + ((b,) if b is not None else ())
    out_t = out[0] if squeeze else out
    return from_op(np.ascontiguousarray(out_t), inputs, grad, "conv2d")


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Transposed convolution (adjoint of conv2d w.r.t. its input).

    x: (C_in,H,W) or (B,C_in,H,W); w: (C_in,C_out,k,k).
    Output spatial extent: (H - 1)*stride + k - 2*pad.
    """
    _same_dtype(x, w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if x.ndim not in (3, 4) or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(
            f"conv_transpose2d expects (B,C,H,W) x and (C,O,k,k) w, got {x.shape}, {w.shape}"
        )
    B, C, H, W = xd.shape
    Cw, O, k, _ = w.shape
    if Cw != C:
        raise ShapeMismatch(f"conv_transpose2d channel disagreement: input {C} vs kernel {Cw}")
    if stride < 1:
        raise ShapeMismatch(f"stride must be >= 1, got {stride}")
    Hf = (H - 1) * stride + k
    Wf = (W - 1) * stride + k
    if Hf - 2 * pad <= 0 or Wf - 2 * pad <= 0:
        raise ShapeMismatch("padding swallows the whole transposed-conv output")
    if b is not None:
        _same_dtype(x, b)
        if b.shape != (O,):
            raise ShapeMismatch(f"bias must be ({O},), got {b.shape}")

    full = np.zeros((B, O, Hf, Wf), dtype=xd.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = np.einsum("bixy,io->boxy", xd, w.data[:, :, ki, kj], optimize=True)
            full[:, :, ki:ki + stride * H:stride, kj:kj + stride * W:stride] += patch
    out = full[:, :, pad:Hf - pad, pad:Wf - pad] if pad else full
    if b is not None:
        out = out + b.data[None, :, None, None]

    def grad(g):
        if squeeze:
            g = g[None]
        gfull = (
            np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        )
        gwin = _conv_windows(gfull, k, stride)  # (B,O,H,W,k,k)
        gx = np.einsum("bouvij,coij->bcuv", gwin, w.data, optimize=True)
        gw = np.einsum("bcuv,bouvij->coij", xd, gwin, optimize=True)
        if squeeze:
            gx = gx[0]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (np.ascontiguousarray(gx), gw) + ((gb,) if b is not None else ())

    inputs = (x, w) + ((b,) if b is not None else ())
    out_t = out[0] if squeeze else out
    return from_op(np.ascontiguousarray(out_t), inputs, grad, "conv_transpose2d")
