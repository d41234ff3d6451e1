"""Dense tensor engine: values, tape-based differentiation, ops, and IO."""

from .autodiff import Tape, Tensor, active_tape, backward, check_finite, from_op, tape
from .io import load_checkpoint, load_fbt, read_fbt, save_checkpoint, dump_fbt, write_fbt
from .ops import (
    add,
    add_bias,
    concat,
    conv2d,
    conv_transpose2d,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    sub,
    tmean,
    transpose,
    tslice,
    tsum,
)

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "check_finite",
    "from_op",
    "tape",
    "add",
    "add_bias",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "gelu",
    "layer_norm",
    "linear",
    "matmul",
    "mul",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "tmean",
    "transpose",
    "tslice",
    "tsum",
    "dump_fbt",
    "load_fbt",
    "read_fbt",
    "write_fbt",
    "save_checkpoint",
    "load_checkpoint",
]
