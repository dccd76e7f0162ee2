"""Minimal dense-tensor math with reverse-mode differentiation."""

from .adam import Adam, AdamState, adam_step
from .checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from .imgops import (
    avg_pool2,
    conv3x3_reflect,
    conv_separable_valid,
    gaussian_kernel1d,
)
from .ops import (
    absolute,
    add,
    affine,
    concat,
    div,
    exp,
    gelu,
    l2_normalize,
    matmul,
    mean_all,
    mul,
    neg,
    reshape,
    select_row,
    sigmoid,
    slice_last,
    softplus,
    square,
    sub,
    sum_all,
    weighted_sum,
)
from .tensor import DTYPE, Tape, Tensor, no_grad_data, param, record_op, tensor

__all__ = [
    "Adam",
    "AdamState",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_digest",
    "Tensor",
    "Tape",
    "tensor",
    "param",
    "record_op",
    "no_grad_data",
    "DTYPE",
    "absolute",
    "add",
    "affine",
    "avg_pool2",
    "concat",
    "conv3x3_reflect",
    "conv_separable_valid",
    "div",
    "exp",
    "gaussian_kernel1d",
    "gelu",
    "l2_normalize",
    "matmul",
    "mean_all",
    "mul",
    "neg",
    "reshape",
    "select_row",
    "sigmoid",
    "slice_last",
    "softplus",
    "square",
    "sub",
    "sum_all",
    "weighted_sum",
]
