"""Minimal reverse-mode differentiation engine."""

from .gradcheck import finite_difference_check
from .ops import (
    RunningStats,
    add,
    batch_norm2d,
    conv2d,
    grid_sample_bilinear,
    l2_normalize_rows,
    mul,
    pairwise_dot,
    relu,
    scale,
    softmax_cross_entropy_diag,
    sum_all,
    take,
)
from .tensor import ShapeError, Tape, Tensor, backward, zero_grads

__all__ = [
    "RunningStats",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "batch_norm2d",
    "conv2d",
    "finite_difference_check",
    "grid_sample_bilinear",
    "l2_normalize_rows",
    "mul",
    "pairwise_dot",
    "relu",
    "scale",
    "softmax_cross_entropy_diag",
    "sum_all",
    "take",
    "zero_grads",
]
