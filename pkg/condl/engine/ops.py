"""Differentiable operators used by the descriptor network and the matcher.

Every operator computes its forward pass with numpy, then registers a backward
rule on the active :class:`~condl.engine.tensor.Tape` when one of its inputs
requires a gradient. Reductions accumulate in float64 and cast back to the
input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, ensure_tensor, record_op

Axis = Literal["row", "column"]


def _result_dtype(*tensors: Tensor) -> np.dtype:
    return np.result_type(*(tensor.data.dtype for tensor in tensors))


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, dtype=_result_dtype(a, b))

    def _backward(grad: np.ndarray):
        return grad, grad

    return record_op("add", (a, b), out, _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, dtype=_result_dtype(a, b))

    def _backward(grad: np.ndarray):
        return grad * b.data, grad * a.data

    return record_op("mul", (a, b), out, _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = Tensor(x.data * x.data.dtype.type(factor), dtype=x.data.dtype)

    def _backward(grad: np.ndarray):
        return (grad * factor,)

    return record_op("scale", (x,), out, _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.data.dtype), dtype=x.data.dtype)

    def _backward(grad: np.ndarray):
        # zero at x == 0
        return (grad * mask,)

    return record_op("relu", (x,), out, _backward)


def sum_all(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64)).astype(x.data.dtype)
    out = Tensor(total, dtype=x.data.dtype)
    shape = x.shape

    def _backward(grad: np.ndarray):
        return (np.broadcast_to(grad, shape).astype(x.data.dtype),)

    return record_op("sum_all", (x,), out, _backward)


def take(x: Tensor, index: int) -> Tensor:
    """Select ``x[index]`` along the leading axis."""

    if x.data.ndim == 0 or not 0 <= index < x.shape[0]:
        raise ShapeError(f"take: index {index} out of range for shape {x.shape}")
    out = Tensor(x.data[index].copy(), dtype=x.data.dtype)
    shape = x.shape

    def _backward(grad: np.ndarray):
        full = np.zeros(shape, dtype=grad.dtype)
        full[index] = grad
        return (full,)

    return record_op("take", (x,), out, _backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects N×d input, got {x.shape}")
    data = x.data.astype(np.float64)
    norms = np.sqrt((data * data).sum(axis=1, keepdims=True) + eps)
    normalized = data / norms
    out = Tensor(normalized.astype(x.data.dtype), dtype=x.data.dtype)

    def _backward(grad: np.ndarray):
        g = grad.astype(np.float64)
        inner = (g * normalized).sum(axis=1, keepdims=True)
        return ((g - normalized * inner) / norms,)

    return record_op("l2_normalize_rows", (x,), out, _backward)


# --- convolution -----------------------------------------------------------


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Zero-padded cross-correlation over ``C×H×W`` or ``B×C×H×W`` input."""

    x = input.data
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d expects C×H×W or B×C×H×W input, got {input.shape}")
    if not batched:
        x = x[None]
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be C_out×C_in×k×k, got {weight.shape}")
    c_out, c_in, k, k_w = weight.shape
    if k != k_w or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {k}×{k_w}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match C_out={c_out}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or padding={padding}")

    batch, _, height, width = x.shape
    span_h = height + 2 * padding - k
    span_w = width + 2 * padding - k
    if span_h < 0 or span_w < 0:
        raise ShapeError(
            f"conv2d: non-positive output size for input {height}×{width}, kernel {k}, padding {padding}"
        )
    if span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: stride {stride} does not tile input {height}×{width}")
    out_h = span_h // stride + 1
    out_w = span_w // stride + 1

    dtype = _result_dtype(input, weight, bias)
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w = weight.data

    def _windows() -> np.ndarray:
        view = sliding_window_view(padded, (k, k), axis=(2, 3))
        return view[:, :, ::stride, ::stride]

    result = np.tensordot(_windows(), w, axes=([1, 4, 5], [1, 2, 3]))
    result = result.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    result = np.ascontiguousarray(result, dtype=dtype)
    out = Tensor(result if batched else result[0], dtype=dtype)

    def _backward(grad: np.ndarray):
        g = grad if batched else grad[None]
        grad_weight = np.tensordot(g, _windows(), axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = g.sum(axis=(0, 2, 3), dtype=np.float64)
        grad_padded = np.zeros(padded.shape, dtype=np.result_type(g.dtype, w.dtype))
        row_stop = stride * (out_h - 1) + 1
        col_stop = stride * (out_w - 1) + 1
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))
                grad_padded[:, :, i : i + row_stop : stride, j : j + col_stop : stride] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        grad_input = grad_padded[:, :, padding : padding + height, padding : padding + width]
        if not batched:
            grad_input = grad_input[0]
        return grad_input, grad_weight, grad_bias

    return record_op("conv2d", (input, weight, bias), out, _backward)


# --- normalization ---------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    updates: int = field(default=0)

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        return cls(
            mean=np.zeros(channels, dtype=np.float32),
            var=np.ones(channels, dtype=np.float32),
            momentum=momentum,
        )


def batch_norm2d(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    training: bool,
    eps: float = 1e-5,
) -> Tensor:
    x = input.data
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"batch_norm2d expects B×C×H×W input, got {input.shape}")
    if not batched:
        x = x[None]
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"batch_norm2d: gamma {gamma.shape} / beta {beta.shape} do not match {channels} channels"
        )
    if eps <= 0:
        raise ValueError("batch_norm2d: eps must be positive")

    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    dtype = _result_dtype(input, gamma, beta)
    x64 = x.astype(np.float64)
    gamma64 = gamma.data.astype(np.float64)[None, :, None, None]

    if training:
        if count < 2:
            raise ValueError("batch_norm2d: training mode needs at least two values per channel")
        mean = x64.mean(axis=axes)
        centered = x64 - mean[None, :, None, None]
        var = (centered * centered).mean(axis=axes)
        momentum = running.momentum
        running.mean = ((1 - momentum) * running.mean + momentum * mean).astype(running.mean.dtype)
        unbiased = var * count / (count - 1)
        running.var = ((1 - momentum) * running.var + momentum * unbiased).astype(running.var.dtype)
        running.updates += 1
    else:
        mean = running.mean.astype(np.float64)
        var = running.var.astype(np.float64)
        centered = x64 - mean[None, :, None, None]

    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = centered * inv_std[None, :, None, None]
    result = gamma64 * normalized + beta.data.astype(np.float64)[None, :, None, None]
    result = result.astype(dtype)
    out = Tensor(result if batched else result[0], dtype=dtype)

    def _backward(grad: np.ndarray):
        g = (grad if batched else grad[None]).astype(np.float64)
        grad_gamma = (g * normalized).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        dnorm = g * gamma64
        if training:
            grad_input = (inv_std[None, :, None, None] / count) * (
                count * dnorm
                - dnorm.sum(axis=axes)[None, :, None, None]
                - normalized * (dnorm * normalized).sum(axis=axes)[None, :, None, None]
            )
        else:
            grad_input = dnorm * inv_std[None, :, None, None]
        if not batched:
            grad_input = grad_input[0]
        return grad_input, grad_gamma, grad_beta

    return record_op("batch_norm2d", (input, gamma, beta), out, _backward)


# --- sampling and similarity -----------------------------------------------


def grid_sample_bilinear(U: Tensor, G: Tensor) -> Tensor:
    """Sample ``U`` (C×H×W) at normalized points ``G`` (N×2, columns x, y).

    Normalized ``x`` maps to the continuous column ``u = (x + 1) / 2 * W - 0.5``
    (and ``y`` to rows likewise), so ``x = -1 + (2m + 1) / W`` is the centre of
    column ``m``. Neighbours outside the map contribute zero.
    """

    if U.data.ndim != 3:
        raise ShapeError(f"grid_sample_bilinear expects a C×H×W map, got {U.shape}")
    channels, height, width = U.shape
    if channels == 0 or height == 0 or width == 0:
        raise ShapeError(f"grid_sample_bilinear: empty feature map {U.shape}")
    if G.data.ndim != 2 or G.shape[1] != 2:
        raise ShapeError(f"grid_sample_bilinear expects N×2 grid, got {G.shape}")

    dtype = _result_dtype(U, G)
    count = G.shape[0]
    if count == 0:
        return Tensor(np.zeros((0, channels), dtype=dtype), dtype=dtype)

    grid = G.data.astype(np.float64)
    u = (grid[:, 0] + 1.0) / 2.0 * width - 0.5
    v = (grid[:, 1] + 1.0) / 2.0 * height - 0.5
    m0 = np.floor(u).astype(np.int64)
    n0 = np.floor(v).astype(np.int64)
    fx = u - m0
    fy = v - n0

    # (row offset, col offset, weight, d weight / du, d weight / dv)
    corners = (
        (0, 0, (1 - fy) * (1 - fx), -(1 - fy), -(1 - fx)),
        (0, 1, (1 - fy) * fx, (1 - fy), -fx),
        (1, 0, fy * (1 - fx), -fy, (1 - fx)),
        (1, 1, fy * fx, fy, fx),
    )
    flat = U.data.reshape(channels, height * width).astype(np.float64).T  # (H*W, C)

    gathered = []
    result = np.zeros((count, channels), dtype=np.float64)
    for dn, dm, weight, du_weight, dv_weight in corners:
        rows = n0 + dn
        cols = m0 + dm
        valid = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
        index = np.where(valid, rows * width + cols, 0)
        values = np.where(valid[:, None], flat[index], 0.0)
        result += weight[:, None] * values
        gathered.append((index, valid, weight, du_weight, dv_weight, values))

    out = Tensor(result.astype(dtype), dtype=dtype)

    def _backward(grad: np.ndarray):
        g = grad.astype(np.float64)
        grad_flat = np.zeros((height * width, channels), dtype=np.float64)
        grad_u = np.zeros(count, dtype=np.float64)
        grad_v = np.zeros(count, dtype=np.float64)
        for index, valid, weight, du_weight, dv_weight, values in gathered:
            np.add.at(grad_flat, index[valid], weight[valid, None] * g[valid])
            projected = (g * values).sum(axis=1)
            grad_u += du_weight * projected
            grad_v += dv_weight * projected
        grad_map = grad_flat.T.reshape(channels, height, width)
        grad_grid = np.stack([grad_u * width / 2.0, grad_v * height / 2.0], axis=1)
        return grad_map, grad_grid

    return record_op("grid_sample_bilinear", (U, G), out, _backward)


def pairwise_dot(A: Tensor, B: Tensor) -> Tensor:
    if A.data.ndim != 2 or B.data.ndim != 2:
        raise ShapeError(f"pairwise_dot expects N×d inputs, got {A.shape} and {B.shape}")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"pairwise_dot: descriptor size mismatch {A.shape[1]} vs {B.shape[1]}")
    dtype = _result_dtype(A, B)
    result = A.data.astype(np.float64) @ B.data.astype(np.float64).T
    out = Tensor(result.astype(dtype), dtype=dtype)

    def _backward(grad: np.ndarray):
        g = grad.astype(np.float64)
        return g @ B.data.astype(np.float64), g.T @ A.data.astype(np.float64)

    return record_op("pairwise_dot", (A, B), out, _backward)


def softmax_cross_entropy_diag(S: Tensor, axis: Axis = "row") -> Tensor:
    """Mean of ``-log p(i, i)`` where ``p`` is the softmax of ``S`` along ``axis``."""

    if S.data.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise ShapeError(f"softmax_cross_entropy_diag expects a non-empty N×N matrix, got {S.shape}")
    if axis not in ("row", "column"):
        raise ValueError(f"axis must be 'row' or 'column', got {axis!r}")

    size = S.shape[0]
    logits = S.data.astype(np.float64)
    if axis == "column":
        logits = logits.T
    peak = logits.max(axis=1, keepdims=True)
    log_norm = peak[:, 0] + np.log(np.exp(logits - peak).sum(axis=1))
    loss = float(np.mean(log_norm - np.diag(logits)))
    out = Tensor(np.asarray(loss), dtype=S.data.dtype)

    def _backward(grad: np.ndarray):
        probs = np.exp(logits - log_norm[:, None])
        probs[np.diag_indices(size)] -= 1.0
        dlogits = probs * (float(grad) / size)
        return (dlogits.T if axis == "column" else dlogits,)

    return record_op("softmax_cross_entropy_diag", (S,), out, _backward)


__all__ = [
    "RunningStats",
    "add",
    "batch_norm2d",
    "conv2d",
    "ensure_tensor",
    "grid_sample_bilinear",
    "l2_normalize_rows",
    "mul",
    "pairwise_dot",
    "relu",
    "scale",
    "softmax_cross_entropy_diag",
    "sum_all",
    "take",
]
