"""Property suites shipped with the package: gradients, sampling, loss and geometry."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from condl.engine import (
    RunningStats,
    Tensor,
    add,
    batch_norm2d,
    conv2d,
    finite_difference_check,
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
from condl.services.geometry import (
    Homography,
    PointSet,
    apply_homography,
    dlt_homography,
    mean_corner_error,
    ransac_homography,
)
from condl.services.matching import SimilarityMatrix, contrastive_loss

LOGGER = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-3


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    elapsed_s: float = 0.0


@dataclass
class GradientCase:
    name: str
    fn: Callable[[Tensor], Tensor]
    x: Tensor
    h: float = 1e-3


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights.reshape(out.shape), dtype=np.float64)))


def _const(array: np.ndarray) -> Tensor:
    return Tensor(array, dtype=np.float64)


def _off_kink_grid(rng: np.random.Generator, count: int, width: int, height: int) -> np.ndarray:
    """Normalized points that stay clear of pixel centres."""

    cells = np.stack(
        [rng.integers(0, width - 1, size=count), rng.integers(0, height - 1, size=count)], axis=1
    ) + rng.uniform(0.2, 0.8, size=(count, 2))
    return np.stack([(2 * cells[:, 0] + 1) / width - 1, (2 * cells[:, 1] + 1) / height - 1], axis=1)


def _operator_cases(rng: np.random.Generator) -> List[GradientCase]:
    def arr(*shape: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)

    other = arr(3, 4)
    image = arr(2, 3, 6, 6)
    weight = arr(4, 3, 3, 3) * np.float32(0.3)
    bias = arr(4)
    conv_w = arr(2, 4, 6, 6)
    bn_x = arr(2, 3, 4, 4)
    gamma, beta = arr(3), arr(3)
    bn_w = arr(*bn_x.shape)
    fmap = arr(3, 5, 6)
    grid = _off_kink_grid(rng, 6, 6, 5).astype(np.float32)
    sample_w = arr(6, 3)
    rows = arr(5, 4)
    square = arr(5, 5)
    away = np.where(np.abs(other) < 0.1, np.float32(0.5), other)

    def conv_input(x: Tensor) -> Tensor:
        return _weighted(conv2d(x, _const(weight), _const(bias), padding=1), conv_w)

    def conv_weight(w: Tensor) -> Tensor:
        return _weighted(conv2d(_const(image), w, _const(bias), padding=1), conv_w)

    def conv_bias(b: Tensor) -> Tensor:
        return _weighted(conv2d(_const(image), _const(weight), b, padding=1), conv_w)

    def bn(x: Tensor) -> Tensor:
        return _weighted(batch_norm2d(x, _const(gamma), _const(beta), RunningStats.fresh(3), True), bn_w)

    def bn_gamma(g: Tensor) -> Tensor:
        return _weighted(batch_norm2d(_const(bn_x), g, _const(beta), RunningStats.fresh(3), True), bn_w)

    def bn_beta(b: Tensor) -> Tensor:
        return _weighted(batch_norm2d(_const(bn_x), _const(gamma), b, RunningStats.fresh(3), True), bn_w)

    return [
        GradientCase("add", lambda x: _weighted(add(x, _const(other)), other), Tensor(arr(3, 4))),
        GradientCase("mul", lambda x: _weighted(mul(x, _const(other)), other), Tensor(arr(3, 4))),
        GradientCase("scale", lambda x: _weighted(scale(x, -1.7), other), Tensor(arr(3, 4))),
        GradientCase("relu", lambda x: _weighted(relu(x), other), Tensor(away)),
        GradientCase("take", lambda x: _weighted(take(x, 1), other), Tensor(arr(2, 3, 4))),
        GradientCase("l2_normalize_rows", lambda x: _weighted(l2_normalize_rows(x), rows), Tensor(arr(5, 4))),
        GradientCase("conv2d.input", conv_input, Tensor(image)),
        GradientCase("conv2d.weight", conv_weight, Tensor(weight)),
        GradientCase("conv2d.bias", conv_bias, Tensor(bias)),
        GradientCase("batch_norm2d.input", bn, Tensor(bn_x)),
        GradientCase("batch_norm2d.gamma", bn_gamma, Tensor(gamma)),
        GradientCase("batch_norm2d.beta", bn_beta, Tensor(beta)),
        GradientCase(
            "grid_sample_bilinear.map",
            lambda u: _weighted(grid_sample_bilinear(u, _const(grid)), sample_w),
            Tensor(fmap),
        ),
        GradientCase(
            "grid_sample_bilinear.grid",
            lambda g: _weighted(grid_sample_bilinear(_const(fmap), g), sample_w),
            Tensor(grid),
        ),
        GradientCase(
            "pairwise_dot.a", lambda a: _weighted(pairwise_dot(a, _const(rows)), square), Tensor(arr(5, 4))
        ),
        GradientCase(
            "pairwise_dot.b", lambda b: _weighted(pairwise_dot(_const(rows), b), square), Tensor(arr(5, 4))
        ),
        GradientCase("softmax_cross_entropy_diag.row", lambda s: softmax_cross_entropy_diag(s, "row"), Tensor(square)),
        GradientCase(
            "softmax_cross_entropy_diag.column",
            lambda s: softmax_cross_entropy_diag(s, "column"),
            Tensor(square),
        ),
    ]


def _composite_cases(rng: np.random.Generator) -> List[GradientCase]:
    """conv -> batch norm -> relu -> grid sample -> dot -> symmetric cross-entropy, per parameter."""

    def arr(*shape: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)

    values = {
        "weight": arr(3, 2, 3, 3) * np.float32(0.5),
        "bias": arr(3),
        "gamma": arr(3) + np.float32(1.5),
        "beta": arr(3),
    }
    images = arr(2, 2, 5, 5)
    grid_a = _off_kink_grid(rng, 4, 5, 5)
    grid_b = _off_kink_grid(rng, 4, 5, 5)

    def graph(name: str) -> Callable[[Tensor], Tensor]:
        def loss(varied: Tensor) -> Tensor:
            p = {key: varied if key == name else _const(value) for key, value in values.items()}
            out = relu(
                batch_norm2d(
                    conv2d(_const(images), p["weight"], p["bias"], padding=1),
                    p["gamma"],
                    p["beta"],
                    RunningStats.fresh(3),
                    True,
                )
            )
            da = grid_sample_bilinear(take(out, 0), _const(grid_a))
            db = grid_sample_bilinear(take(out, 1), _const(grid_b))
            s = pairwise_dot(da, db)
            return scale(add(softmax_cross_entropy_diag(s, "row"), softmax_cross_entropy_diag(s, "column")), 0.5)

        return loss

    return [GradientCase(f"composite.{name}", graph(name), Tensor(value), h=1e-4) for name, value in values.items()]


def gradient_cases(rng: np.random.Generator) -> List[GradientCase]:
    return _operator_cases(rng) + _composite_cases(rng)


def gradient_suite(seeds: int = 20) -> SuiteResult:
    worst = 0.0
    worst_case = ""
    for seed in range(seeds):
        for case in gradient_cases(np.random.default_rng(seed)):
            error = finite_difference_check(case.fn, case.x, h=case.h)
            if error > worst:
                worst, worst_case = error, f"{case.name} (seed {seed})"
    return SuiteResult(
        "gradients", worst < GRADIENT_TOLERANCE, f"max relative error {worst:.2e} at {worst_case or '-'}"
    )


def bilinear_oracle(fmap: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Direct double sum over every pixel with hat-function weights."""

    channels, height, width = fmap.shape
    u = (grid[:, 0] + 1.0) / 2.0 * width - 0.5
    v = (grid[:, 1] + 1.0) / 2.0 * height - 0.5
    wx = np.maximum(0.0, 1.0 - np.abs(u[:, None] - np.arange(width)[None, :]))
    wy = np.maximum(0.0, 1.0 - np.abs(v[:, None] - np.arange(height)[None, :]))
    return np.einsum("nh,nw,chw->nc", wy, wx, fmap)


def sampling_suite(count: int = 1000, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    fmap = rng.normal(size=(4, 9, 11))
    grid = rng.uniform(-1.2, 1.2, size=(count, 2))
    sampled = grid_sample_bilinear(Tensor(fmap, dtype=np.float64), Tensor(grid, dtype=np.float64)).data
    oracle_gap = float(np.max(np.abs(sampled - bilinear_oracle(fmap, grid))))

    channels, height, width = fmap.shape
    interior = rng.uniform([-1 + 1 / width, -1 + 1 / height], [1 - 1 / width, 1 - 1 / height], size=(count, 2))
    ones = grid_sample_bilinear(Tensor(np.ones((1, height, width)), dtype=np.float64), Tensor(interior, dtype=np.float64))
    unity_gap = float(np.max(np.abs(ones.data - 1.0)))

    cols = rng.integers(0, width, size=50)
    rows = rng.integers(0, height, size=50)
    centres = np.stack([(2 * cols + 1) / width - 1, (2 * rows + 1) / height - 1], axis=1)
    at_centres = grid_sample_bilinear(Tensor(fmap, dtype=np.float64), Tensor(centres, dtype=np.float64)).data
    centre_gap = float(np.max(np.abs(at_centres - fmap[:, rows, cols].T)))

    passed = oracle_gap < 1e-5 and unity_gap < 1e-6 and centre_gap < 1e-6
    return SuiteResult(
        "sampling", passed, f"oracle {oracle_gap:.1e}, partition of unity {unity_gap:.1e}, centres {centre_gap:.1e}"
    )


def direct_contrastive_loss(s: np.ndarray) -> float:
    n = s.shape[0]
    row = s - s.max(axis=1, keepdims=True)
    log_row = row - np.log(np.exp(row).sum(axis=1, keepdims=True))
    col = s - s.max(axis=0, keepdims=True)
    log_col = col - np.log(np.exp(col).sum(axis=0, keepdims=True))
    return float((-np.trace(log_row) / n - np.trace(log_col) / n) / 2.0)


def loss_suite(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    gaps = []
    negative = False
    for size in (8, 64):
        s = rng.normal(scale=3.0, size=(size, size))
        value = contrastive_loss(SimilarityMatrix(Tensor(s, dtype=np.float64))).item()
        gaps.append(abs(value - direct_contrastive_loss(s)))
        negative |= value < 0
    constant = contrastive_loss(SimilarityMatrix(Tensor(np.full((16, 16), 0.7), dtype=np.float64))).item()
    ln_gap = abs(constant - math.log(16))
    passed = max(gaps) < 1e-6 and ln_gap < 1e-6 and not negative
    return SuiteResult("loss", passed, f"oracle {max(gaps):.1e}, constant-input gap {ln_gap:.1e}")


def _random_homography(rng: np.random.Generator, size: float = 128.0) -> Homography:
    corners = np.array([[0.0, 0.0], [size - 1, 0.0], [size - 1, size - 1], [0.0, size - 1]])
    moved = corners + rng.uniform(-0.15 * size, 0.15 * size, size=corners.shape)
    return dlt_homography(PointSet(corners), PointSet(moved))


def geometry_suite(trials: int = 20, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    dlt_worst = 0.0
    recovered = 0
    for trial in range(trials):
        h = _random_homography(rng)
        src = PointSet(rng.uniform(0, 127, size=(30, 2)))
        dst = apply_homography(h, src)
        dlt_worst = max(dlt_worst, mean_corner_error(h, dlt_homography(src, dst), 128, 128))

        noisy = dst.pts.copy()
        outliers = rng.choice(len(src), size=len(src) // 2, replace=False)
        noisy[outliers] = rng.uniform(0, 127, size=(len(outliers), 2))
        try:
            estimate, _ = ransac_homography(src, PointSet(noisy), threshold_px=3.0, seed=trial)
            recovered += mean_corner_error(h, estimate, 128, 128) < 1.0
        except Exception as exc:
            LOGGER.debug("selftest_ransac_failed", extra={"trial": trial, "error": str(exc)})

    identity_mce = mean_corner_error(Homography.identity(), Homography.identity(), 128, 128)
    shift_mce = mean_corner_error(Homography.identity(), Homography.translation(1.0, 0.0), 128, 128)
    passed = dlt_worst < 1e-6 and recovered >= trials - 1 and identity_mce == 0.0 and shift_mce == 4.0
    return SuiteResult(
        "geometry",
        passed,
        f"DLT corner error {dlt_worst:.1e}, RANSAC recovered {recovered}/{trials}, "
        f"MCE(H,H)={identity_mce}, 1px shift MCE={shift_mce}",
    )


def run_selftest(seeds: int = 20) -> List[SuiteResult]:
    suites: List[Callable[[], SuiteResult]] = [
        lambda: gradient_suite(seeds),
        sampling_suite,
        loss_suite,
        geometry_suite,
    ]
    results = []
    for suite in suites:
        started = time.perf_counter()
        result = suite()
        result.elapsed_s = time.perf_counter() - started
        level = logging.INFO if result.passed else logging.ERROR
        LOGGER.log(level, "selftest_suite", extra={"suite": result.name, "passed": result.passed, "detail": result.detail})
        results.append(result)
    return results
