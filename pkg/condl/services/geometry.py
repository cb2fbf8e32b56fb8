"""Homography algebra, grid sampling, robust estimation and matching metrics.

Geometry works in float64 pixel coordinates. Homographies map image-A pixels to
image-B pixels and are stored with ``m[2][2] == 1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:
    from .matching import MatchSet

LOGGER = logging.getLogger(__name__)

HOMOGRAPHY_CONVENTION = "a_to_b_pixels_m22_1"
_DEPTH_EPS = 1e-9
_DET_EPS = 1e-12


class PointAtInfinityError(ValueError):
    """A point maps to the line at infinity under a homography."""

    def __init__(self, index: int, depth: float) -> None:
        super().__init__(f"point {index} maps to infinity (homogeneous depth {depth:.3e})")
        self.index = index


class DegenerateConfigurationError(ValueError):
    """Correspondences do not determine a unique homography."""


class EstimationFailedError(RuntimeError):
    """RANSAC found no model supported by at least four inliers."""


@dataclass(frozen=True)
class Homography:
    m: np.ndarray

    def __post_init__(self) -> None:
        matrix = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(matrix)):
            raise ValueError("homography entries must be finite")
        if abs(matrix[2, 2]) < _DET_EPS:
            raise ValueError("homography with m22 == 0 cannot be scale-normalized")
        matrix = matrix / matrix[2, 2]
        if abs(np.linalg.det(matrix)) <= _DET_EPS:
            raise ValueError("homography is singular (|det| <= 1e-12)")
        matrix.setflags(write=False)
        object.__setattr__(self, "m", matrix)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """``self ∘ other``: apply ``other`` first."""

        return Homography(self.m @ other.m)

    def to_json(self) -> str:
        from condl.schemas import HomographyModel

        return HomographyModel.from_matrix(self.m).model_dump_json()

    @classmethod
    def from_json(cls, payload: str | bytes) -> "Homography":
        from condl.schemas import HomographyModel

        return cls(np.array(HomographyModel.model_validate_json(payload).h, dtype=np.float64))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Homography) and np.array_equal(self.m, other.m)

    def __hash__(self) -> int:
        return hash(self.m.tobytes())


@dataclass(frozen=True)
class PointSet:
    pts: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self) -> None:
        array = np.asarray(self.pts, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(array)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "pts", array)

    def __len__(self) -> int:
        return int(self.pts.shape[0])

    @property
    def x(self) -> np.ndarray:
        return self.pts[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.pts[:, 1]

    def subset(self, mask: np.ndarray) -> "PointSet":
        return PointSet(self.pts[mask])


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    width: int
    height: int
    noise_amplitude: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rows < 2 or self.cols < 2:
            raise ValueError(f"grid needs at least 2×2 points, got {self.rows}×{self.cols}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"grid image must be at least 2×2 px, got {self.width}×{self.height}")
        if not 0 <= self.noise_amplitude <= 0.5:
            raise ValueError(f"noise_amplitude must lie in [0, 0.5] cells, got {self.noise_amplitude}")


def _homogeneous(h: Homography, pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    m = h.m
    x = pts[:, 0]
    y = pts[:, 1]
    depth = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    num = np.stack(
        [m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2]],
        axis=1,
    )
    return num, depth


def apply_homography(h: Homography, pts: PointSet) -> PointSet:
    num, depth = _homogeneous(h, pts.pts)
    bad = np.flatnonzero(np.abs(depth) <= _DEPTH_EPS)
    if bad.size:
        raise PointAtInfinityError(int(bad[0]), float(depth[bad[0]]))
    return PointSet(num / depth[:, None])


def project_points(h: Homography, pts: PointSet) -> Tuple[np.ndarray, np.ndarray]:
    """Project without raising; returns ``(N×2 coordinates, finite mask)``.

    Points at infinity come back as ``inf`` with ``False`` in the mask.
    """

    num, depth = _homogeneous(h, pts.pts)
    finite = np.abs(depth) > _DEPTH_EPS
    safe = np.where(finite, depth, 1.0)
    projected = np.where(finite[:, None], num / safe[:, None], np.inf)
    return projected, finite


def sample_grid(spec: GridSpec) -> PointSet:
    """Centred ``rows×cols`` grid with optional uniform jitter, row-major order."""

    step_x = spec.width / spec.cols
    step_y = spec.height / spec.rows
    xs = step_x / 2.0 + np.arange(spec.cols) * step_x
    ys = step_y / 2.0 + np.arange(spec.rows) * step_y
    grid_x, grid_y = np.meshgrid(xs, ys)
    pts = np.stack([grid_x.reshape(-1), grid_y.reshape(-1)], axis=1)
    if spec.noise_amplitude > 0:
        rng = np.random.default_rng(spec.seed)
        jitter = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=pts.shape)
        pts = pts + jitter * np.array([step_x, step_y])
    pts[:, 0] = np.clip(pts[:, 0], 0.0, spec.width - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, spec.height - 1)
    return PointSet(pts)


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    rms = math.sqrt(float(((pts - centroid) ** 2).sum(axis=1).mean()))
    if rms < 1e-12:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / rms
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def _transform(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ t[:2, :2].T + t[:2, 2]


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    for skip in range(4):
        a, b, c = (pts[i] for i in range(4) if i != skip)
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < tol:
            return True
    return False


def dlt_homography(src: PointSet, dst: PointSet) -> Homography:
    """Hartley-normalized direct linear transform from ``src`` to ``dst``."""

    if len(src) != len(dst):
        raise ValueError(f"dlt_homography: {len(src)} source vs {len(dst)} destination points")
    if len(src) < 4:
        raise ValueError(f"dlt_homography needs at least 4 correspondences, got {len(src)}")

    t_src = _normalizing_transform(src.pts)
    t_dst = _normalizing_transform(dst.pts)
    a = _transform(t_src, src.pts)
    b = _transform(t_dst, dst.pts)
    if len(src) == 4 and (_has_collinear_triple(a) or _has_collinear_triple(b)):
        raise DegenerateConfigurationError("three of the four points are collinear")

    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    ones = np.ones_like(x)
    zeros = np.zeros_like(x)
    system = np.empty((2 * len(src), 9))
    system[0::2] = np.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u], axis=1)
    system[1::2] = np.stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v], axis=1)

    _, singular, vt = np.linalg.svd(system)
    if singular.size >= 8 and singular[7] <= 1e-10 * singular[0]:
        raise DegenerateConfigurationError("correspondence system is rank deficient")
    normalized = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ normalized @ t_src
    if abs(m[2, 2]) < _DET_EPS:
        raise DegenerateConfigurationError("recovered homography has m22 == 0")
    try:
        return Homography(m)
    except ValueError as exc:
        raise DegenerateConfigurationError(str(exc)) from exc


def transfer_errors(h: Homography, src: PointSet, dst: PointSet) -> np.ndarray:
    projected, _ = project_points(h, src)
    return np.linalg.norm(projected - dst.pts, axis=1)


def ransac_homography(
    src: PointSet,
    dst: PointSet,
    threshold_px: float = 3.0,
    max_iters: int = 2000,
    confidence: float = 0.995,
    seed: int = 0,
) -> Tuple[Homography, np.ndarray]:
    """Robust 4-point RANSAC with adaptive iteration count and a final inlier refit."""

    if len(src) != len(dst):
        raise ValueError(f"ransac_homography: {len(src)} source vs {len(dst)} destination points")
    if len(src) < 4:
        raise ValueError(f"ransac_homography needs at least 4 correspondences, got {len(src)}")
    if threshold_px <= 0:
        raise ValueError("threshold_px must be positive")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")

    rng = np.random.default_rng(seed)
    total = len(src)
    best_mask: np.ndarray | None = None
    best_count = 0
    best_score = math.inf
    best_model: Homography | None = None
    needed = float(max_iters)
    iteration = 0

    while iteration < min(max_iters, needed):
        iteration += 1
        sample = rng.choice(total, size=4, replace=False)
        try:
            model = dlt_homography(PointSet(src.pts[sample]), PointSet(dst.pts[sample]))
        except DegenerateConfigurationError:
            continue
        errors = transfer_errors(model, src, dst)
        mask = errors < threshold_px
        count = int(mask.sum())
        score = float(errors[mask].sum())
        if count > best_count or (count == best_count and count > 0 and score < best_score):
            best_mask, best_count, best_score, best_model = mask, count, score, model
            ratio = best_count / total
            if ratio >= 1.0:
                needed = 0.0
            elif ratio > 0.0:
                denom = math.log(1.0 - ratio**4)
                if denom < 0.0:
                    needed = math.log(1.0 - confidence) / denom

    if best_model is None or best_mask is None or best_count < 4:
        raise EstimationFailedError(
            f"no homography supported by >= 4 inliers after {iteration} iterations"
        )

    final = best_model
    final_mask = best_mask
    try:
        refit = dlt_homography(src.subset(best_mask), dst.subset(best_mask))
        final = refit
        final_mask = transfer_errors(refit, src, dst) < threshold_px
        if final_mask.sum() < 4:
            final, final_mask = best_model, best_mask
    except DegenerateConfigurationError:
        LOGGER.debug("ransac_refit_degenerate", extra={"inliers": best_count})

    LOGGER.debug(
        "ransac_finished",
        extra={"iterations": iteration, "inliers": int(final_mask.sum()), "total": total},
    )
    return final, final_mask



def image_corners(width: int, height: int) -> PointSet:
    return PointSet(
        np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]])
    )


def mean_corner_error(
    h_true: Homography,
    h_est: Homography,
    width: int,
    height: int,
    *,
    average: bool = False,
) -> float:
    """Sum of corner displacements between two homographies.

    The default sums over the four corners; ``average=True`` divides by 4.
    """

    corners = image_corners(width, height)
    a = apply_homography(h_true, corners).pts
    b = apply_homography(h_est, corners).pts
    total = float(np.linalg.norm(a - b, axis=1).sum())
    return total / 4.0 if average else total


def reprojection_errors(h_true: Homography, matches: "MatchSet") -> List[float]:
    projected, finite = project_points(h_true, PointSet(matches.points_a))
    errors = np.linalg.norm(projected - np.asarray(matches.points_b, dtype=np.float64), axis=1)
    errors = np.where(finite, errors, np.inf)
    return [float(e) for e in errors]


@dataclass(frozen=True)
class InlierStats:
    thresholds: Tuple[float, ...]
    counts: Tuple[int, ...]
    fractions: Tuple[float, ...]
    total: int
    empty: bool


def count_inliers(errors: Sequence[float], thresholds: Sequence[float]) -> InlierStats:
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    values = np.asarray(list(errors), dtype=np.float64)
    total = int(values.size)
    counts = tuple(int((values < t).sum()) for t in thresholds)
    if total == 0:
        fractions = tuple(0.0 for _ in thresholds)
    else:
        fractions = tuple(count / total for count in counts)
    return InlierStats(
        thresholds=tuple(float(t) for t in thresholds),
        counts=counts,
        fractions=fractions,
        total=total,
        empty=total == 0,
    )
