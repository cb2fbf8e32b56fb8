"""Descriptor sampling, similarity matrices, the contrastive loss and match extraction."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from condl.engine import (
    ShapeError,
    Tensor,
    add,
    grid_sample_bilinear,
    l2_normalize_rows,
    pairwise_dot,
    scale,
    softmax_cross_entropy_diag,
)

from .files import write_atomic
from .geometry import PointSet
from .model import FeatureMap

LOGGER = logging.getLogger(__name__)

MATCHES_HEADER = ("xa", "ya", "xb", "yb", "score", "mutual")


class MemoryBudgetError(MemoryError):
    """The inference similarity matrix would exceed the configured entry budget."""

    def __init__(self, rows: int, cols: int, budget: int) -> None:
        required = rows * cols
        super().__init__(
            f"similarity matrix needs {rows}×{cols} = {required} entries "
            f"({required * 8} bytes as float64), budget is {budget} entries; increase the stride"
        )
        self.required = required
        self.budget = budget


@dataclass
class SimilarityMatrix:
    """``s[i, j]``: descriptor of grid point ``i`` in A against projected point ``j`` in B."""

    s: Tensor

    def __post_init__(self) -> None:
        if self.s.data.ndim != 2 or self.s.shape[0] != self.s.shape[1]:
            raise ShapeError(f"similarity matrix must be square, got {self.s.shape}")

    @property
    def size(self) -> int:
        return int(self.s.shape[0])


@dataclass
class MatchSet:
    points_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    points_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mutual: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        self.points_a = np.asarray(self.points_a, dtype=np.float64).reshape(-1, 2)
        self.points_b = np.asarray(self.points_b, dtype=np.float64).reshape(-1, 2)
        count = self.points_a.shape[0]
        if self.points_b.shape[0] != count:
            raise ShapeError(f"match set has {count} A points but {self.points_b.shape[0]} B points")
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.size == 0 and count:
            self.scores = np.zeros(count)
        self.mutual = np.asarray(self.mutual, dtype=bool).reshape(-1)
        if self.mutual.size == 0 and count:
            self.mutual = np.zeros(count, dtype=bool)
        if self.scores.size != count or self.mutual.size != count:
            raise ShapeError("scores and mutual flags must have one entry per match")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("match scores must be finite")

    def __len__(self) -> int:
        return int(self.points_a.shape[0])

    def subset(self, mask: np.ndarray) -> "MatchSet":
        return MatchSet(self.points_a[mask], self.points_b[mask], self.scores[mask], self.mutual[mask])


def to_normalized(pts: PointSet, width: int, height: int) -> np.ndarray:
    """Pixel centres to the ``[-1, 1]`` convention of ``grid_sample_bilinear``."""

    return np.stack([(2.0 * pts.x + 1.0) / width - 1.0, (2.0 * pts.y + 1.0) / height - 1.0], axis=1)


def sample_descriptors(fmap: FeatureMap, pts: PointSet) -> Tensor:
    """Bilinearly sample ``fmap`` at pixel coordinates; returns ``N×d``."""

    width, height = fmap.width, fmap.height
    outside = ~((pts.x >= 0) & (pts.x <= width - 1) & (pts.y >= 0) & (pts.y <= height - 1))
    if np.any(outside):
        index = int(np.flatnonzero(outside)[0])
        x, y = pts.pts[index]
        raise ValueError(f"point {index} ({x:.3f}, {y:.3f}) lies outside the {width}×{height} feature map")
    dtype = fmap.data.data.dtype
    grid = Tensor(to_normalized(pts, width, height).astype(dtype), dtype=dtype)
    return grid_sample_bilinear(fmap.data, grid)


def similarity_matrix(da: Tensor, db: Tensor, temperature: float = 1.0) -> SimilarityMatrix:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if da.shape != db.shape:
        raise ShapeError(f"descriptor sets differ in shape: {da.shape} vs {db.shape}")
    s = pairwise_dot(da, db)
    if temperature != 1.0:
        s = scale(s, 1.0 / temperature)
    return SimilarityMatrix(s)


def contrastive_loss(sim: SimilarityMatrix) -> Tensor:
    """Mean of the row-wise and column-wise diagonal cross-entropies."""

    row = softmax_cross_entropy_diag(sim.s, "row")
    column = softmax_cross_entropy_diag(sim.s, "column")
    return scale(add(row, column), 0.5)


def descriptor_pair(
    fa: FeatureMap,
    fb: FeatureMap,
    pts_a: PointSet,
    pts_b: PointSet,
    normalize: bool = False,
) -> tuple[Tensor, Tensor]:
    da = sample_descriptors(fa, pts_a)
    db = sample_descriptors(fb, pts_b)
    if normalize:
        da, db = l2_normalize_rows(da), l2_normalize_rows(db)
    return da, db


def grid_accuracy(sim: SimilarityMatrix) -> float:
    """Fraction of rows whose argmax is the diagonal entry."""

    if sim.size == 0:
        return 0.0
    best = np.argmax(sim.s.data, axis=1)
    return float(np.mean(best == np.arange(sim.size)))


def inference_grid(width: int, height: int, stride_px: int) -> PointSet:
    """Noise-free pixel grid ``(0, stride, 2·stride, …)`` in row-major order."""

    if stride_px < 1:
        raise ValueError(f"stride_px must be >= 1, got {stride_px}")
    xs, ys = np.meshgrid(np.arange(0, width, stride_px), np.arange(0, height, stride_px))
    return PointSet(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64))


def _grid_descriptors(fmap: FeatureMap, grid: PointSet, normalize: bool) -> np.ndarray:
    cols = grid.x.astype(np.int64)
    rows = grid.y.astype(np.int64)
    descriptors = fmap.data.data[:, rows, cols].T.astype(np.float64)
    if normalize:
        descriptors = descriptors / np.sqrt((descriptors**2).sum(axis=1, keepdims=True) + 1e-12)
    return descriptors


def extract_matches(
    fa: FeatureMap,
    fb: FeatureMap,
    stride_px: int = 4,
    mutual_only: bool = False,
    score_min: Optional[float] = None,
    *,
    normalize: bool = False,
    max_entries: int = 64_000_000,
) -> MatchSet:
    """Match every A grid point to its best B grid point by dot product.

    Ties go to the lowest B index. ``mutual`` marks pairs that are also the best
    A point for their B point.
    """

    if fa.channels != fb.channels:
        raise ShapeError(f"feature maps differ in depth: {fa.channels} vs {fb.channels}")
    grid_a = inference_grid(fa.width, fa.height, stride_px)
    grid_b = inference_grid(fb.width, fb.height, stride_px)
    if len(grid_a) * len(grid_b) > max_entries:
        raise MemoryBudgetError(len(grid_a), len(grid_b), max_entries)

    scores = _grid_descriptors(fa, grid_a, normalize) @ _grid_descriptors(fb, grid_b, normalize).T
    best_b = np.argmax(scores, axis=1)
    best_a = np.argmax(scores, axis=0)
    rows = np.arange(len(grid_a))
    mutual = best_a[best_b] == rows
    matches = MatchSet(grid_a.pts, grid_b.pts[best_b], scores[rows, best_b], mutual)

    keep = np.ones(len(matches), dtype=bool)
    if mutual_only:
        keep &= matches.mutual
    if score_min is not None:
        keep &= matches.scores >= score_min
    if not keep.all():
        matches = matches.subset(keep)
    LOGGER.debug(
        "matches_extracted",
        extra={"grid_a": len(grid_a), "grid_b": len(grid_b), "kept": len(matches), "stride": stride_px},
    )
    return matches


def matches_to_csv(matches: MatchSet) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MATCHES_HEADER)
    for (xa, ya), (xb, yb), score, mutual in zip(
        matches.points_a, matches.points_b, matches.scores, matches.mutual
    ):
        writer.writerow([f"{xa:g}", f"{ya:g}", f"{xb:g}", f"{yb:g}", repr(float(score)), int(mutual)])
    return buffer.getvalue()


async def write_matches_csv(matches: MatchSet, path: Path) -> None:
    await write_atomic(path, matches_to_csv(matches).encode("utf-8"))
    LOGGER.info("matches_written", extra={"path": str(path), "count": len(matches)})
