"""Pydantic models describing the JSON documents the pipeline reads and writes."""
from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, NonNegativeInt, field_validator

HomographyConvention = Literal["a_to_b_pixels_m22_1"]


class HomographyModel(BaseModel):
    h: List[List[float]] = Field(..., description="Row-major 3×3 matrix acting on (x, y, 1).")
    convention: HomographyConvention = Field(
        "a_to_b_pixels_m22_1", description="Maps image-A pixels to image-B pixels, m22 == 1."
    )

    @field_validator("h")
    @classmethod
    def _check_shape(cls, value: List[List[float]]) -> List[List[float]]:
        if len(value) != 3 or any(len(row) != 3 for row in value):
            raise ValueError("homography must be a 3×3 matrix")
        return value

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "HomographyModel":
        return cls(h=[[float(v) for v in row] for row in np.asarray(matrix, dtype=np.float64)])


class DatasetManifest(BaseModel):
    count: int = Field(..., ge=0, description="Number of pairs in the directory.")
    width: int = Field(..., ge=16)
    height: int = Field(..., ge=16)
    config_digest: str = Field(..., description="Digest of the distortion parameters.")
    seed: int = Field(..., description="Base seed the pairs were generated from.")


class PairMetadata(BaseModel):
    """Per-pair generation record stored next to the homography."""

    seed: int
    config_digest: str
    fill_color: Tuple[int, int, int] = (0, 0, 0)
    shadows: int = 0
    highlights: int = 0
    occluders: int = 0


class PairHomographyFile(HomographyModel):
    metadata: Optional[PairMetadata] = None


class TensorEntry(BaseModel):
    name: str
    kind: Literal["param", "buffer", "adam_m", "adam_v"]
    shape: List[NonNegativeInt]


class CheckpointMetadata(BaseModel):
    format: Literal["condl-checkpoint"] = "condl-checkpoint"
    block_layout: Literal["post_activation_residual"] = "post_activation_residual"
    model: Dict[str, Any]
    matching: Dict[str, Any]
    step: int = Field(..., ge=0)
    adam_t: int = Field(..., ge=0)
    bn_updates: int = Field(0, ge=0)
    loss_tail: List[float] = Field(default_factory=list)
    entries: List[TensorEntry] = Field(default_factory=list)


class ThresholdTotals(BaseModel):
    threshold_px: float
    total_inliers: int
    total_matches: int
    mean_fraction: float


class CurvePoint(BaseModel):
    threshold_px: float
    cumulative_fraction: float


class SkippedPair(BaseModel):
    pair_id: int
    reason: str


class RansacEcho(BaseModel):
    threshold_px: float
    max_iters: int
    confidence: float
    seed: int


class EvalSummaryModel(BaseModel):
    pairs_total: int
    pairs_evaluated: int
    ransac_failures: int
    thresholds: List[ThresholdTotals]
    curve: List[CurvePoint]
    skipped: List[SkippedPair] = Field(default_factory=list)
    stride_px: int
    mutual: bool
    score_min: Optional[float] = None
    ransac: RansacEcho
    mce_convention: Literal["sum_over_corners", "mean_over_corners"] = "sum_over_corners"
    checkpoint_digest: Optional[str] = None
    median_mce_px: Optional[float] = None
    matcher: Literal["model", "random"] = "model"


class TrainRunEcho(BaseModel):
    """Configuration a training run was started with (``train_config.json``)."""

    dataset: str
    dataset_count: int
    steps_per_epoch: int
    training: Dict[str, Any]
    model: Dict[str, Any]
    matching: Dict[str, Any]
