"""Batch evaluation: matching, RANSAC, corner error and inlier statistics per pair."""

from __future__ import annotations

import asyncio
import csv
import hashlib
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from condl.config import EvaluationConfig, MatchingConfig, RansacConfig
from condl.schemas import (
    CurvePoint,
    EvalSummaryModel,
    RansacEcho,
    SkippedPair,
    ThresholdTotals,
)

from .analytics import AnalyticsTracker, NullAnalytics
from .dataset import DatasetError, load_pair, open_dataset
from .files import write_atomic
from .geometry import (
    DegenerateConfigurationError,
    EstimationFailedError,
    PointAtInfinityError,
    PointSet,
    count_inliers,
    mean_corner_error,
    project_points,
    ransac_homography,
    reprojection_errors,
)
from .matching import MatchSet, extract_matches, inference_grid
from .model import ModelParams, extract_feature_batch, pair_tensor
from .synthgen import SamplePair

LOGGER = logging.getLogger(__name__)

DEFAULT_THRESHOLDS: Tuple[float, ...] = (0.1, 1.0, 10.0)
SUMMARY_FILE = "eval_summary.json"
RECORDS_FILE = "eval_records.csv"
CURVE_FILE = "mce_curve.csv"
INLIERS_FILE = "inliers.csv"
TIMINGS_FILE = "eval_timings.csv"
STRIDE_SWEEP_FILE = "stride_sweep.csv"
BASELINE_FILE = "baseline_comparison.csv"
BASELINE_DIR = "baseline_random"

EvalSummary = EvalSummaryModel


@dataclass
class EvalRecord:
    pair_id: int
    n_matches: int
    ransac_succeeded: bool
    mce_px: Optional[float]
    ransac_inliers: int
    thresholds: Tuple[float, ...]
    inlier_counts: Tuple[int, ...]
    inlier_fractions: Tuple[float, ...]
    runtime_ms: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if (self.mce_px is not None) != self.ransac_succeeded:
            raise ValueError("mce_px must be present exactly when RANSAC succeeded")
        if any(not 0.0 <= f <= 1.0 for f in self.inlier_fractions):
            raise ValueError("inlier fractions must lie in [0, 1]")


def threshold_label(threshold: float) -> str:
    return f"{threshold:g}"


def pair_ransac_seed(pair_id: int, base_seed: int) -> int:
    digest = hashlib.blake2b(f"{pair_id}:{base_seed}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**31 - 1)


def evaluate_matches(
    pair: SamplePair,
    matches: MatchSet,
    ransac_cfg: RansacConfig,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    *,
    seed: Optional[int] = None,
    mce_average: bool = False,
) -> EvalRecord:
    """Score ``matches`` against the pair's ground truth; RANSAC failures are recorded."""

    stats = count_inliers(reprojection_errors(pair.h_ab, matches), thresholds)
    started = time.perf_counter()
    mce: Optional[float] = None
    ransac_inliers = 0
    if len(matches) >= 4:
        try:
            h_est, mask = ransac_homography(
                PointSet(matches.points_a),
                PointSet(matches.points_b),
                threshold_px=ransac_cfg.threshold_px,
                max_iters=ransac_cfg.max_iters,
                confidence=ransac_cfg.confidence,
                seed=ransac_cfg.seed if seed is None else seed,
            )
            mce = mean_corner_error(pair.h_ab, h_est, pair.width, pair.height, average=mce_average)
            ransac_inliers = int(mask.sum())
        except (EstimationFailedError, DegenerateConfigurationError, PointAtInfinityError) as exc:
            LOGGER.debug("ransac_failed", extra={"pair_id": pair.pair_id, "reason": str(exc)})
            mce = None
            ransac_inliers = 0
    ransac_ms = (time.perf_counter() - started) * 1000.0

    return EvalRecord(
        pair_id=pair.pair_id,
        n_matches=len(matches),
        ransac_succeeded=mce is not None,
        mce_px=mce,
        ransac_inliers=ransac_inliers,
        thresholds=stats.thresholds,
        inlier_counts=stats.counts,
        inlier_fractions=stats.fractions,
        runtime_ms={"ransac": ransac_ms},
    )


def evaluate_pair(
    params: ModelParams,
    pair: SamplePair,
    stride_px: int,
    mutual: bool,
    ransac_cfg: RansacConfig,
    *,
    score_min: Optional[float] = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    matching: Optional[MatchingConfig] = None,
    mce_average: bool = False,
    seed: Optional[int] = None,
) -> EvalRecord:
    matching = matching or MatchingConfig()
    started = time.perf_counter()
    fa, fb = extract_feature_batch(params, pair_tensor(pair.image_a, pair.image_b), training=False)
    features_ms = (time.perf_counter() - started) * 1000.0

    started = time.perf_counter()
    matches = extract_matches(
        fa,
        fb,
        stride_px,
        mutual,
        score_min,
        normalize=matching.normalize_descriptors,
        max_entries=matching.max_similarity_entries,
    )
    match_ms = (time.perf_counter() - started) * 1000.0

    record = evaluate_matches(pair, matches, ransac_cfg, thresholds, seed=seed, mce_average=mce_average)
    record.runtime_ms = {"features": features_ms, "matching": match_ms, **record.runtime_ms}
    return record


def oracle_matches(pair: SamplePair, stride_px: int = 4) -> MatchSet:
    """Grid points of A matched to their exact ground-truth projections in B."""

    grid = inference_grid(pair.width, pair.height, stride_px)
    projected, finite = project_points(pair.h_ab, grid)
    inside = finite.copy()
    safe = np.where(finite[:, None], projected, 0.0)
    inside &= (safe[:, 0] >= 0) & (safe[:, 0] <= pair.width - 1)
    inside &= (safe[:, 1] >= 0) & (safe[:, 1] <= pair.height - 1)
    return MatchSet(grid.pts[inside], safe[inside], np.ones(int(inside.sum())), np.ones(int(inside.sum()), dtype=bool))


def random_matches(width: int, height: int, count: int, seed: int) -> MatchSet:
    """Uniformly random point pairs; the chance baseline for inlier statistics."""

    rng = np.random.default_rng(seed)
    scale = np.array([width - 1.0, height - 1.0])
    return MatchSet(rng.uniform(0.0, 1.0, (count, 2)) * scale, rng.uniform(0.0, 1.0, (count, 2)) * scale)


def random_inlier_fraction(threshold: float, width: int, height: int) -> float:
    """Expected inlier fraction of a random matcher: disc area over image area."""

    return float(np.pi * threshold**2 / (width * height))


def random_pair_record(
    pair: SamplePair,
    count: int,
    ransac_cfg: RansacConfig,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    *,
    mce_average: bool = False,
) -> EvalRecord:
    seed = pair_ransac_seed(pair.pair_id, ransac_cfg.seed)
    matches = random_matches(pair.width, pair.height, count, seed)
    return evaluate_matches(pair, matches, ransac_cfg, thresholds, seed=seed, mce_average=mce_average)


def random_matcher_baseline(
    pairs: Sequence[SamplePair],
    count: int,
    ransac_cfg: RansacConfig,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    seed: int = 0,
) -> List[EvalRecord]:
    seeded = replace(ransac_cfg, seed=seed)
    return [random_pair_record(pair, count, seeded, thresholds) for pair in pairs]


def cumulative_mce_curve(records: Sequence[EvalRecord], max_mce_px: float, n_bins: int) -> List[CurvePoint]:
    """Fraction of all pairs with ``mce <= τ`` for ``n_bins`` thresholds on ``[0, max_mce_px]``.

    Failed pairs never count.
    """

    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    taus = np.linspace(0.0, max_mce_px, n_bins)
    values = np.array([r.mce_px for r in records if r.ransac_succeeded], dtype=np.float64)
    total = len(records)
    points = []
    for tau in taus:
        fraction = float((values <= tau).sum()) / total if total else 0.0
        points.append(CurvePoint(threshold_px=float(tau), cumulative_fraction=fraction))
    return points


def summarize(
    records: Sequence[EvalRecord],
    cfg: EvaluationConfig,
    *,
    pairs_total: Optional[int] = None,
    skipped: Sequence[SkippedPair] = (),
    checkpoint_digest: Optional[str] = None,
    matcher: str = "model",
) -> EvalSummary:
    thresholds = tuple(cfg.thresholds)
    totals = []
    for index, threshold in enumerate(thresholds):
        fractions = [r.inlier_fractions[index] for r in records]
        totals.append(
            ThresholdTotals(
                threshold_px=threshold,
                total_inliers=sum(r.inlier_counts[index] for r in records),
                total_matches=sum(r.n_matches for r in records),
                mean_fraction=float(np.mean(fractions)) if fractions else 0.0,
            )
        )
    succeeded = [r.mce_px for r in records if r.mce_px is not None]
    return EvalSummary(
        pairs_total=pairs_total if pairs_total is not None else len(records) + len(skipped),
        pairs_evaluated=len(records),
        ransac_failures=sum(1 for r in records if not r.ransac_succeeded),
        thresholds=totals,
        curve=cumulative_mce_curve(records, cfg.max_mce_px, cfg.n_bins),
        skipped=list(skipped),
        stride_px=cfg.stride_px,
        mutual=cfg.mutual,
        score_min=cfg.score_min,
        ransac=RansacEcho(
            threshold_px=cfg.ransac.threshold_px,
            max_iters=cfg.ransac.max_iters,
            confidence=cfg.ransac.confidence,
            seed=cfg.ransac.seed,
        ),
        mce_convention="mean_over_corners" if cfg.mce_average else "sum_over_corners",
        checkpoint_digest=checkpoint_digest,
        median_mce_px=float(np.median(succeeded)) if succeeded else None,
        matcher=matcher,
    )


def _evaluate_each(
    dataset_dir: Path,
    cfg: EvaluationConfig,
    evaluate_one: Callable[[SamplePair], EvalRecord],
    analytics: AnalyticsTracker | NullAnalytics,
    metric: str,
) -> Tuple[List[EvalRecord], List[SkippedPair], int]:
    """Run ``evaluate_one`` on every pair in id order; failures become ``SkippedPair``s."""

    index = open_dataset(dataset_dir)
    if index.manifest is None or not index.ids:
        raise DatasetError(f"dataset {dataset_dir} is empty")

    def _run(pair_id: int) -> EvalRecord | SkippedPair:
        try:
            pair = load_pair(dataset_dir, pair_id, index.manifest)
            with analytics.track_time(metric):
                return evaluate_one(pair)
        except Exception as exc:
            LOGGER.error("eval_pair_failed", extra={"pair_id": pair_id, "error": str(exc)})
            return SkippedPair(pair_id=pair_id, reason=f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        outcomes = list(pool.map(_run, index.ids))

    records = [o for o in outcomes if isinstance(o, EvalRecord)]
    skipped = [o for o in outcomes if isinstance(o, SkippedPair)]
    return records, skipped, len(index.ids)


def evaluate_dataset(
    params: ModelParams,
    dataset_dir: Path,
    cfg: EvaluationConfig,
    *,
    matching: Optional[MatchingConfig] = None,
    checkpoint_digest: Optional[str] = None,
    analytics: AnalyticsTracker | NullAnalytics | None = None,
) -> Tuple[EvalSummary, List[EvalRecord]]:
    """Evaluate every pair; per-pair failures are quarantined into ``summary.skipped``."""

    analytics = analytics or NullAnalytics()

    def _one(pair: SamplePair) -> EvalRecord:
        return evaluate_pair(
            params,
            pair,
            cfg.stride_px,
            cfg.mutual,
            cfg.ransac,
            score_min=cfg.score_min,
            thresholds=cfg.thresholds,
            matching=matching,
            mce_average=cfg.mce_average,
            seed=pair_ransac_seed(pair.pair_id, cfg.ransac.seed),
        )

    records, skipped, total = _evaluate_each(dataset_dir, cfg, _one, analytics, "eval_pair")
    summary = summarize(records, cfg, pairs_total=total, skipped=skipped, checkpoint_digest=checkpoint_digest)
    analytics.flush()
    LOGGER.info(
        "evaluation_finished",
        extra={
            "pairs": summary.pairs_total,
            "evaluated": summary.pairs_evaluated,
            "ransac_failures": summary.ransac_failures,
            "median_mce_px": summary.median_mce_px,
            "stride": cfg.stride_px,
        },
    )
    return summary, records


def evaluate_random_baseline(
    dataset_dir: Path,
    cfg: EvaluationConfig,
    *,
    counts: Optional[Mapping[int, int]] = None,
    analytics: AnalyticsTracker | NullAnalytics | None = None,
) -> Tuple[EvalSummary, List[EvalRecord]]:
    """Random matcher over a dataset.

    ``counts`` gives the number of matches per pair id, normally the counts the
    model produced; pairs without an entry get one match per stride grid point.
    """

    analytics = analytics or NullAnalytics()
    counts = counts or {}

    def _one(pair: SamplePair) -> EvalRecord:
        count = counts.get(pair.pair_id)
        if count is None:
            count = len(inference_grid(pair.width, pair.height, cfg.stride_px))
        return random_pair_record(pair, count, cfg.ransac, cfg.thresholds, mce_average=cfg.mce_average)

    records, skipped, total = _evaluate_each(dataset_dir, cfg, _one, analytics, "eval_random_pair")
    summary = summarize(records, cfg, pairs_total=total, skipped=skipped, matcher="random")
    analytics.flush()
    LOGGER.info(
        "random_baseline_finished",
        extra={"pairs": summary.pairs_total, "ransac_failures": summary.ransac_failures},
    )
    return summary, records


def sweep_strides(
    params: ModelParams,
    dataset_dir: Path,
    cfg: EvaluationConfig,
    strides: Sequence[int],
    *,
    matching: Optional[MatchingConfig] = None,
    checkpoint_digest: Optional[str] = None,
    analytics: AnalyticsTracker | NullAnalytics | None = None,
) -> Dict[int, Tuple[EvalSummary, List[EvalRecord]]]:
    """Evaluate the same checkpoint and pairs once per stride, smallest stride first."""

    if not strides:
        raise ValueError("sweep_strides needs at least one stride")
    if any(stride < 1 for stride in strides):
        raise ValueError(f"strides must be >= 1, got {list(strides)}")
    return {
        stride: evaluate_dataset(
            params,
            dataset_dir,
            replace(cfg, stride_px=stride),
            matching=matching,
            checkpoint_digest=checkpoint_digest,
            analytics=analytics,
        )
        for stride in sorted(set(strides))
    }


# --- report files ------------------------------------------------------------


def records_header(thresholds: Sequence[float]) -> List[str]:
    header = ["pair_id", "n_matches", "ransac_succeeded", "mce_px", "ransac_inliers"]
    for threshold in thresholds:
        label = threshold_label(threshold)
        header += [f"inliers_{label}", f"fraction_{label}"]
    return header


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def records_csv(records: Sequence[EvalRecord], thresholds: Sequence[float]) -> str:
    rows = []
    for record in records:
        row: List[object] = [
            record.pair_id,
            record.n_matches,
            int(record.ransac_succeeded),
            "" if record.mce_px is None else repr(record.mce_px),
            record.ransac_inliers,
        ]
        for count, fraction in zip(record.inlier_counts, record.inlier_fractions):
            row += [count, repr(fraction)]
        rows.append(row)
    return _csv_text(records_header(thresholds), rows)


def curve_csv(curve: Sequence[CurvePoint]) -> str:
    return _csv_text(
        ["threshold_px", "cumulative_fraction"],
        [[repr(p.threshold_px), repr(p.cumulative_fraction)] for p in curve],
    )


def inliers_csv(totals: Sequence[ThresholdTotals]) -> str:
    return _csv_text(
        ["threshold_px", "total_inliers", "mean_fraction"],
        [[repr(t.threshold_px), t.total_inliers, repr(t.mean_fraction)] for t in totals],
    )


def timings_csv(records: Sequence[EvalRecord]) -> str:
    stages = ["features", "matching", "ransac"]
    return _csv_text(
        ["pair_id", *(f"{stage}_ms" for stage in stages)],
        [[r.pair_id, *(f"{r.runtime_ms.get(stage, 0.0):.3f}" for stage in stages)] for r in records],
    )


async def emit_report(summary: EvalSummary, records: Sequence[EvalRecord], out_dir: Path) -> List[Path]:
    """Write summary JSON plus records, curve, inlier and timing CSVs."""

    thresholds = [t.threshold_px for t in summary.thresholds]
    documents = {
        SUMMARY_FILE: summary.model_dump_json(indent=2),
        RECORDS_FILE: records_csv(records, thresholds),
        CURVE_FILE: curve_csv(summary.curve),
        INLIERS_FILE: inliers_csv(summary.thresholds),
        TIMINGS_FILE: timings_csv(records),
    }
    paths = [out_dir / name for name in documents]
    await asyncio.gather(
        *(write_atomic(path, text.encode("utf-8")) for path, text in zip(paths, documents.values()))
    )
    LOGGER.info("report_written", extra={"path": str(out_dir), "files": len(paths)})
    return paths


def stride_dir_name(stride_px: int) -> str:
    return f"stride_{stride_px}"


def stride_sweep_csv(summaries: Mapping[int, EvalSummary]) -> str:
    """One row per stride: RANSAC success rate, median MCE and inlier totals side by side."""

    strides = sorted(summaries)
    labels = [threshold_label(t.threshold_px) for t in summaries[strides[0]].thresholds] if strides else []
    header = ["stride_px", "pairs_total", "pairs_evaluated", "ransac_successes", "success_rate", "median_mce_px"]
    header.append("total_matches")
    for label in labels:
        header += [f"inliers_{label}", f"mean_fraction_{label}"]

    rows = []
    for stride in strides:
        summary = summaries[stride]
        successes = summary.pairs_evaluated - summary.ransac_failures
        rate = successes / summary.pairs_total if summary.pairs_total else 0.0
        row: List[object] = [
            stride,
            summary.pairs_total,
            summary.pairs_evaluated,
            successes,
            repr(rate),
            "" if summary.median_mce_px is None else repr(summary.median_mce_px),
            summary.thresholds[0].total_matches if summary.thresholds else 0,
        ]
        for totals in summary.thresholds:
            row += [totals.total_inliers, repr(totals.mean_fraction)]
        rows.append(row)
    return _csv_text(header, rows)


async def emit_stride_sweep(
    results: Mapping[int, Tuple[EvalSummary, Sequence[EvalRecord]]], out_dir: Path
) -> List[Path]:
    """Full report per stride under ``stride_N/`` plus ``stride_sweep.csv`` at the top."""

    written: List[Path] = []
    for stride, (summary, records) in sorted(results.items()):
        written += await emit_report(summary, records, out_dir / stride_dir_name(stride))
    sweep_path = out_dir / STRIDE_SWEEP_FILE
    text = stride_sweep_csv({stride: summary for stride, (summary, _) in results.items()})
    await write_atomic(sweep_path, text.encode("utf-8"))
    written.append(sweep_path)
    return written


def baseline_csv(model: EvalSummary, baseline: EvalSummary) -> str:
    """Mean inlier fraction of the model against the random matcher, per threshold."""

    rows = []
    for mine, chance in zip(model.thresholds, baseline.thresholds):
        ratio = "" if chance.mean_fraction == 0 else repr(mine.mean_fraction / chance.mean_fraction)
        rows.append([repr(mine.threshold_px), repr(mine.mean_fraction), repr(chance.mean_fraction), ratio])
    return _csv_text(["threshold_px", "model_mean_fraction", "random_mean_fraction", "ratio"], rows)


async def emit_baseline_report(
    model: EvalSummary, baseline: EvalSummary, records: Sequence[EvalRecord], out_dir: Path
) -> List[Path]:
    written = await emit_report(baseline, records, out_dir / BASELINE_DIR)
    comparison = out_dir / BASELINE_FILE
    await write_atomic(comparison, baseline_csv(model, baseline).encode("utf-8"))
    written.append(comparison)
    return written


def load_records(path: Path) -> List[EvalRecord]:
    """Parse an ``eval_records.csv`` written by :func:`emit_report`."""

    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        labels = [name[len("inliers_") :] for name in header if name.startswith("inliers_")]
        thresholds = tuple(float(label) for label in labels)
        records = []
        for row in reader:
            values = dict(zip(header, row))
            succeeded = values["ransac_succeeded"] == "1"
            records.append(
                EvalRecord(
                    pair_id=int(values["pair_id"]),
                    n_matches=int(values["n_matches"]),
                    ransac_succeeded=succeeded,
                    mce_px=float(values["mce_px"]) if succeeded else None,
                    ransac_inliers=int(values["ransac_inliers"]),
                    thresholds=thresholds,
                    inlier_counts=tuple(int(values[f"inliers_{label}"]) for label in labels),
                    inlier_fractions=tuple(float(values[f"fraction_{label}"]) for label in labels),
                )
            )
    return records
