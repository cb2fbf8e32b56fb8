from __future__ import annotations

import asyncio
import csv
import json
from pathlib import Path

import numpy as np
import pytest

from condl.config import DistortionConfig, EvaluationConfig, ModelConfig, RansacConfig
from condl.services.dataset import DatasetError, write_dataset
from condl.services.evaluation import (
    BASELINE_DIR,
    BASELINE_FILE,
    STRIDE_SWEEP_FILE,
    EvalRecord,
    baseline_csv,
    cumulative_mce_curve,
    emit_baseline_report,
    emit_report,
    emit_stride_sweep,
    evaluate_dataset,
    evaluate_matches,
    evaluate_random_baseline,
    load_records,
    oracle_matches,
    pair_ransac_seed,
    random_inlier_fraction,
    random_matcher_baseline,
    records_csv,
    records_header,
    stride_dir_name,
    summarize,
    sweep_strides,
)
from condl.services.model import init_model
from condl.services.synthgen import generate_dataset, generate_pair, procedural_image

THRESHOLDS = (0.1, 1.0, 10.0)


def _record(pair_id: int, mce: float | None, n_matches: int = 10) -> EvalRecord:
    return EvalRecord(
        pair_id=pair_id,
        n_matches=n_matches,
        ransac_succeeded=mce is not None,
        mce_px=mce,
        ransac_inliers=n_matches if mce is not None else 0,
        thresholds=THRESHOLDS,
        inlier_counts=(1, 5, n_matches),
        inlier_fractions=(0.1, 0.5, 1.0),
    )


def test_oracle_matcher_recovers_the_homography() -> None:
    pair = generate_pair(procedural_image(64, seed=1), DistortionConfig(seed=2))
    matches = oracle_matches(pair, stride_px=4)
    record = evaluate_matches(pair, matches, RansacConfig(), THRESHOLDS, seed=0)
    assert record.ransac_succeeded
    assert record.mce_px is not None and record.mce_px < 1e-6
    assert record.inlier_fractions == (1.0, 1.0, 1.0)
    assert record.ransac_inliers == record.n_matches


def test_too_few_matches_count_as_failure() -> None:
    pair = generate_pair(procedural_image(32, seed=1), DistortionConfig.disabled())
    matches = oracle_matches(pair, stride_px=16)
    few = matches.subset(np.arange(len(matches)) < 3)
    record = evaluate_matches(pair, few, RansacConfig(), THRESHOLDS)
    assert not record.ransac_succeeded and record.mce_px is None
    assert record.n_matches == 3


def test_curve_counts_failures_as_misses() -> None:
    records = [_record(0, 1.0), _record(1, 2.0), _record(2, 3.0)]
    curve = cumulative_mce_curve(records, max_mce_px=5.0, n_bins=3)
    assert [p.threshold_px for p in curve] == [0.0, 2.5, 5.0]
    assert curve[1].cumulative_fraction == pytest.approx(2 / 3)
    assert curve[2].cumulative_fraction == 1.0

    perfect = cumulative_mce_curve([_record(0, 0.0), _record(1, 0.0)], 50.0, 101)
    assert all(p.cumulative_fraction == 1.0 for p in perfect)

    failed = cumulative_mce_curve([_record(0, None), _record(1, None)], 50.0, 101)
    assert all(p.cumulative_fraction == 0.0 for p in failed)

    fractions = [p.cumulative_fraction for p in cumulative_mce_curve(records + [_record(3, None)], 5.0, 11)]
    assert fractions == sorted(fractions)
    assert fractions[-1] == 0.75


def test_summary_totals() -> None:
    records = [_record(0, 1.0), _record(1, None, n_matches=20)]
    summary = summarize(records, EvaluationConfig(), checkpoint_digest="abc")
    assert summary.pairs_total == summary.pairs_evaluated == 2
    assert summary.ransac_failures == 1
    assert [t.total_inliers for t in summary.thresholds] == [2, 10, 30]
    assert summary.thresholds[0].total_matches == 30
    assert summary.median_mce_px == 1.0
    assert len(summary.curve) == 101


def test_random_baseline_is_near_chance() -> None:
    pair = generate_pair(procedural_image(64, seed=3), DistortionConfig.mild(seed=1))
    records = random_matcher_baseline([pair], count=4000, ransac_cfg=RansacConfig(max_iters=50), seed=5)
    fraction = records[0].inlier_fractions[2]
    assert abs(fraction - random_inlier_fraction(10.0, 64, 64)) < 0.05
    assert pair_ransac_seed(3, 0) == pair_ransac_seed(3, 0) != pair_ransac_seed(4, 0)


def test_emit_report_and_reload(tmp_path: Path) -> None:
    records = [_record(0, 1.25), _record(1, None)]
    summary = summarize(records, EvaluationConfig())
    paths = asyncio.run(emit_report(summary, records, tmp_path))
    assert sorted(p.name for p in paths) == [
        "eval_records.csv",
        "eval_summary.json",
        "eval_timings.csv",
        "inliers.csv",
        "mce_curve.csv",
    ]

    with (tmp_path / "eval_records.csv").open(encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == records_header(THRESHOLDS)
    assert rows[0][-2:] == ["inliers_10", "fraction_10"]
    assert len(rows) == 3
    assert rows[2][3] == ""

    curve_rows = (tmp_path / "mce_curve.csv").read_text(encoding="utf-8").splitlines()
    assert curve_rows[0] == "threshold_px,cumulative_fraction"
    assert len(curve_rows) == 102
    inlier_rows = (tmp_path / "inliers.csv").read_text(encoding="utf-8").splitlines()
    assert inlier_rows[0] == "threshold_px,total_inliers,mean_fraction"
    assert len(inlier_rows) == 4

    document = json.loads((tmp_path / "eval_summary.json").read_text(encoding="utf-8"))
    assert document["ransac_failures"] == 1

    reloaded = load_records(tmp_path / "eval_records.csv")
    assert [(r.pair_id, r.mce_px, r.inlier_counts) for r in reloaded] == [
        (0, 1.25, (1, 5, 10)),
        (1, None, (1, 5, 10)),
    ]


def test_evaluate_dataset_end_to_end(tmp_path: Path) -> None:
    data = tmp_path / "data"
    asyncio.run(write_dataset(generate_dataset(2, 32, DistortionConfig.mild(), seed=1), data, seed=1))
    params = init_model(ModelConfig(blocks=1, channels=4))
    cfg = EvaluationConfig(stride_px=8, workers=2)
    summary, records = evaluate_dataset(params, data, cfg, checkpoint_digest="d")
    assert summary.pairs_total == 2
    assert summary.pairs_evaluated + len(summary.skipped) == 2
    assert [r.pair_id for r in records] == sorted(r.pair_id for r in records)
    for record in records:
        assert record.n_matches == 16
        assert set(record.runtime_ms) == {"features", "matching", "ransac"}


def test_evaluate_dataset_rejects_empty_directory(tmp_path: Path) -> None:
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DatasetError):
        evaluate_dataset(init_model(ModelConfig(blocks=1, channels=4)), empty, EvaluationConfig())


def _small_dataset(root: Path, count: int = 2) -> Path:
    asyncio.run(write_dataset(generate_dataset(count, 32, DistortionConfig.mild(), seed=1), root, seed=1))
    return root


def test_evaluate_dataset_twice_gives_identical_records(tmp_path: Path) -> None:
    data = _small_dataset(tmp_path / "data", count=3)
    params = init_model(ModelConfig(blocks=1, channels=4))
    cfg = EvaluationConfig(stride_px=8, workers=2)
    first_summary, first = evaluate_dataset(params, data, cfg)
    second_summary, second = evaluate_dataset(params, data, cfg)
    assert records_csv(first, cfg.thresholds) == records_csv(second, cfg.thresholds)
    assert first_summary.thresholds == second_summary.thresholds
    assert first_summary.curve == second_summary.curve


def test_summary_recomputed_from_written_records_matches(tmp_path: Path) -> None:
    data = _small_dataset(tmp_path / "data", count=3)
    cfg = EvaluationConfig(stride_px=8)
    summary, records = evaluate_dataset(init_model(ModelConfig(blocks=1, channels=4)), data, cfg)
    asyncio.run(emit_report(summary, records, tmp_path / "report"))

    reloaded = load_records(tmp_path / "report" / "eval_records.csv")
    again = summarize(reloaded, cfg, pairs_total=summary.pairs_total, skipped=summary.skipped)
    assert again.thresholds == summary.thresholds
    assert again.curve == summary.curve
    assert again.median_mce_px == summary.median_mce_px
    assert again.ransac_failures == summary.ransac_failures


def test_sweep_strides_evaluates_each_stride_once(tmp_path: Path) -> None:
    data = _small_dataset(tmp_path / "data")
    params = init_model(ModelConfig(blocks=1, channels=4))
    results = sweep_strides(params, data, EvaluationConfig(), [8, 4, 8], checkpoint_digest="d")
    assert list(results) == [4, 8]
    for stride, expected in ((4, 64), (8, 16)):
        summary, records = results[stride]
        assert summary.stride_px == stride
        assert summary.checkpoint_digest == "d"
        assert all(r.n_matches == expected for r in records)

    with pytest.raises(ValueError):
        sweep_strides(params, data, EvaluationConfig(), [])
    with pytest.raises(ValueError):
        sweep_strides(params, data, EvaluationConfig(), [4, 0])


def test_stride_sweep_report_layout(tmp_path: Path) -> None:
    data = _small_dataset(tmp_path / "data")
    results = sweep_strides(init_model(ModelConfig(blocks=1, channels=4)), data, EvaluationConfig(), [4, 8])
    out = tmp_path / "sweep"
    asyncio.run(emit_stride_sweep(results, out))

    for stride in (4, 8):
        assert (out / stride_dir_name(stride) / "eval_summary.json").exists()
    with (out / STRIDE_SWEEP_FILE).open(encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["stride_px"] for row in rows] == ["4", "8"]
    assert list(rows[0])[:7] == [
        "stride_px",
        "pairs_total",
        "pairs_evaluated",
        "ransac_successes",
        "success_rate",
        "median_mce_px",
        "total_matches",
    ]
    assert list(rows[0])[-2:] == ["inliers_10", "mean_fraction_10"]
    assert [row["total_matches"] for row in rows] == ["128", "32"]
    for row in rows:
        rate = float(row["success_rate"])
        assert rate == int(row["ransac_successes"]) / int(row["pairs_total"])


def test_random_baseline_over_a_dataset(tmp_path: Path) -> None:
    data = _small_dataset(tmp_path / "data")
    cfg = EvaluationConfig(stride_px=8)
    summary, records = evaluate_random_baseline(data, cfg, counts={0: 30})
    assert summary.matcher == "random"
    assert summary.pairs_total == 2
    assert {r.pair_id: r.n_matches for r in records} == {0: 30, 1: 16}

    _, again = evaluate_random_baseline(data, cfg, counts={0: 30})
    assert records_csv(records, cfg.thresholds) == records_csv(again, cfg.thresholds)


def test_baseline_report_compares_mean_fractions(tmp_path: Path) -> None:
    data = _small_dataset(tmp_path / "data")
    cfg = EvaluationConfig(stride_px=8)
    model, model_records = evaluate_dataset(init_model(ModelConfig(blocks=1, channels=4)), data, cfg)
    baseline, records = evaluate_random_baseline(data, cfg, counts={r.pair_id: r.n_matches for r in model_records})
    asyncio.run(emit_baseline_report(model, baseline, records, tmp_path / "out"))

    assert (tmp_path / "out" / BASELINE_DIR / "eval_summary.json").exists()
    with (tmp_path / "out" / BASELINE_FILE).open(encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [float(row["threshold_px"]) for row in rows] == [0.1, 1.0, 10.0]
    for row, mine, chance in zip(rows, model.thresholds, baseline.thresholds):
        assert float(row["model_mean_fraction"]) == mine.mean_fraction
        assert float(row["random_mean_fraction"]) == chance.mean_fraction


def test_baseline_ratio_is_blank_when_chance_never_hits() -> None:
    model = summarize([_record(0, 1.0)], EvaluationConfig())
    zero = EvalRecord(
        pair_id=0,
        n_matches=10,
        ransac_succeeded=False,
        mce_px=None,
        ransac_inliers=0,
        thresholds=THRESHOLDS,
        inlier_counts=(0, 0, 0),
        inlier_fractions=(0.0, 0.0, 0.0),
    )
    chance = summarize([zero], EvaluationConfig(), matcher="random")
    lines = baseline_csv(model, chance).splitlines()
    assert lines[0] == "threshold_px,model_mean_fraction,random_mean_fraction,ratio"
    assert all(line.endswith(",") for line in lines[1:])
