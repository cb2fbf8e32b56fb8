from __future__ import annotations

import asyncio
import logging
from pathlib import Path

import pytest

from condl.services.analytics import AnalyticsTracker, NullAnalytics
from condl.services.files import write_atomic, write_atomic_sync


def test_write_atomic_replaces_contents(tmp_path: Path) -> None:
    target = tmp_path / "nested" / "report.json"

    async def runner() -> None:
        await write_atomic(target, b"first")
        await write_atomic(target, b"second")

    asyncio.run(runner())
    assert target.read_bytes() == b"second"
    assert not (tmp_path / "nested" / "report.json.tmp").exists()


def test_write_atomic_sync_leaves_no_temp_file(tmp_path: Path) -> None:
    target = tmp_path / "step_000001.cndl"
    write_atomic_sync(target, b"\x00\x01")
    assert target.read_bytes() == b"\x00\x01"
    assert [p.name for p in tmp_path.iterdir()] == ["step_000001.cndl"]


def test_analytics_snapshot_and_flush(caplog: pytest.LogCaptureFixture) -> None:
    tracker = AnalyticsTracker()
    tracker.record("eval_pair", 4.0)
    tracker.record("eval_pair", 2.0)
    with tracker.track_time("train_step") as timing:
        pass
    assert timing.elapsed_ms >= 0.0

    snapshot = tracker.snapshot()
    assert snapshot["eval_pair"] == {"count": 2.0, "avg": 3.0, "max": 4.0}
    assert snapshot["train_step"]["count"] == 1.0

    with caplog.at_level(logging.INFO, logger="condl.services.analytics"):
        tracker.flush()
    assert any(record.message == "analytics_snapshot" for record in caplog.records)
    assert tracker.snapshot() == {}


def test_analytics_auto_flush() -> None:
    tracker = AnalyticsTracker(flush_every=2)
    tracker.record("a")
    assert tracker.snapshot()["a"]["count"] == 1.0
    tracker.record("a")
    assert tracker.snapshot() == {}


def test_null_analytics_records_nothing() -> None:
    null = NullAnalytics()
    null.record("anything", 1.0)
    with null.track_time("anything"):
        pass
    assert null.snapshot() == {}
