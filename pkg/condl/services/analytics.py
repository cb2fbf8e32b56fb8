from __future__ import annotations

import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator


@dataclass
class Timing:
    elapsed_ms: float = 0.0


class AnalyticsTracker:
    """Counts events and timings per metric; ``flush`` logs a snapshot."""

    def __init__(self, flush_every: int = 0) -> None:
        self._metrics: Dict[str, Dict[str, float]] = {}
        self._flush_every = flush_every
        self._records = 0
        self._logger = logging.getLogger(__name__)
        self._lock = threading.Lock()

    def record(self, metric: str, value: float | None = None) -> None:
        with self._lock:
            bucket = self._metrics.setdefault(metric, {"count": 0.0, "total": 0.0, "max": 0.0})
            bucket["count"] += 1.0
            if value is not None:
                bucket["total"] += value
                bucket["max"] = max(bucket["max"], value)
            self._records += 1
            due = self._flush_every > 0 and self._records % self._flush_every == 0
        if due:
            self.flush()

    @contextmanager
    def track_time(self, metric: str) -> Iterator[Timing]:
        timing = Timing()
        start = time.perf_counter()
        try:
            yield timing
        finally:
            timing.elapsed_ms = (time.perf_counter() - start) * 1000.0
            self.record(metric, timing.elapsed_ms)

    def snapshot(self) -> Dict[str, Dict[str, float]]:
        with self._lock:
            return {
                metric: {
                    "count": values["count"],
                    "avg": values["total"] / values["count"] if values["count"] else 0.0,
                    "max": values["max"],
                }
                for metric, values in self._metrics.items()
            }

    def flush(self) -> None:
        snapshot = self.snapshot()
        with self._lock:
            self._metrics.clear()
        if snapshot:
            self._logger.info("analytics_snapshot", extra={"metrics": snapshot})


class NullAnalytics:
    def record(self, metric: str, value: float | None = None) -> None:
        return None

    @contextmanager
    def track_time(self, metric: str) -> Iterator[Timing]:
        timing = Timing()
        start = time.perf_counter()
        try:
            yield timing
        finally:
            timing.elapsed_ms = (time.perf_counter() - start) * 1000.0

    def snapshot(self) -> Dict[str, Dict[str, float]]:
        return {}

    def flush(self) -> None:
        return None
