"""Embedded time-series store for tagged measurement values.

Points are keyed by (metric, tags, timestamp); a later put overwrites.
Queries filter by exact tag-set match and a window measured back from the
newest matching timestamp (data-relative, so replayed histories query the
same way as live ones). Optional persistence appends one JSON line per
put; loading replays the file, collapsing overwrites.

One writer loop may run concurrently with readers: queries snapshot the
matching points under the same lock that guards writes.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

DEFAULT_WINDOW_S = 60.0

AGGREGATES = ("latest", "mean", "max", "sum")


class MetricsError(Exception):
    pass


class UnknownMetric(MetricsError):
    pass


class NoMetricData(MetricsError):
    """Metric exists but nothing matches the tags/window."""


@dataclass(frozen=True)
class MetricPoint:
    metric: str
    tags: dict[str, str]
    ts: float
    value: float
    unit: Optional[str] = None

    def key(self) -> tuple:
        return (self.metric, tuple(sorted(self.tags.items())), self.ts)


class MetricsStore:
    def __init__(self, path: Optional[Union[str, Path]] = None):
        self._points: dict[str, dict[tuple, MetricPoint]] = {}
        self._lock = threading.Lock()
        self._path = Path(path) if path else None
        self._file = None
        if self._path is not None and self._path.exists():
            self._load(self._path)
        if self._path is not None:
            self._file = open(self._path, "a", encoding="utf-8")

    def _load(self, path: Path) -> None:
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                self._insert(
                    MetricPoint(
                        metric=rec["metric"],
                        tags=dict(rec["tags"]),
                        ts=float(rec["ts"]),
                        value=float(rec["value"]),
                        unit=rec.get("unit"),
                    )
                )

    def _insert(self, point: MetricPoint) -> None:
        series = self._points.setdefault(point.metric, {})
        series[point.key()[1:]] = point

    def put(self, point: MetricPoint) -> None:
        """Upsert by (metric, tags, ts)."""
        with self._lock:
            self._insert(point)
            if self._file is not None:
                self._file.write(
                    json.dumps(
                        {
                            "metric": point.metric,
                            "tags": point.tags,
                            "ts": point.ts,
                            "value": point.value,
                            "unit": point.unit,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                self._file.flush()

    def query(
        self,
        metric: str,
        tags: dict[str, str],
        window_s: Optional[float] = DEFAULT_WINDOW_S,
        agg: str = "mean",
        strict: bool = True,
    ) -> Optional[float]:
        """Aggregate matching points; None (or a raise, when strict) if none."""
        if agg not in AGGREGATES:
            raise ValueError(f"agg must be one of {AGGREGATES}")
        with self._lock:
            series = self._points.get(metric)
            if series is None:
                if strict:
                    raise UnknownMetric(metric)
                return None
            wanted = tuple(sorted(tags.items()))
            matching = [p for (ptags, _), p in series.items() if ptags == wanted]
        if not matching:
            if strict:
                raise NoMetricData(f"{metric} with tags {tags}")
            return None
        newest = max(p.ts for p in matching)
        if window_s is not None:
            matching = [p for p in matching if p.ts >= newest - window_s]
        values = [p.value for p in sorted(matching, key=lambda p: p.ts)]
        if agg == "latest":
            return values[-1]
        if agg == "mean":
            return sum(values) / len(values)
        if agg == "max":
            return max(values)
        return sum(values)

    def series(self, metric: str) -> list[MetricPoint]:
        with self._lock:
            return sorted(self._points.get(metric, {}).values(), key=lambda p: p.ts)

    def metrics(self) -> list[str]:
        with self._lock:
            return sorted(self._points)

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> "MetricsStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
