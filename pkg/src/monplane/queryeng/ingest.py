"""Bridge from monitor report topics into the metrics store.

Subscribes to the ``rate.`` and ``path.`` prefixes and upserts one point
per numeric report field, so queries return exactly what the monitors
published:

    rate.<entity>        fields mu/sigma2/M/V/risk -> metrics rate.<field>,
                         tags {entity}
    path.<path>.<link>   fields delay_mean/delay_var/delivery ->
                         metrics path.<field>, tags {path, link}
"""

from __future__ import annotations

import json
import logging
from typing import Optional

from ..client import ClientHandle, Disconnected
from .metrics import MetricPoint, MetricsStore

log = logging.getLogger(__name__)

RATE_FIELDS = ("mu", "sigma2", "M", "V", "risk")
PATH_FIELDS = ("delay_mean", "delay_var", "delivery")


def points_from_report(topic: str, data: bytes) -> list[MetricPoint]:
    try:
        record = json.loads(data.decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        return []
    ts = float(record.get("ts", 0.0))
    points = []
    if topic.startswith("rate."):
        entity = record.get("entity", topic[len("rate.") :])
        for field in RATE_FIELDS:
            if field in record:
                points.append(
                    MetricPoint(
                        metric=f"rate.{field}",
                        tags={"entity": entity},
                        ts=ts,
                        value=float(record[field]),
                    )
                )
    elif topic.startswith("path."):
        path_id, _, link = topic[len("path.") :].rpartition(".")
        tags = {"path": record.get("path", path_id), "link": record.get("link", link)}
        for field in PATH_FIELDS:
            if field in record and record[field] is not None:
                points.append(
                    MetricPoint(
                        metric=f"path.{field}",
                        tags={k: str(v) for k, v in tags.items()},
                        ts=ts,
                        value=float(record[field]),
                    )
                )
    return points


class MetricsIngestor:
    """One writer loop feeding a MetricsStore from report topics."""

    def __init__(self, handle: ClientHandle, store: MetricsStore):
        self.handle = handle
        self.store = store
        self.ingested = 0
        for prefix in ("rate.", "path."):
            handle.subscribe(prefix)

    def handle_delivery(self, topic: str, data: bytes) -> int:
        points = points_from_report(topic, data)
        for point in points:
            self.store.put(point)
        self.ingested += len(points)
        return len(points)

    def run(self, stop=None) -> None:
        while stop is None or not stop.is_set():
            try:
                delivery = self.handle.receive(timeout=0.5)
            except Disconnected:
                return
            if delivery is not None and delivery.kind == "pub":
                self.handle_delivery(delivery.origin, delivery.data)
