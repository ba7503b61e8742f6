"""Aggregation-point process: a registered client feeding monitor results
into a compiled plan and dispatching the notifications it fires.

Monitors address results to the aggregator identity with a JSON payload
``{"mf_id": ..., "value": ..., "unit": ..., "ts": ...}``. Each fired
notification is sent to its destination identity and mirrored on topic
``measure.notify.<dest>``.
"""

from __future__ import annotations

import json
import logging
from typing import Callable, Optional

from ..client import ClientHandle, Disconnected
from .plan import AggregationPlan, Notification

log = logging.getLogger(__name__)


def parse_report(data: bytes) -> Optional[tuple[str, float, Optional[str], float]]:
    try:
        record = json.loads(data.decode("utf-8"))
        return (
            str(record["mf_id"]),
            float(record["value"]),
            record.get("unit"),
            float(record.get("ts", 0.0)),
        )
    except (ValueError, KeyError, UnicodeDecodeError):
        return None


class AggregationPoint:
    """Single-threaded ingest loop around one plan."""

    def __init__(self, plan: AggregationPlan, handle: ClientHandle):
        self.plan = plan
        self.handle = handle
        self.malformed = 0

    def dispatch(self, notification: Notification) -> None:
        payload = notification.payload_bytes()
        self.handle.send(notification.dest, payload)
        self.handle.publish(f"measure.notify.{notification.dest}", payload)

    def handle_message(self, data: bytes) -> list[Notification]:
        parsed = parse_report(data)
        if parsed is None:
            self.malformed += 1
            log.warning("aggpoint %s: malformed report", self.handle.name)
            return []
        mf_id, value, unit, ts = parsed
        fired = self.plan.ingest(mf_id, value, unit=unit, ts=ts)
        for notification in fired:
            self.dispatch(notification)
        return fired

    def run(self, on_idle: Optional[Callable[[], bool]] = None) -> None:
        """Consume deliveries until disconnect (or until on_idle says stop)."""
        while True:
            try:
                delivery = self.handle.receive(timeout=0.5)
            except Disconnected:
                return
            if delivery is None:
                if on_idle is not None and on_idle():
                    return
                continue
            self.handle_message(delivery.data)
