"""Executable aggregation plan: ring buffers, ordered zone predicates,
and the transition table.

Zone evaluation is first-match in declaration order (an if/elif chain);
when no predicate holds the implicit zone "default" is active. Exactly
one zone is active per evaluation. Transition actions fire when the
active zone changes, then entry actions for the newly entered zone.

A zone whose expression references a measurement with no samples yet
evaluates to false; results computed from fewer than the declared window
are flagged as warm-up but still used.
"""

from __future__ import annotations

import collections
import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

from ..units import Dimension, Quantity, UnitError, parse_literal
from .ast import (
    ActionDecl,
    AggExpr,
    BinOp,
    Combine,
    MeasureProgram,
    MExpr,
    MRef,
    PayloadExpr,
    PayloadString,
    mexpr_refs,
)
from .errors import EmptyBuffer, UnboundMeasurement

DEFAULT_ZONE = "default"

#: unit spellings accepted from monitor reports, mapped to a canonical factor
REPORT_UNITS = {
    None: 1.0,
    "": 1.0,
    "ratio": 1.0,
    "s": 1.0,
    "ms": 1e-3,
    "us": 1e-6,
    "hz": 1.0,
    "%": 0.01,
}


class AggResult(NamedTuple):
    value: float
    warmup: bool


def window_aggregate(kind: str, n: int, buffer: Sequence[float]) -> AggResult:
    """Aggregate the most recent min(n, available) samples."""
    if len(buffer) == 0:
        raise EmptyBuffer("no samples yet")
    window = list(buffer)[-n:]
    if kind == "mean":
        value = sum(window) / len(window)
    elif kind == "max":
        value = max(window)
    elif kind == "min":
        value = min(window)
    elif kind == "sum":
        value = sum(window)
    else:
        raise ValueError(f"unknown aggregate {kind!r}")
    return AggResult(value, warmup=len(window) < n)


@dataclass(frozen=True)
class Notification:
    dest: str
    payload: tuple[object, ...]  # strings and evaluated expression floats
    from_zone: str
    to_zone: str
    ts: float

    def payload_bytes(self) -> bytes:
        """Canonical wire form: compact UTF-8 JSON array."""
        return json.dumps(list(self.payload), separators=(",", ":"), ensure_ascii=False).encode(
            "utf-8"
        )


@dataclass
class AggregationPlan:
    program: MeasureProgram
    bindings: dict[str, str]  # measurement id -> MF-ID
    buffers: dict[str, collections.deque] = field(default_factory=dict)
    active_zone: str = DEFAULT_ZONE
    unknown_mf_count: int = 0
    _mf_to_measurements: dict[str, list[str]] = field(default_factory=dict)
    _transition_actions: dict[tuple[str, str], list[ActionDecl]] = field(default_factory=dict)
    _entry_actions: dict[str, list[ActionDecl]] = field(default_factory=dict)

    # ------------------------------------------------------------------

    def ingest(self, mf_id: str, value: float, unit: Optional[str] = None,
               ts: float = 0.0) -> list[Notification]:
        """Fold one monitor result and fire any actions it triggers."""
        measurements = self._mf_to_measurements.get(mf_id)
        if not measurements:
            self.unknown_mf_count += 1
            return []
        canonical = value * self._unit_factor(unit)
        for mid in measurements:
            self.buffers[mid].append(canonical)
        previous = self.active_zone
        current = self.evaluate_zones()
        if current == previous:
            return []
        self.active_zone = current
        fired: list[Notification] = []
        for action in self._transition_actions.get((previous, current), []):
            fired.append(self._notification(action, previous, current, ts))
        for action in self._entry_actions.get(current, []):
            fired.append(self._notification(action, previous, current, ts))
        return fired

    def evaluate_zones(self) -> str:
        """First true zone predicate in declaration order, else default."""
        for zone in self.program.zones:
            verdict = self._zone_holds(zone)
            if verdict:
                return zone.id
        return DEFAULT_ZONE

    # ------------------------------------------------------------------

    @staticmethod
    def _unit_factor(unit: Optional[str]) -> float:
        try:
            return REPORT_UNITS[unit]
        except KeyError:
            raise UnitError(f"unknown report unit {unit!r}") from None

    def _zone_holds(self, zone) -> bool:
        try:
            value, _ = self._eval_agg(zone.agg)
        except EmptyBuffer:
            return False
        threshold = zone.literal.quantity.value
        cmp = zone.cmp
        if cmp == ">":
            return value > threshold
        if cmp == ">=":
            return value >= threshold
        if cmp == "<":
            return value < threshold
        if cmp == "<=":
            return value <= threshold
        return value == threshold

    def _eval_agg(self, agg: AggExpr) -> AggResult:
        return self._eval_mexpr(agg.expr, agg.kind, agg.window)

    def _eval_mexpr(self, expr: MExpr, kind: str, window: int) -> AggResult:
        """Fold the expression with each leaf aggregated over its own
        buffer (pointwise-on-aggregates semantics for +/- and combiners)."""
        if isinstance(expr, MRef):
            return window_aggregate(kind, window, self.buffers[expr.id])
        if isinstance(expr, BinOp):
            left = self._eval_mexpr(expr.left, kind, window)
            right = self._eval_mexpr(expr.right, kind, window)
            value = left.value + right.value if expr.op == "+" else left.value - right.value
            return AggResult(value, left.warmup or right.warmup)
        results = [self._eval_mexpr(e, kind, window) for e in expr.items]
        fold = {"max": max, "min": min, "sum": sum}[expr.op]
        return AggResult(fold(r.value for r in results), any(r.warmup for r in results))

    def _notification(self, action: ActionDecl, previous: str, current: str,
                      ts: float) -> Notification:
        payload: list[object] = []
        for item in action.notify.payload:
            if isinstance(item, PayloadString):
                payload.append(item.text)
            else:
                # expression values report the mean over the full buffer
                payload.append(self._eval_mexpr(item.expr, "mean", self._payload_window).value)
        return Notification(
            dest=action.notify.dest,
            payload=tuple(payload),
            from_zone=previous,
            to_zone=current,
            ts=ts,
        )

    @property
    def _payload_window(self) -> int:
        return max((z.agg.window for z in self.program.zones), default=1)


def compile_program(program: MeasureProgram, bindings: dict[str, str]) -> AggregationPlan:
    """Build the executable plan; every measurement must carry an MF-ID."""
    for mid in program.measurement_ids:
        if mid not in bindings:
            raise UnboundMeasurement(mid)
    plan = AggregationPlan(program=program, bindings=dict(bindings))
    capacities: dict[str, int] = {}
    for zone in program.zones:
        for ref in mexpr_refs(zone.agg.expr):
            capacities[ref] = max(capacities.get(ref, 0), zone.agg.window)
    fallback = max((z.agg.window for z in program.zones), default=1)
    for mid in program.measurement_ids:
        plan.buffers[mid] = collections.deque(maxlen=capacities.get(mid, fallback))
    for mid, mf_id in plan.bindings.items():
        plan._mf_to_measurements.setdefault(mf_id, []).append(mid)
    for action in program.actions:
        if action.is_entry:
            plan._entry_actions.setdefault(action.to_zone, []).append(action)
        else:
            key = (action.from_zone, action.to_zone)
            plan._transition_actions.setdefault(key, []).append(action)
    return plan
