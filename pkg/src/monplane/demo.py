"""Deterministic integrated scenario: two links, three flows, rate
monitors, an aggregation point running a threshold program, a load
balancer with a deliberate policy bug, and the policy guard that catches
it.

Components run as independent client loops joined only by messages, yet
the trace is a pure function of the seed: the harness keeps exactly one
stimulus in flight at a time (every hop in the cascade is acknowledged
back to it), so broker arrival order - and therefore the collected trace
- is fully determined. Timestamps in the trace are logical ticks, never
wall clock.

Scenario shape: flow 1 lands on the primary link and pushes its overload
risk past the 1% threshold; flow 2 then arrives and is diverted to the
secondary link; flow 3 is pinned to the primary link by policy, but the
buggy balancer tries to divert it too - the guard blocks the assignment
and raises an alarm, and the balancer falls back to the primary link.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import client as ddclient
from .broker import Broker, BrokerConfig
from .client import ClientHandle
from .measure import compile_program, parse
from .measure.aggpoint import AggregationPoint
from .ratemon import RateMonitor

PRIMARY, SECONDARY = "primary", "secondary"

AGG_PROGRAM = """
measurements {
  r1 = risk(primary, 1hz);
}
zones {
  overload = mean(3, r1) > 1%;
  nominal = mean(3, r1) <= 1%;
}
actions {
  -> overload = Notify(balancer, ["overload", "primary", r1]);
  -> nominal = Notify(balancer, ["calm", "primary"]);
}
"""


@dataclass(frozen=True)
class FlowSpec:
    flow: str
    arrival_tick: int
    rate_mu: float  # lognormal log-mean of bytes/s
    rate_sigma: float


@dataclass
class DemoScenario:
    seed: int = 1
    ticks: int = 70
    capacity: float = math.exp(math.log(1e6) + 1.0 * 0.6)  # ~15.9% true exceedance
    risk_threshold: float = 0.01
    report_every: int = 10
    intensity: float = 1.0  # calm profile scales this down
    flows: tuple[FlowSpec, ...] = (
        FlowSpec("flow1", 3, math.log(1e6), 0.6),
        FlowSpec("flow2", 40, math.log(2e5), 0.5),
        FlowSpec("flow3", 55, math.log(1e5), 0.5),
    )
    pinned: dict = field(default_factory=lambda: {"flow3": PRIMARY})
    buggy_balancer: bool = True
    broker: Optional[str] = None  # external endpoint; auto-spawned if None


class BrokerUnavailable(Exception):
    pass


@dataclass(frozen=True)
class GuardVerdict:
    allowed: bool
    rule: Optional[str] = None
    reason: Optional[str] = None


def policy_guard(flow: str, to_link: str, pinned: dict) -> GuardVerdict:
    """Block exactly the assignments that violate a pinned-flow entry."""
    want = pinned.get(flow)
    if want is not None and to_link != want:
        return GuardVerdict(
            allowed=False,
            rule=f"pin-{flow}",
            reason=f"{flow} is pinned to {want}, refused {to_link}",
        )
    return GuardVerdict(allowed=True)


class _Balancer:
    """Assigns arriving flows; the deliberate bug ignores pin policy when
    deciding to divert, so the guard has something to catch."""

    def __init__(self, handle: ClientHandle, pinned: dict, buggy: bool):
        self.handle = handle
        self.pinned = pinned
        self.buggy = buggy
        self.primary_overloaded = False

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            try:
                delivery = self.handle.receive(timeout=0.2)
            except ddclient.Disconnected:
                return
            if delivery is None or delivery.kind != "direct":
                continue
            if delivery.origin == "agg1":
                state = json.loads(delivery.data)[0]
                self.primary_overloaded = state == "overload"
                self.handle.send("harness", _rec(type="balancer-ack", state=state))
            elif delivery.origin == "harness":
                msg = json.loads(delivery.data)
                if msg["type"] == "flow-arrival":
                    self._place_flow(msg["flow"], msg["tick"])
            elif delivery.origin == "guard":
                pass  # verdicts are handled synchronously in _place_flow

    def _place_flow(self, flow: str, tick: int) -> None:
        if self.primary_overloaded:
            wanted = SECONDARY
            if not self.buggy and self.pinned.get(flow) == PRIMARY:
                wanted = PRIMARY
        else:
            wanted = PRIMARY
        if wanted == SECONDARY:
            self.handle.publish(
                "trace.reroute-request", _rec(tick=tick, flow=flow, to=wanted)
            )
        verdict = self._ask_guard(flow, wanted, tick)
        link = wanted
        if not verdict["allowed"]:
            link = PRIMARY  # fall back to the safe assignment
            fallback = self._ask_guard(flow, link, tick)
            assert fallback["allowed"]
        self.handle.send(
            "harness", _rec(type="assigned", flow=flow, link=link, tick=tick)
        )

    def _ask_guard(self, flow: str, link: str, tick: int) -> dict:
        self.handle.send("guard", _rec(type="assign", flow=flow, link=link, tick=tick))
        while True:
            delivery = self.handle.receive(timeout=10.0)
            if delivery is None:
                raise BrokerUnavailable("guard did not answer")
            if delivery.kind == "direct" and delivery.origin == "guard":
                return json.loads(delivery.data)


class _Guard:
    """Message-level stand-in for a control-channel watchpoint."""

    def __init__(self, handle: ClientHandle, pinned: dict):
        self.handle = handle
        self.pinned = pinned

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            try:
                delivery = self.handle.receive(timeout=0.2)
            except ddclient.Disconnected:
                return
            if delivery is None or delivery.kind != "direct":
                continue
            msg = json.loads(delivery.data)
            verdict = policy_guard(msg["flow"], msg["link"], self.pinned)
            if not verdict.allowed:
                alarm = _rec(
                    tick=msg["tick"],
                    flow=msg["flow"],
                    rule=verdict.rule,
                    link=msg["link"],
                )
                self.handle.publish("trace.policy-block", alarm)
                self.handle.publish("alarm.policy", alarm)
                self.handle.publish("trace.alarm", alarm)
            self.handle.send(
                delivery.origin, _rec(allowed=verdict.allowed, rule=verdict.rule)
            )


class _AggLoop:
    """Aggregation point plus per-ingest acknowledgements to the harness."""

    def __init__(self, handle: ClientHandle):
        plan = compile_program(parse(AGG_PROGRAM), {"r1": "mon.primary"})
        self.point = AggregationPoint(plan, handle)
        self.handle = handle

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            try:
                delivery = self.handle.receive(timeout=0.2)
            except ddclient.Disconnected:
                return
            if delivery is None or delivery.kind != "direct":
                continue
            report = json.loads(delivery.data)
            fired = self.point.handle_message(delivery.data)
            for notification in fired:
                self.handle.publish(
                    "trace.zone-transition",
                    _rec(
                        tick=int(report.get("ts", 0)),
                        from_zone=notification.from_zone,
                        to_zone=notification.to_zone,
                    ),
                )
            self.handle.send(
                "harness", _rec(type="agg-ack", fired=len(fired))
            )


def _rec(**fields) -> bytes:
    return json.dumps(fields, sort_keys=True).encode()


class DemoRun:
    def __init__(self, scenario: DemoScenario):
        self.scenario = scenario
        self.trace: list[dict] = []
        self.assignments: dict[str, str] = {}
        self.violations: list[str] = []
        self._stash: list[tuple[str, dict]] = []

    # ------------------------------------------------------------------

    def run(self) -> list[dict]:
        scenario = self.scenario
        own_broker = None
        if scenario.broker is None:
            own_broker = Broker(
                BrokerConfig(listen=("tcp://127.0.0.1:0",), heartbeat_s=30.0)
            )
            own_broker.start()
            endpoint = str(own_broker.bound_endpoints[0])
        else:
            endpoint = scenario.broker
        stop = threading.Event()
        handles: list[ClientHandle] = []
        threads: list[threading.Thread] = []
        try:
            def attach(name: str) -> ClientHandle:
                try:
                    handle = ddclient.connect(endpoint, name)
                except ddclient.ClientError as exc:
                    raise BrokerUnavailable(str(exc)) from None
                handles.append(handle)
                return handle

            harness = attach("harness")
            tracer = attach("trace-sub")
            tracer.subscribe("trace.")
            guard = _Guard(attach("guard"), scenario.pinned)
            balancer = _Balancer(
                attach("balancer"), scenario.pinned, scenario.buggy_balancer
            )
            agg = _AggLoop(attach("agg1"))
            monitors = {
                link: RateMonitor(
                    entity=link,
                    capacity=scenario.capacity,
                    dt=1.0,
                    report_every=scenario.report_every,
                    threshold=scenario.risk_threshold,
                    handle=attach(f"mon.{link}"),
                    aggregator="agg1" if link == PRIMARY else None,
                )
                for link in (PRIMARY, SECONDARY)
            }
            # flush the subscription before any publications can race it
            harness.send("harness", b"sync")
            harness.receive(timeout=5.0)
            for component in (guard, balancer, agg):
                t = threading.Thread(target=component.run, args=(stop,), daemon=True)
                t.start()
                threads.append(t)
            self._drive(harness, monitors)
            harness.publish("trace.end", b"{}")
            self._collect(tracer)
            self._check_invariants()
        finally:
            stop.set()
            for handle in handles:
                handle.close()
            if own_broker is not None:
                own_broker.stop()
        return self.trace

    # ------------------------------------------------------------------

    def _drive(self, harness: ClientHandle, monitors: dict[str, RateMonitor]) -> None:
        scenario = self.scenario
        rngs = {
            spec.flow: np.random.default_rng((scenario.seed, i))
            for i, spec in enumerate(scenario.flows)
        }
        arrivals = {spec.arrival_tick: spec for spec in scenario.flows}
        for tick in range(1, scenario.ticks + 1):
            # 1. traffic under the assignments settled in earlier ticks
            rates = {
                spec.flow: float(
                    rngs[spec.flow].lognormal(spec.rate_mu, spec.rate_sigma)
                )
                * scenario.intensity
                for spec in scenario.flows
                if tick > spec.arrival_tick
            }
            for link, monitor in monitors.items():
                load = sum(
                    rate
                    for flow, rate in rates.items()
                    if self.assignments.get(flow) == link
                )
                records = monitor.observe(load, ts=float(tick))
                for record in records:
                    if record["type"] != "report":
                        continue
                    monitor.handle.publish(
                        "trace.risk-report",
                        _rec(tick=tick, entity=link, risk=record["risk"]),
                    )
                    # the ack rides the monitor's own session, so receiving
                    # it means the broker has processed the publishes above
                    monitor.handle.send("harness", _rec(type="mon-ack"))
                    self._await(harness, f"mon.{link}", "mon-ack")
                    if monitor.aggregator is not None:
                        self._await_agg_cascade(harness)
            # 2. flow arrivals
            spec = arrivals.get(tick)
            if spec is not None:
                harness.publish("trace.flow-arrival", _rec(tick=tick, flow=spec.flow))
                harness.send(
                    "balancer", _rec(type="flow-arrival", flow=spec.flow, tick=tick)
                )
                reply = self._await(harness, "balancer", "assigned")
                self.assignments[spec.flow] = reply["link"]
                if (
                    self.scenario.pinned.get(spec.flow) is not None
                    and reply["link"] != self.scenario.pinned[spec.flow]
                ):
                    self.violations.append(
                        f"{spec.flow} applied to {reply['link']} against policy"
                    )

    def _await_agg_cascade(self, harness: ClientHandle) -> None:
        ack = self._await(harness, "agg1", "agg-ack")
        for _ in range(ack["fired"]):
            self._await(harness, "balancer", "balancer-ack")

    def _await(self, harness: ClientHandle, sender: str, msg_type: str) -> dict:
        """Next matching ack; acks from other components in the cascade may
        overtake it, so non-matching ones are stashed, never dropped."""
        for i, (origin, msg) in enumerate(self._stash):
            if origin == sender and msg.get("type") == msg_type:
                del self._stash[i]
                return msg
        while True:
            delivery = harness.receive(timeout=10.0)
            if delivery is None:
                raise BrokerUnavailable(f"no {msg_type} from {sender}")
            if delivery.kind != "direct":
                continue
            msg = json.loads(delivery.data)
            if delivery.origin == sender and msg.get("type") == msg_type:
                return msg
            self._stash.append((delivery.origin, msg))

    def _collect(self, tracer: ClientHandle) -> None:
        while True:
            delivery = tracer.receive(timeout=10.0)
            if delivery is None:
                raise BrokerUnavailable("trace collection stalled")
            if delivery.origin == "trace.end":
                return
            record = json.loads(delivery.data)
            record["event"] = delivery.origin[len("trace.") :]
            self.trace.append(record)

    def _check_invariants(self) -> None:
        transitions_seen = 0
        for record in self.trace:
            if record["event"] == "zone-transition":
                transitions_seen += 1
            elif record["event"] == "reroute-request" and transitions_seen == 0:
                self.violations.append(
                    f"reroute of {record['flow']} without a prior zone transition"
                )


def trace_to_ndjson(trace: list[dict]) -> str:
    return "".join(json.dumps(record, sort_keys=True) + "\n" for record in trace)


@dataclass(frozen=True)
class DemoResult:
    trace: list[dict]
    violations: list[str]
    assignments: dict[str, str]

    def events(self, kind: str) -> list[dict]:
        return [r for r in self.trace if r["event"] == kind]


def run_demo(scenario: DemoScenario) -> DemoResult:
    """Execute the scenario end to end."""
    run = DemoRun(scenario)
    trace = run.run()
    return DemoResult(trace=trace, violations=run.violations, assignments=run.assignments)
