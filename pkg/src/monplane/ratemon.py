"""Node-local traffic-rate modeling and congestion-risk detection.

Two running byte counters per monitored entity hold the first and second
statistical moments of the observed rates; a lognormal is fitted from
them by the method of moments, and the fitted tail above link capacity
gives the overload risk. Risk crossings are debounced with k-consecutive
hysteresis before a zone event is emitted.

The normal CDF uses a rational erf approximation with absolute error
<= 1.5e-7 (constants documented in docs/numerics.md), so results are
reproducible without a platform math library.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

DEFAULT_THRESHOLD = 0.01
DEFAULT_HYSTERESIS_DEPTH = 3
DEFAULT_DT_S = 0.3


class RateModelError(Exception):
    pass


class InsufficientSamples(RateModelError):
    pass


class NonPositiveMean(RateModelError):
    pass


@dataclass
class MomentWindow:
    """Running first/second moments of rates observed over intervals dt."""

    dt: float
    n: int = 0
    s1: float = 0.0  # mean of x_i (bytes/s)
    s2: float = 0.0  # mean of x_i^2

    def observe(self, bytes_in_interval: float) -> "MomentWindow":
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        x = bytes_in_interval / self.dt
        self.n += 1
        self.s1 += (x - self.s1) / self.n
        self.s2 += (x * x - self.s2) / self.n
        return self

    def reset(self) -> None:
        """Tumbling-window reset after a report."""
        self.n = 0
        self.s1 = 0.0
        self.s2 = 0.0

    @property
    def mean(self) -> float:
        return self.s1

    @property
    def variance(self) -> float:
        return max(0.0, self.s2 - self.s1 * self.s1)


@dataclass(frozen=True)
class LognormalParams:
    mu: float
    sigma2: float
    M: float  # sample mean the fit came from
    V: float  # sample variance the fit came from

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


def fit(window: MomentWindow) -> LognormalParams:
    """Method-of-moments lognormal fit from the two counters."""
    if window.n < 2:
        raise InsufficientSamples(f"need >= 2 samples, have {window.n}")
    M = window.mean
    if M <= 0:
        raise NonPositiveMean(f"sample mean {M} must be positive")
    V = window.variance
    sigma2 = math.log1p(V / (M * M))
    mu = math.log(M) - 0.5 * sigma2
    return LognormalParams(mu=mu, sigma2=sigma2, M=M, V=V)


# Rational erf approximation, |abs error| <= 1.5e-7 (see docs/numerics.md).
_ERF_P = 0.3275911
_ERF_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)


def erf_approx(x: float) -> float:
    sign = 1.0 if x >= 0 else -1.0
    ax = abs(x)
    t = 1.0 / (1.0 + _ERF_P * ax)
    poly = t * (
        _ERF_A[0]
        + t * (_ERF_A[1] + t * (_ERF_A[2] + t * (_ERF_A[3] + t * _ERF_A[4])))
    )
    return sign * (1.0 - poly * math.exp(-ax * ax))


def normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + erf_approx(z / math.sqrt(2.0)))


def overload_risk(params: LognormalParams, capacity: float) -> float:
    """Probability that the fitted rate distribution exceeds capacity."""
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    sigma = params.sigma
    if sigma == 0.0:
        # point mass at M
        if capacity > params.M:
            return 0.0
        if capacity < params.M:
            return 1.0
        return 0.5
    z = (math.log(capacity) - params.mu) / sigma
    return 1.0 - normal_cdf(z)


def percentile(params: LognormalParams, q: float) -> float:
    """Inverse CDF of the fitted lognormal at quantile q (via bisection)."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0, 1)")
    if params.sigma == 0.0:
        return params.M
    lo, hi = params.mu - 12 * params.sigma, params.mu + 12 * params.sigma
    for _ in range(80):
        mid = (lo + hi) / 2
        if normal_cdf((mid - params.mu) / params.sigma) < q:
            lo = mid
        else:
            hi = mid
    return math.exp((lo + hi) / 2)


@dataclass(frozen=True)
class ZoneEvent:
    entity: str
    state: str  # "congested" | "calm"
    risk: float
    tick: int


@dataclass
class RiskDetector:
    """k-consecutive hysteresis over the overload-risk stream."""

    entity: str
    capacity: float
    threshold: float = DEFAULT_THRESHOLD
    k_consecutive: int = DEFAULT_HYSTERESIS_DEPTH
    state: str = "calm"
    _streak: int = 0
    _tick: int = 0

    def tick(self, risk: float) -> Optional[ZoneEvent]:
        """Feed one risk value; returns an event exactly on the k-th
        consecutive tick on the other side of the threshold."""
        self._tick += 1
        crossing = risk > self.threshold if self.state == "calm" else risk <= self.threshold
        if not crossing:
            self._streak = 0
            return None
        self._streak += 1
        if self._streak < self.k_consecutive:
            return None
        self._streak = 0
        self.state = "congested" if self.state == "calm" else "calm"
        return ZoneEvent(self.entity, self.state, risk, self._tick)


def synthetic_rates(
    mu: float, sigma: float, dt: float, seed: int
) -> Iterator[float]:
    """Endless seeded stream of bytes-per-interval from lognormal(mu, sigma)."""
    rng = np.random.default_rng(seed)
    while True:
        yield float(rng.lognormal(mean=mu, sigma=sigma) * dt)


@dataclass
class RateMonitor:
    """One monitored entity: fold byte counts, report fits, emit events.

    Reports go to the configured aggregator identity and to topic
    ``rate.<entity>``; zone events to topic ``risk.<entity>``. The handle
    is any object with send/publish (a client handle); pass None to keep
    the monitor silent (pure modeling).
    """

    entity: str
    capacity: float
    dt: float = DEFAULT_DT_S
    report_every: int = 10
    threshold: float = DEFAULT_THRESHOLD
    k_consecutive: int = DEFAULT_HYSTERESIS_DEPTH
    handle: object = None
    aggregator: Optional[str] = None
    mf_id: Optional[str] = None
    window: MomentWindow = field(init=False)
    detector: RiskDetector = field(init=False)
    reports: int = 0

    def __post_init__(self) -> None:
        if self.mf_id is None:
            self.mf_id = f"mon.{self.entity}"
        self.window = MomentWindow(dt=self.dt)
        self.detector = RiskDetector(
            entity=self.entity,
            capacity=self.capacity,
            threshold=self.threshold,
            k_consecutive=self.k_consecutive,
        )

    def observe(self, bytes_in_interval: float, ts: Optional[float] = None) -> list[dict]:
        """Fold one interval; returns the report/event records it produced."""
        self.window.observe(bytes_in_interval)
        if self.window.n < self.report_every:
            return []
        return self.report(ts)

    def report(self, ts: Optional[float] = None) -> list[dict]:
        """Fit the current window, emit a report + any zone event, reset."""
        out: list[dict] = []
        ts = time.time() if ts is None else ts
        try:
            params = fit(self.window)
        except RateModelError:
            self.window.reset()
            return out
        risk = overload_risk(params, self.capacity)
        record = {
            "entity": self.entity,
            "mu": params.mu,
            "sigma2": params.sigma2,
            "M": params.M,
            "V": params.V,
            "risk": risk,
            "ts": ts,
        }
        out.append({"type": "report", **record})
        self.reports += 1
        if self.handle is not None:
            self.handle.publish(
                f"rate.{self.entity}", json.dumps(record, sort_keys=True).encode()
            )
            if self.aggregator:
                # aggregation points speak {mf_id, value, unit, ts}
                measurement = {
                    "mf_id": self.mf_id,
                    "value": risk,
                    "unit": "ratio",
                    "ts": ts,
                }
                self.handle.send(
                    self.aggregator, json.dumps(measurement, sort_keys=True).encode()
                )
        event = self.detector.tick(risk)
        if event is not None:
            evt_record = {
                "type": "zone-event",
                "entity": event.entity,
                "state": event.state,
                "risk": event.risk,
                "ts": ts,
            }
            out.append(evt_record)
            if self.handle is not None:
                self.handle.publish(
                    f"risk.{self.entity}",
                    json.dumps(evt_record, sort_keys=True).encode(),
                )
        self.window.reset()
        return out

    def run(self, byte_counts: Iterable[float]) -> list[dict]:
        """Drive the monitor over a finite trace; returns all records."""
        produced: list[dict] = []
        for count in byte_counts:
            produced.extend(self.observe(count))
        return produced
