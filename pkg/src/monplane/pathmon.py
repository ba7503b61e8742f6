"""Per-link delay and loss estimation from end-to-end path samples.

A discrete-event simulation of a linear path produces, for each surviving
measurement packet, the vector of cumulative one-way delays through every
node it reached, plus per-node packet counters covering all traffic. The
receiver-side estimators difference successive cumulative segments to get
per-link delay mean/variance, and ratio successive survival counts (or
node counters) to get per-link delivery.

Runs are pure functions of (config, seed): a fixed seed reproduces the
sample set bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np


class PathModelError(Exception):
    pass


class InsufficientSamples(PathModelError):
    def __init__(self, link: int, have: int):
        super().__init__(f"link {link}: need >= 2 paired samples, have {have}")
        self.link = link


class ZeroDenominator(PathModelError):
    def __init__(self, link: int):
        super().__init__(f"link {link}: no packets reached the upstream node")
        self.link = link


def _per_link(value, links: int, name: str) -> np.ndarray:
    arr = np.full(links, float(value)) if np.isscalar(value) else np.asarray(value, float)
    if arr.shape != (links,):
        raise ValueError(f"{name} must be scalar or length {links}")
    return arr


@dataclass(frozen=True)
class SimConfig:
    """Linear monitored path: `hops` nodes joined by hops-1 links."""

    hops: int = 6
    packets: int = 100_000
    alpha: float = 0.3  # probability a packet is selected for measurement
    loss: float | Sequence[float] = 0.04  # per-link drop probability
    gamma_shape: float | Sequence[float] = 2.0
    gamma_scale: float | Sequence[float] = 0.001  # seconds
    arrival_mu: float = -8.0  # lognormal inter-arrival (log-seconds)
    arrival_sigma: float = 1.0
    clock_offsets: Optional[Sequence[float]] = None  # per node, seconds
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hops < 3:
            raise ValueError("a monitored path needs at least 3 nodes")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        links = self.hops - 1
        loss = _per_link(self.loss, links, "loss")
        if np.any(loss < 0) or np.any(loss >= 1):
            raise ValueError("loss probabilities must lie in [0, 1)")
        if self.clock_offsets is not None and len(self.clock_offsets) != self.hops:
            raise ValueError("clock_offsets must give one offset per node")

    @property
    def links(self) -> int:
        return self.hops - 1


@dataclass(frozen=True)
class GroundTruth:
    delay_mean: np.ndarray  # per link
    delay_var: np.ndarray
    delivery: np.ndarray  # per link, 1 - loss probability
    e2e_delay_mean: float


@dataclass(frozen=True)
class PathSampleSet:
    """Receiver-side view of one run."""

    records: np.ndarray  # (n_meas, links) cumulative delays, NaN past loss
    send_times: np.ndarray  # (n_meas,) absolute departure times
    sent: np.ndarray  # (hops,) packets forwarded by each node (all traffic)
    received: np.ndarray  # (hops,) packets arriving at each node
    meas_total: int

    @property
    def links(self) -> int:
        return self.records.shape[1]


@dataclass(frozen=True)
class LinkEstimate:
    link: int  # 1-based
    delay_mean: Optional[float] = None
    delay_var: Optional[float] = None
    delivery: Optional[float] = None
    over_unity: bool = False  # delivery > 1 from sampling noise
    n_samples: int = 0

    @property
    def loss(self) -> Optional[float]:
        return None if self.delivery is None else 1.0 - self.delivery


def simulate(config: SimConfig) -> tuple[PathSampleSet, GroundTruth]:
    """Run one seeded pass of the path and return samples + ground truth."""
    rng = np.random.default_rng(config.seed)
    n, links = config.packets, config.links
    loss = _per_link(config.loss, links, "loss")
    shape = _per_link(config.gamma_shape, links, "gamma_shape")
    scale = _per_link(config.gamma_scale, links, "gamma_scale")

    send_times = rng.lognormal(config.arrival_mu, config.arrival_sigma, n).cumsum()
    meas_mask = rng.random(n) < config.alpha
    # survival[:, i] == packet still alive after link i+1
    survival = (rng.random((n, links)) >= loss[None, :]).cumprod(axis=1).astype(bool)

    received = np.empty(config.hops, dtype=np.int64)
    received[0] = n
    received[1:] = survival.sum(axis=0)
    sent = received.copy()  # nodes never drop internally; link loss only

    meas_idx = np.nonzero(meas_mask)[0]
    delays = rng.gamma(shape[None, :], scale[None, :], size=(len(meas_idx), links))
    cumulative = delays.cumsum(axis=1)
    if config.clock_offsets is not None:
        offsets = np.asarray(config.clock_offsets, float)
        cumulative = cumulative + (offsets[1:] - offsets[0])[None, :]
    records = np.where(survival[meas_idx], cumulative, np.nan)

    truth = GroundTruth(
        delay_mean=shape * scale,
        delay_var=shape * scale**2,
        delivery=1.0 - loss,
        e2e_delay_mean=float(np.sum(shape * scale)),
    )
    samples = PathSampleSet(
        records=records,
        send_times=send_times[meas_idx],
        sent=sent,
        received=received,
        meas_total=len(meas_idx),
    )
    return samples, truth


def estimate_link_delay(samples: PathSampleSet) -> list[LinkEstimate]:
    """Mean/variance per link from successive cumulative segments.

    For link i the mean is E(Y_i) - E(Y_{i-1}) and the variance is
    Var(Y_i) + Var(Y_{i-1}) - 2 Cov(Y_i, Y_{i-1}), taken over packets that
    survived to node i (Y_0 is identically 0). Estimators are unbiased
    (n-1 normalization).
    """
    out = []
    records = samples.records
    for link in range(1, samples.links + 1):
        y = records[:, link - 1]
        mask = ~np.isnan(y)
        n = int(mask.sum())
        if n < 2:
            raise InsufficientSamples(link, n)
        y_i = y[mask]
        y_prev = np.zeros(n) if link == 1 else records[mask, link - 2]
        mean = float(y_i.mean() - y_prev.mean())
        var_i = float(np.var(y_i, ddof=1))
        var_prev = float(np.var(y_prev, ddof=1))
        cov = float(np.cov(y_i, y_prev, ddof=1)[0, 1]) if link > 1 else 0.0
        var = max(0.0, var_i + var_prev - 2.0 * cov)
        out.append(LinkEstimate(link=link, delay_mean=mean, delay_var=var, n_samples=n))
    return out


LossMethod = Literal["counter", "consistency"]


def estimate_link_loss(samples: PathSampleSet, method: LossMethod) -> list[LinkEstimate]:
    """Delivery ratio per link from successive survival totals.

    counter: node packet counters over all traffic. consistency: counts of
    measurement records whose timestamp trail reaches node i vs node i-1.
    """
    if method == "counter":
        upstream = samples.sent[:-1].astype(float)
        downstream = samples.received[1:].astype(float)
    elif method == "consistency":
        reach = (~np.isnan(samples.records)).sum(axis=0).astype(float)
        upstream = np.concatenate(([float(samples.meas_total)], reach[:-1]))
        downstream = reach
    else:
        raise ValueError(f"unknown loss method {method!r}")
    out = []
    for link in range(1, samples.links + 1):
        denom = upstream[link - 1]
        if denom <= 0:
            raise ZeroDenominator(link)
        ratio = float(downstream[link - 1] / denom)
        out.append(
            LinkEstimate(
                link=link,
                delivery=ratio,
                over_unity=ratio > 1.0,
                n_samples=int(denom),
            )
        )
    return out


def end_to_end_delay_mean(samples: PathSampleSet) -> float:
    """Mean delay over records that survived the whole path."""
    last = samples.records[:, -1]
    full = last[~np.isnan(last)]
    if len(full) == 0:
        raise InsufficientSamples(samples.links, 0)
    return float(full.mean())


def end_to_end_delivery(samples: PathSampleSet) -> float:
    """Sender-counter vs receiver-counter delivery over all traffic."""
    return float(samples.received[-1] / samples.sent[0])


def rmse(estimates: Sequence[float], truth: Sequence[float]) -> tuple[np.ndarray, float]:
    """Per-link errors and the aggregate root-mean-squared error."""
    est = np.asarray(estimates, float)
    tru = np.asarray(truth, float)
    if est.shape != tru.shape:
        raise ValueError("estimate/truth vectors differ in length")
    err = est - tru
    return err, float(np.sqrt(np.mean(err**2)))


def publish_link_estimates(
    handle,
    path_id: str,
    delay: Sequence[LinkEstimate],
    loss: Sequence[LinkEstimate],
    ts: float = 0.0,
) -> None:
    """One report per link on topic ``path.<path-id>.<link>``."""
    by_link: dict[int, dict] = {}
    for est in delay:
        by_link.setdefault(est.link, {}).update(
            delay_mean=est.delay_mean, delay_var=est.delay_var
        )
    for est in loss:
        by_link.setdefault(est.link, {}).update(delivery=est.delivery)
    for link in sorted(by_link):
        record = {"path": path_id, "link": str(link), "ts": ts, **by_link[link]}
        handle.publish(
            f"path.{path_id}.{link}", json.dumps(record, sort_keys=True).encode()
        )


# ---------------------------------------------------------------------------
# seed sweeps


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    link: int
    rmse_delay_mean: float
    rmse_delay_var: float
    rmse_loss_counter: float
    rmse_loss_consistency: float
    seeds: int


def run_sweep(
    alphas: Sequence[float],
    seeds: Sequence[int],
    base: SimConfig = SimConfig(),
) -> list[SweepRow]:
    """Per-alpha, per-link RMSE against ground truth across seeded runs."""
    rows: list[SweepRow] = []
    links = base.links
    for alpha in alphas:
        sq = {key: np.zeros(links) for key in ("dm", "dv", "lc", "li")}
        for seed in seeds:
            config = SimConfig(
                hops=base.hops,
                packets=base.packets,
                alpha=alpha,
                loss=base.loss,
                gamma_shape=base.gamma_shape,
                gamma_scale=base.gamma_scale,
                arrival_mu=base.arrival_mu,
                arrival_sigma=base.arrival_sigma,
                clock_offsets=base.clock_offsets,
                seed=seed,
            )
            samples, truth = simulate(config)
            delay = estimate_link_delay(samples)
            sq["dm"] += (np.array([e.delay_mean for e in delay]) - truth.delay_mean) ** 2
            sq["dv"] += (np.array([e.delay_var for e in delay]) - truth.delay_var) ** 2
            for key, method in (("lc", "counter"), ("li", "consistency")):
                loss = estimate_link_loss(samples, method)
                sq[key] += (np.array([e.delivery for e in loss]) - truth.delivery) ** 2
        k = len(seeds)
        for link in range(links):
            rows.append(
                SweepRow(
                    alpha=float(alpha),
                    link=link + 1,
                    rmse_delay_mean=math.sqrt(sq["dm"][link] / k),
                    rmse_delay_var=math.sqrt(sq["dv"][link] / k),
                    rmse_loss_counter=math.sqrt(sq["lc"][link] / k),
                    rmse_loss_consistency=math.sqrt(sq["li"][link] / k),
                    seeds=k,
                )
            )
    return rows
