import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monplane import ratemon
from monplane.ratemon import (
    InsufficientSamples,
    LognormalParams,
    MomentWindow,
    NonPositiveMean,
    RiskDetector,
    erf_approx,
    fit,
    overload_risk,
    percentile,
)


# ---------------------------------------------------------------------------
# moment counters


def test_observe_single_sample():
    w = MomentWindow(dt=1.0).observe(1000)
    assert (w.n, w.s1, w.s2) == (1, 1000.0, 1e6)


def test_observe_constant_stream_zero_variance():
    w = MomentWindow(dt=0.5)
    for _ in range(100):
        w.observe(500)  # rate 1000 B/s
    assert w.s1 == pytest.approx(1000.0)
    assert w.s2 == pytest.approx(1e6)
    assert w.variance == pytest.approx(0.0, abs=1e-6)


def test_observe_arithmetic():
    w = MomentWindow(dt=1.0)
    for kb in (1000, 2000, 3000):
        w.observe(kb)
    assert w.s1 == pytest.approx(2000.0)
    assert w.s2 == pytest.approx(14.0 / 3.0 * 1e6)


# ---------------------------------------------------------------------------
# the method-of-moments fit


def test_fit_worked_example():
    # M = e and V = e^2(e-1) make sigma^2 exactly 1, mu exactly 0.5
    M = math.e
    V = math.e**2 * (math.e - 1)
    w = MomentWindow(dt=1.0, n=10, s1=M, s2=V + M * M)
    params = fit(w)
    assert params.sigma2 == pytest.approx(1.0, abs=1e-12)
    assert params.mu == pytest.approx(0.5, abs=1e-12)


def test_fit_zero_variance_degenerates_to_point_mass():
    w = MomentWindow(dt=1.0, n=5, s1=42.0, s2=42.0 * 42.0)
    params = fit(w)
    assert params.sigma2 == 0.0
    assert params.mu == pytest.approx(math.log(42.0))


def test_fit_requires_two_samples():
    with pytest.raises(InsufficientSamples):
        fit(MomentWindow(dt=1.0, n=1, s1=1.0, s2=1.0))


def test_fit_requires_positive_mean():
    with pytest.raises(NonPositiveMean):
        fit(MomentWindow(dt=1.0, n=5, s1=0.0, s2=0.0))


def test_fit_recovers_seeded_lognormal():
    rng = np.random.default_rng(2024)
    samples = rng.lognormal(mean=1.0, sigma=0.5, size=10_000)
    w = MomentWindow(dt=1.0)
    for x in samples:
        w.observe(x)
    params = fit(w)
    assert abs(params.mu - 1.0) < 0.05
    assert abs(params.sigma - 0.5) < 0.05


def test_fit_inversion_identities():
    rng = np.random.default_rng(7)
    for _ in range(50):
        mu, sigma = rng.uniform(-2, 6), rng.uniform(0.05, 1.5)
        samples = rng.lognormal(mean=mu, sigma=sigma, size=500)
        w = MomentWindow(dt=1.0)
        for x in samples:
            w.observe(x)
        p = fit(w)
        M_back = math.exp(p.mu + p.sigma2 / 2)
        V_back = (math.exp(p.sigma2) - 1) * math.exp(2 * p.mu + p.sigma2)
        assert M_back == pytest.approx(p.M, rel=1e-9)
        assert V_back == pytest.approx(p.V, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------------------
# risk from the fitted tail


def test_risk_half_at_median():
    p = LognormalParams(mu=2.0, sigma2=0.49, M=0.0, V=0.0)
    assert overload_risk(p, math.exp(2.0)) == pytest.approx(0.5, abs=1e-7)


def test_risk_degenerate_point_mass():
    p = LognormalParams(mu=math.log(10.0), sigma2=0.0, M=10.0, V=0.0)
    assert overload_risk(p, 20.0) == 0.0
    assert overload_risk(p, 5.0) == 1.0
    assert overload_risk(p, 10.0) == 0.5


def test_risk_two_sigma_tail():
    p = LognormalParams(mu=0.5, sigma2=1.0, M=0.0, V=0.0)
    risk = overload_risk(p, math.exp(0.5 + 2.0))
    assert risk == pytest.approx(0.0227501319, abs=1e-6)


def test_erf_approximation_accuracy():
    for x in np.linspace(-6, 6, 2001):
        assert abs(erf_approx(float(x)) - math.erf(float(x))) <= 1.5e-7


@settings(max_examples=200, deadline=None)
@given(
    mu=st.floats(-3, 8),
    sigma2=st.floats(0.0001, 4.0),
    c1=st.floats(0.1, 1e6),
    c2=st.floats(0.1, 1e6),
)
def test_risk_monotone_in_capacity(mu, sigma2, c1, c2):
    p = LognormalParams(mu=mu, sigma2=sigma2, M=0.0, V=0.0)
    lo, hi = min(c1, c2), max(c1, c2)
    assert overload_risk(p, lo) >= overload_risk(p, hi) - 1e-12


@settings(max_examples=200, deadline=None)
@given(
    mu1=st.floats(-3, 8),
    mu2=st.floats(-3, 8),
    sigma2=st.floats(0.0001, 4.0),
    c=st.floats(0.1, 1e6),
)
def test_risk_monotone_in_mu(mu1, mu2, sigma2, c):
    lo, hi = min(mu1, mu2), max(mu1, mu2)
    p_lo = LognormalParams(mu=lo, sigma2=sigma2, M=0.0, V=0.0)
    p_hi = LognormalParams(mu=hi, sigma2=sigma2, M=0.0, V=0.0)
    assert overload_risk(p_hi, c) >= overload_risk(p_lo, c) - 1e-12


# ---------------------------------------------------------------------------
# hysteresis


def test_detector_fires_on_kth_consecutive():
    det = RiskDetector(entity="l1", capacity=1e9, threshold=0.01, k_consecutive=3)
    events = [det.tick(r) for r in (0.02, 0.02, 0.02)]
    assert events[0] is None and events[1] is None
    assert events[2] is not None and events[2].state == "congested"


def test_detector_blocks_flapping():
    det = RiskDetector(entity="l1", capacity=1e9, threshold=0.01, k_consecutive=3)
    risks = [0.02, 0.005] * 50
    assert all(det.tick(r) is None for r in risks)
    assert det.state == "calm"


def test_detector_quiet_on_zero_risk():
    det = RiskDetector(entity="l1", capacity=1e9, threshold=0.01, k_consecutive=3)
    assert all(det.tick(0.0) is None for _ in range(100))


def test_detector_round_trip():
    det = RiskDetector(entity="l1", capacity=1e9, threshold=0.01, k_consecutive=2)
    trace = [0.02, 0.02, 0.02, 0.001, 0.001]
    events = [e for e in (det.tick(r) for r in trace) if e]
    assert [e.state for e in events] == ["congested", "calm"]


# ---------------------------------------------------------------------------
# detection experiment on seeded synthetic traffic


def _run_episode(seed: int, overload: bool, capacity_z: float = 5.0):
    """One episode: 10 tumbling windows of 50 samples; returns True when the
    detector entered 'congested' at any point."""
    mu0, sigma = 2.0, 0.5
    capacity = math.exp(mu0 + capacity_z * sigma)
    # overload shifts the rate distribution so the true exceedance
    # 1 - Phi(1.2) ~ 0.115 is more than 10x the 1% threshold
    mu = math.log(capacity) - 1.2 * sigma if overload else mu0
    rng = np.random.default_rng(seed)
    mon = ratemon.RateMonitor(
        entity="l", capacity=capacity, dt=1.0, report_every=50, threshold=0.01,
        k_consecutive=3,
    )
    detected = False
    for _ in range(10):
        for x in rng.lognormal(mean=mu, sigma=sigma, size=50):
            for rec in mon.observe(float(x)):
                if rec["type"] == "zone-event" and rec["state"] == "congested":
                    detected = True
    return detected


def test_detection_rate_on_overload_episodes():
    detected = sum(_run_episode(seed, overload=True) for seed in range(200))
    assert detected >= 0.98 * 200, f"detected only {detected}/200"


def test_false_alarm_rate_on_calm_traffic():
    false_alarms = sum(_run_episode(seed, overload=False) for seed in range(200))
    assert false_alarms < 0.05 * 200, f"{false_alarms}/200 false alarms"


def test_subsampled_fit_keeps_99th_percentile():
    mu, sigma = 1.0, 0.5
    capacity = math.exp(mu + 3 * sigma)
    rng = np.random.default_rng(11)
    samples = rng.lognormal(mean=mu, sigma=sigma, size=50_000)
    full, sub = MomentWindow(dt=1.0), MomentWindow(dt=1.0)
    for i, x in enumerate(samples):
        full.observe(float(x))
        if i % 10 == 0:
            sub.observe(float(x))
    p99_full = percentile(fit(full), 0.99)
    p99_sub = percentile(fit(sub), 0.99)
    assert abs(p99_full - p99_sub) < 0.10 * capacity


# ---------------------------------------------------------------------------
# reporting records


def test_monitor_report_record_shape():
    mon = ratemon.RateMonitor(entity="link1", capacity=1e9, dt=1.0, report_every=5)
    records = mon.run([1000.0] * 5)
    assert len(records) == 1
    rec = records[0]
    assert rec["type"] == "report" and rec["entity"] == "link1"
    assert set(rec) >= {"mu", "sigma2", "M", "V", "risk", "ts"}
    assert mon.window.n == 0  # tumbling reset
