"""Detector unit tests: estimators, suspicion functions, loss and resource
estimates, ordering rules, and checkpoint serialization."""

import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choreo import (
    AdaptiveDetector,
    DetectorConfig,
    HeartbeatSample,
    IotaDetector,
    OrderingError,
    PacketLossState,
    PhiAccrualDetector,
    UnavailableError,
    make_detector,
    serialize,
    deserialize,
)
from choreo.detectors import lagrange_interpolate


def feed(det, timestamps, seqs=None):
    seqs = seqs or range(1, len(timestamps) + 1)
    for t, s in zip(timestamps, seqs):
        det.record_heartbeat(HeartbeatSample(t, s))
    return det


def iota_with_stats(rho, kappa, n, last_timestamp=0, config=None):
    """White-box fixture: an iota detector with chosen estimator sums."""
    det = IotaDetector(config or DetectorConfig(omega_min=2))
    det.estimator.rho_sum = rho
    det.estimator.kappa_sum = kappa
    det.estimator.n = n
    det.last_timestamp = last_timestamp
    det.last_seq = n + 1
    return det


class TestRecording:
    def test_unit_intervals_accumulate(self):
        det = feed(IotaDetector(DetectorConfig(omega_min=2)), [0, 1, 2, 3])
        assert det.estimator.n == 3
        assert det.estimator.rho_sum == 3
        assert det.estimator.kappa_sum == 3
        mu, var, n = det.estimator_snapshot()
        intervals = [1, 1, 1]
        assert mu == statistics.mean(intervals)
        assert var == statistics.variance(intervals)

    def test_first_heartbeat_records_no_interval(self):
        det = IotaDetector()
        det.record_heartbeat(HeartbeatSample(5, 1))
        assert det.estimator.n == 0
        assert det.last_timestamp == 5

    def test_window_reset_freezes_batch_stats(self):
        cfg = DetectorConfig(omega_max=3, omega_min=2)
        det = IotaDetector(cfg)
        timestamps = [0, 2, 3, 7, 8]  # intervals 2, 1, 4, then 1 in the fresh window
        feed(det, timestamps)
        first_window = [2, 1, 4]
        assert det.estimator.frozen == (
            statistics.mean(first_window),
            statistics.variance(first_window),
        )
        assert det.estimator.n == 1  # only the post-reset interval

    def test_rejects_stale_timestamp(self):
        det = feed(IotaDetector(), [0, 10])
        with pytest.raises(OrderingError):
            det.record_heartbeat(HeartbeatSample(10, 3))
        with pytest.raises(OrderingError):
            det.record_heartbeat(HeartbeatSample(5, 3))

    def test_rejects_stale_seq(self):
        det = feed(IotaDetector(), [0, 10])
        with pytest.raises(OrderingError):
            det.record_heartbeat(HeartbeatSample(20, 2))

    def test_all_kinds_validate_ordering(self):
        for kind in ("iota", "phi", "adaptive"):
            det = feed(make_detector(kind), [0, 10])
            with pytest.raises(OrderingError):
                det.record_heartbeat(HeartbeatSample(3, 9))


class TestEstimatorSnapshot:
    def test_two_intervals(self):
        det = feed(IotaDetector(DetectorConfig(omega_min=2)), [0, 1, 4])  # intervals 1, 3
        mu, var, n = det.estimator_snapshot()
        assert mu == 2.0
        assert var == statistics.variance([1, 3]) == 2.0
        assert n == 2

    def test_zero_variance(self):
        det = feed(IotaDetector(DetectorConfig(omega_min=2)), [0, 1, 2, 3])
        mu, var, _ = det.estimator_snapshot()
        assert (mu, var) == (1.0, 0.0)

    def test_bootstrap_fallback(self):
        cfg = DetectorConfig(omega_min=2, bootstrap_period=1.0, bootstrap_variance=9.0)
        det = feed(IotaDetector(cfg), [0, 7])  # one interval: variance undefined
        mu, var, n = det.estimator_snapshot()
        assert (mu, var, n) == (1.0, 9.0, 1)

    def test_frozen_preferred_over_bootstrap(self):
        cfg = DetectorConfig(omega_max=3, omega_min=3, bootstrap_period=1.0, bootstrap_variance=9.0)
        det = feed(IotaDetector(cfg), [0, 1, 2, 3])  # reset fires at n=3
        mu, var, n = det.estimator_snapshot()
        assert (mu, var) == (1.0, 0.0)  # frozen values, not bootstrap
        assert n == 0

    def test_reset_continuity_until_omega_min(self):
        cfg = DetectorConfig(omega_max=4, omega_min=3)
        det = feed(IotaDetector(cfg), [0, 2, 4, 6, 8])  # reset after 4 intervals of 2
        frozen = det.estimator_snapshot()
        assert (frozen.mu, frozen.var) == (2.0, 0.0)
        det.record_heartbeat(HeartbeatSample(9, 6))  # n=1, still below omega_min
        assert det.estimator_snapshot()[:2] == (2.0, 0.0)
        det.record_heartbeat(HeartbeatSample(10, 7))  # n=2, still below omega_min=3
        assert det.estimator_snapshot()[:2] == (2.0, 0.0)
        det.record_heartbeat(HeartbeatSample(11, 8))  # n=3 reaches omega_min
        mu, var, _ = det.estimator_snapshot()
        assert mu == statistics.mean([1, 1, 1])
        assert var == 0.0


class TestIotaSuspicion:
    def test_zero_deviation_is_zero(self):
        det = iota_with_stats(rho=3, kappa=5, n=3)  # mu=1, var=1
        assert det.suspicion(1.0) == 0.0

    def test_unit_deviation(self):
        det = iota_with_stats(rho=3, kappa=5, n=3)  # mu=1, var=1
        assert det.suspicion(2.0) == pytest.approx(-math.log10(0.5), abs=1e-12)

    def test_variance_floor(self):
        det = feed(IotaDetector(DetectorConfig(omega_min=2)), [0, 1, 2, 3])  # var 0
        assert det.suspicion(5.0) == pytest.approx(9.0, abs=1e-6)

    def test_unqueried_detector_unavailable(self):
        with pytest.raises(UnavailableError):
            IotaDetector().suspicion(1.0)

    def test_negative_deviation_before_mean(self):
        det = iota_with_stats(rho=30, kappa=320, n=3)  # mu=10
        assert det.suspicion(4.0) == 0.0


class TestPhiSuspicion:
    def _det(self):
        return feed(PhiAccrualDetector(DetectorConfig(omega_min=2)), [0, 1000, 2000, 3000])

    def test_half_mass_at_mean(self):
        det = self._det()  # mu=1000, var=0 -> floor
        assert det.suspicion(4000.0) == pytest.approx(-math.log10(0.5), abs=1e-9)

    def test_far_left_tail_is_tiny(self):
        det = feed(PhiAccrualDetector(DetectorConfig(omega_min=2)), [0, 900, 2000, 3100])
        mu, var, _ = det.estimator_snapshot()
        sigma = math.sqrt(var)
        level = det.suspicion(3100 + mu - 10 * sigma)
        assert 0.0 <= level < 1e-15

    def test_far_right_tail_is_large(self):
        det = feed(PhiAccrualDetector(DetectorConfig(omega_min=2)), [0, 900, 2000, 3100])
        mu, var, _ = det.estimator_snapshot()
        sigma = math.sqrt(var)
        assert det.suspicion(3100 + mu + 10 * sigma) > 10.0

    def test_no_frozen_refresh(self):
        cfg = DetectorConfig(omega_max=3, omega_min=3, bootstrap_period=500.0, bootstrap_variance=4.0)
        det = feed(PhiAccrualDetector(cfg), [0, 1000, 2000, 3000])  # reset at n=3
        mu, var, n = det.estimator_snapshot()
        assert (mu, var, n) == (500.0, 4.0, 0)  # straight to bootstrap, no frozen


class TestAdaptiveSuspicion:
    def _det(self):
        # intervals 1, 1, 2, 3
        return feed(AdaptiveDetector(), [0, 1, 2, 4, 7])

    def test_empirical_fraction(self):
        assert self._det().suspicion(7 + 2.5) == 0.75

    def test_below_all_samples(self):
        assert self._det().suspicion(7.0) == 0.0

    def test_above_all_samples(self):
        assert self._det().suspicion(7 + 4.0) == 1.0

    def test_empty_window_unavailable(self):
        det = AdaptiveDetector()
        det.record_heartbeat(HeartbeatSample(0, 1))
        with pytest.raises(UnavailableError):
            det.suspicion(5.0)

    def test_window_bounded_by_omega_max(self):
        det = AdaptiveDetector(DetectorConfig(omega_max=4, omega_min=2))
        feed(det, list(range(0, 100, 10)))
        assert len(det.window) == 4
        assert list(det.window) == [10, 10, 10, 10]


class TestThreshold:
    def test_is_suspected_comparisons(self):
        det = iota_with_stats(rho=3, kappa=5, n=3, config=DetectorConfig(omega_min=2, threshold_U=0.3))
        assert det.is_suspected(2.0)  # s ~= 0.301 >= 0.3
        high = iota_with_stats(rho=3, kappa=5, n=3, config=DetectorConfig(omega_min=2, threshold_U=0.31))
        assert not high.is_suspected(2.0)

    def test_zero_threshold_degenerate(self):
        det = iota_with_stats(rho=3, kappa=5, n=3, config=DetectorConfig(omega_min=2, threshold_U=0.0))
        assert det.is_suspected(1.5)  # any positive deviation
        assert det.is_suspected(0.5)  # zero suspicion still meets a zero threshold


class TestPacketLoss:
    def test_burst_two_in_window_ten(self):
        det = IotaDetector(DetectorConfig(alpha=0.5))
        feed(det, list(range(0, 8000, 1000)), seqs=[1, 2, 3, 4, 5, 6, 7, 8])
        det.record_heartbeat(HeartbeatSample(10000, 11))  # gap of 2 -> window 10
        assert det.packet_loss_estimate() == pytest.approx(0.1)

    def test_zero_burst_decays(self):
        state = PacketLossState(alpha=0.25, p_prev=0.8)
        state.observe(0)
        assert state.estimate == pytest.approx(0.6)
        state.observe(0)
        assert state.estimate == pytest.approx(0.45)

    def test_full_learning_limit(self):
        state = PacketLossState(alpha=1.0)
        state.last_seq = 1
        for seq in (2, 3, 4):
            state.track(seq)
        state.track(7)  # gap 2 in window 6
        assert state.estimate == pytest.approx(2 / 6)

    def test_stays_in_unit_interval(self):
        rng = np.random.default_rng(5)
        state = PacketLossState(alpha=0.9)
        seq = 0
        state.track(seq)
        for _ in range(500):
            seq += int(rng.integers(1, 10))
            state.track(seq)
            assert 0.0 <= state.estimate <= 1.0


class TestResourceForecast:
    def test_constant_levels(self):
        det = IotaDetector()
        for i, t in enumerate([0, 10, 20, 30]):
            det.record_heartbeat(HeartbeatSample(t, i + 1, 0.5))
        for future in (35.0, 100.0, -5.0):
            fc = det.resource_forecast(future)
            assert fc.raw == pytest.approx(0.5)
            assert fc.clamped == pytest.approx(0.5)

    def test_linear_depletion(self):
        det = IotaDetector()
        for t, level in zip([0, 1, 2, 3], [1.0, 0.9, 0.8, 0.7]):
            det.record_heartbeat(HeartbeatSample(t, t + 1, level))
        fc = det.resource_forecast(5.0)
        assert fc.raw == pytest.approx(0.5, rel=1e-9)
        fc2 = det.resource_forecast(20.0)  # extrapolates below zero
        assert fc2.raw == pytest.approx(-1.0, rel=1e-9)
        assert fc2.clamped == 0.0

    def test_requires_four_heartbeats(self):
        det = feed(IotaDetector(), [0, 1, 2])
        with pytest.raises(UnavailableError):
            det.resource_forecast(10.0)

    def test_ring_keeps_last_four(self):
        det = IotaDetector()
        levels = [0.9, 0.8, 0.7, 0.6, 0.5]
        for t, level in zip([0, 1, 2, 3, 4], levels):
            det.record_heartbeat(HeartbeatSample(t, t + 1, level))
        assert [s.resource_level for s in det.resource_ring] == levels[-4:]


class TestSerialization:
    def test_round_trip_preserves_behavior(self):
        cfg = DetectorConfig(omega_max=5, omega_min=2, alpha=0.3)
        det = IotaDetector(cfg)
        feed(det, [0, 3, 5, 9, 14], seqs=[1, 2, 4, 5, 9])
        copy = deserialize(serialize(det), cfg)
        assert serialize(copy) == serialize(det)
        assert copy.suspicion(20.0) == det.suspicion(20.0)
        assert copy.packet_loss_estimate() == det.packet_loss_estimate()

    def test_round_trip_all_kinds(self):
        for kind in ("iota", "phi", "adaptive"):
            det = feed(make_detector(kind, DetectorConfig(omega_min=2)), [0, 7, 9, 30])
            copy = deserialize(serialize(det), DetectorConfig(omega_min=2))
            assert serialize(copy) == serialize(det)
            assert copy.suspicion(40.0) == det.suspicion(40.0)

    def test_iota_size_constant_over_stream(self):
        det = IotaDetector(DetectorConfig(omega_max=50, omega_min=2))
        det.record_heartbeat(HeartbeatSample(0, 1))
        det.record_heartbeat(HeartbeatSample(1, 2))
        det.record_heartbeat(HeartbeatSample(2, 3))
        det.record_heartbeat(HeartbeatSample(3, 4))
        base = len(serialize(det))
        rng = np.random.default_rng(1)
        t, s = 3, 4
        for _ in range(300):
            t += int(rng.integers(1, 5000))
            s += int(rng.integers(1, 4))
            det.record_heartbeat(HeartbeatSample(t, s))
            assert len(serialize(det)) == base

    def test_iota_size_independent_of_window(self):
        sizes = set()
        for omega_max in (10, 500, 10**6):
            det = IotaDetector(DetectorConfig(omega_max=omega_max, omega_min=2))
            feed(det, range(0, 600 * 7, 7))
            sizes.add(len(serialize(det)))
        assert len(sizes) == 1

    def test_adaptive_size_grows_with_occupancy(self):
        cfg = DetectorConfig(omega_max=500, omega_min=2)
        small = feed(AdaptiveDetector(cfg), range(0, 10 * 7, 7))
        large = feed(AdaptiveDetector(cfg), range(0, 501 * 7, 7))
        assert len(serialize(large)) > len(serialize(small))
        assert len(large.window) == 500


# ---------------------------------------------------------------------------
# properties

interval_lists = st.lists(st.integers(min_value=1, max_value=10**6), min_size=2, max_size=60)


@given(interval_lists)
@settings(max_examples=200, deadline=None)
def test_estimator_matches_batch_statistics(intervals):
    det = IotaDetector(DetectorConfig(omega_max=1000, omega_min=2))
    t = 0
    det.record_heartbeat(HeartbeatSample(0, 1))
    for i, d in enumerate(intervals):
        t += d
        det.record_heartbeat(HeartbeatSample(t, i + 2))
    mu, var, n = det.estimator_snapshot()
    assert n == len(intervals)
    assert mu == pytest.approx(statistics.mean(intervals), rel=1e-9)
    assert var == pytest.approx(statistics.variance(intervals), rel=1e-9, abs=1e-12)


@given(interval_lists, st.floats(min_value=-2e6, max_value=4e6, allow_nan=False))
@settings(max_examples=200, deadline=None)
def test_adaptive_equals_brute_force_cdf(intervals, offset):
    det = AdaptiveDetector(DetectorConfig(omega_max=1000, omega_min=2))
    t = 0
    det.record_heartbeat(HeartbeatSample(0, 1))
    for i, d in enumerate(intervals):
        t += d
        det.record_heartbeat(HeartbeatSample(t, i + 2))
    now = t + offset
    elapsed = now - t
    expected = sum(1 for d in intervals if d <= elapsed) / len(intervals)
    assert det.suspicion(now) == expected


@given(
    interval_lists,
    st.lists(st.floats(min_value=0, max_value=5e6, allow_nan=False), min_size=2, max_size=20),
)
@settings(max_examples=150, deadline=None)
def test_suspicion_monotone_between_heartbeats(intervals, offsets):
    dets = []
    for kind in ("iota", "phi", "adaptive"):
        det = make_detector(kind, DetectorConfig(omega_max=1000, omega_min=2))
        t = 0
        det.record_heartbeat(HeartbeatSample(0, 1))
        for i, d in enumerate(intervals):
            t += d
            det.record_heartbeat(HeartbeatSample(t, i + 2))
        dets.append((det, t))
    for det, t in dets:
        times = sorted(t + o for o in offsets)
        values = det.suspicion_many(times)
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
        assert all(v >= 0.0 for v in values)


@given(interval_lists, st.floats(min_value=0.01, max_value=6.0))
@settings(max_examples=150, deadline=None)
def test_suspicion_inverse_is_first_crossing(intervals, threshold):
    for kind in ("iota", "phi", "adaptive"):
        det = make_detector(kind, DetectorConfig(omega_max=1000, omega_min=2))
        t = 0
        det.record_heartbeat(HeartbeatSample(0, 1))
        for i, d in enumerate(intervals):
            t += d
            det.record_heartbeat(HeartbeatSample(t, i + 2))
        u = min(threshold, 1.0) if kind == "adaptive" else threshold
        elapsed = det.suspicion_inverse(u)
        if math.isinf(elapsed):
            continue
        scale = max(abs(elapsed), 1.0)
        assert det.suspicion(t + elapsed + 1e-6 * scale) >= u
        before = det.suspicion(t + elapsed - 1e-6 * scale)
        assert before <= u + 1e-9


@given(
    st.lists(st.floats(min_value=-10, max_value=10, allow_nan=False), min_size=4, max_size=4),
    st.integers(min_value=0, max_value=3),
    st.floats(min_value=-20, max_value=20, allow_nan=False),
)
@settings(max_examples=200, deadline=None)
def test_lagrange_reproduces_cubics(coeffs, degree, x):
    xs = [0.0, 1.5, 4.0, 7.0]
    poly = np.polynomial.Polynomial(coeffs[: degree + 1])
    ys = [poly(v) for v in xs]
    expected = float(poly(x))
    got = lagrange_interpolate(xs, ys, x)
    assert got == pytest.approx(expected, rel=1e-6, abs=1e-9)


def test_suspicion_batch_equals_scalar():
    for kind in ("iota", "phi", "adaptive"):
        det = feed(make_detector(kind, DetectorConfig(omega_min=2)), [0, 900, 2100, 3000])
        times = [3000.0, 3500.5, 4000.0, 9000.0]
        batch = det.suspicion_many(times)
        for t, v in zip(times, batch):
            assert det.suspicion(t) == v
