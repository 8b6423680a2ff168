"""Accrual failure detectors over heartbeat streams.

Three detectors share one contract (``record_heartbeat`` / ``suspicion`` /
``is_suspected``) so that benchmark and runtime code can stay detector
agnostic:

* :class:`IotaDetector` derives a suspicion level from a one-sided
  Chebyshev tail bound over recursively estimated inter-arrival mean and
  variance.  It additionally tracks an exponentially weighted packet-loss
  estimate from sequence gaps and forecasts resource depletion with a
  cubic Lagrange extrapolation over the last four heartbeats.  Its state
  is constant size regardless of the learning window.
* :class:`PhiAccrualDetector` reuses the same recursive estimators but
  maps the elapsed time through a normal survival function.
* :class:`AdaptiveDetector` stores a bounded window of raw inter-arrival
  times and answers with their empirical CDF.  Its storage deliberately
  grows with the window; the asymmetry against the other two is part of
  what the benchmark measures.

Timestamps are integer milliseconds supplied by the caller (no wall clock
is read here); query times may be fractional.  Suspicion values are
non-negative, zero meaning "no evidence of a crash", and are non-decreasing
in the query time while no new heartbeat arrives.
"""

from __future__ import annotations

import bisect
import json
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.special import log_ndtr, ndtri

from .errors import OrderingError, UnavailableError

_LN10 = math.log(10.0)

# Fixed-width field encoding for state checkpoints.  Every numeric field is
# rendered at a constant byte width (39 digits covers a 128-bit accumulator)
# so that the serialized size of a detector state depends only on the state
# *structure*, never on the magnitudes stored in it.  That makes the
# constant-storage property of the recursive detectors directly measurable.
_INT_WIDTH = 39


def _enc_int(value: int) -> str:
    return f"{int(value):0{_INT_WIDTH}d}"


def _enc_float(value: float) -> str:
    return f"{float(value):+.17e}"


@dataclass(frozen=True)
class HeartbeatSample:
    """One heartbeat: arrival time (ms), sequence number, resource level in [0, 1]."""

    timestamp: int
    seq: int
    resource_level: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.resource_level <= 1.0:
            raise ValueError(f"resource_level must be in [0, 1], got {self.resource_level}")


@dataclass(frozen=True)
class DetectorConfig:
    """Per-service detector parameters.

    ``threshold_U`` is the suspicion level above which a peer counts as
    crashed.  ``omega_max`` bounds the learning window; ``omega_min`` is
    the number of fresh intervals required after a window reset before
    live estimates replace the frozen snapshot (used by the iota detector
    only).  ``bootstrap_period`` / ``bootstrap_variance`` are the
    pre-learning defaults used before any usable estimate exists, and
    ``variance_floor`` keeps the suspicion functions defined on perfectly
    regular traces.
    """

    threshold_U: float = 1.0
    omega_max: int = 500
    omega_min: int = 10
    alpha: float = 0.1
    bootstrap_period: float = 1000.0
    bootstrap_variance: float = 1.0e6
    variance_floor: float = 1e-9

    def __post_init__(self):
        if self.threshold_U < 0:
            raise ValueError("threshold_U must be >= 0")
        if self.omega_min < 2:
            raise ValueError("omega_min must be >= 2")
        if self.omega_max < self.omega_min:
            raise ValueError("omega_max must be >= omega_min")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.bootstrap_period <= 0 or self.bootstrap_variance < 0:
            raise ValueError("bootstrap defaults must be positive")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be > 0")

    def to_json(self) -> dict:
        return {
            "threshold_U": self.threshold_U,
            "omega_max": self.omega_max,
            "omega_min": self.omega_min,
            "alpha": self.alpha,
            "bootstrap_period": self.bootstrap_period,
            "bootstrap_variance": self.bootstrap_variance,
            "variance_floor": self.variance_floor,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DetectorConfig":
        known = {f: doc[f] for f in cls.__dataclass_fields__ if f in doc}
        return cls(**known)


class EstimatorSnapshot(NamedTuple):
    mu: float
    var: float
    n: int


class RateEstimator:
    """Recursive mean/variance of integer inter-arrival times.

    Only the interval sum, the sum of squared intervals, and a count are
    kept, so storage does not depend on the window size.  Once
    ``omega_max`` intervals have accumulated, both sums reset and the
    pre-reset estimates are retained as a frozen snapshot to bridge the
    refresh period.  Sums are exact Python integers; the variance is
    computed as ``(n*kappa - rho^2) / (n*(n-1))`` with a single float
    division, which avoids the cancellation a naive two-term float formula
    suffers on low-jitter traces.
    """

    __slots__ = ("omega_max", "rho_sum", "kappa_sum", "n", "frozen")

    def __init__(self, omega_max: int):
        self.omega_max = omega_max
        self.rho_sum = 0
        self.kappa_sum = 0
        self.n = 0
        self.frozen: tuple[float, float] | None = None

    def add_interval(self, delta: int) -> None:
        self.rho_sum += delta
        self.kappa_sum += delta * delta
        self.n += 1
        if self.n >= self.omega_max:
            self.frozen = (self.live_mean(), self.live_variance())
            self.rho_sum = 0
            self.kappa_sum = 0
            self.n = 0

    def live_mean(self) -> float:
        return self.rho_sum / self.n

    def live_variance(self) -> float:
        return (self.n * self.kappa_sum - self.rho_sum * self.rho_sum) / (self.n * (self.n - 1))

    def snapshot(self, min_n: int, use_frozen: bool, bootstrap: tuple[float, float]) -> EstimatorSnapshot:
        """Current estimate with the fallback chain: live -> frozen -> bootstrap."""
        if self.n >= max(min_n, 2):
            return EstimatorSnapshot(self.live_mean(), self.live_variance(), self.n)
        if use_frozen and self.frozen is not None:
            return EstimatorSnapshot(self.frozen[0], self.frozen[1], self.n)
        return EstimatorSnapshot(bootstrap[0], bootstrap[1], self.n)


@dataclass
class PacketLossState:
    """Exponentially weighted estimate of the heartbeat drop rate.

    ``window_len`` counts the heartbeats expected since the last estimate
    update; a sequence gap of k reads as a loss burst of length k measured
    against that window, after which the window restarts.
    """

    alpha: float
    p_prev: float = 0.0
    last_seq: int | None = None
    window_len: int = 0

    def track(self, seq: int) -> None:
        if self.last_seq is None:
            self.last_seq = seq
            return
        expected = seq - self.last_seq
        self.window_len += expected
        self.last_seq = seq
        if expected > 1:
            self.observe(expected - 1)

    def observe(self, burst_len: int) -> None:
        """Fold one observed burst (possibly 0) into the estimate."""
        ratio = burst_len / self.window_len if self.window_len > 0 else 0.0
        self.p_prev = self.alpha * ratio + (1.0 - self.alpha) * self.p_prev
        self.window_len = 0

    @property
    def estimate(self) -> float:
        return self.p_prev


class ResourceForecast(NamedTuple):
    raw: float
    clamped: float


def lagrange_interpolate(xs, ys, x: float) -> float:
    """Evaluate the Lagrange interpolant through (xs, ys) at x."""
    total = 0.0
    for j, (xj, yj) in enumerate(zip(xs, ys)):
        term = float(yj)
        for i, xi in enumerate(xs):
            if i != j:
                term *= (x - xi) / (xj - xi)
        total += term
    return total


class _HeartbeatMonitor:
    """Shared plumbing: arrival-order validation and threshold application."""

    kind = ""

    def __init__(self, config: DetectorConfig | None = None):
        self.config = config or DetectorConfig()
        self.last_timestamp: int | None = None
        self.last_seq: int | None = None

    def _check_order(self, hb: HeartbeatSample) -> None:
        if self.last_timestamp is not None and hb.timestamp <= self.last_timestamp:
            raise OrderingError(
                f"timestamp {hb.timestamp} not after previous {self.last_timestamp}"
            )
        if self.last_seq is not None and hb.seq <= self.last_seq:
            raise OrderingError(f"seq {hb.seq} not after previous {self.last_seq}")

    def _last_or_raise(self) -> int:
        if self.last_timestamp is None:
            raise UnavailableError(f"{self.kind}: no heartbeat observed yet")
        return self.last_timestamp

    def suspicion(self, now: float) -> float:
        return float(self.suspicion_many([now])[0])

    def suspicion_many(self, times) -> np.ndarray:  # pragma: no cover - overridden
        raise NotImplementedError

    def suspicion_inverse(self, threshold: float) -> float:  # pragma: no cover - overridden
        raise NotImplementedError

    def is_suspected(self, now: float) -> bool:
        return self.suspicion(now) >= self.config.threshold_U


class IotaDetector(_HeartbeatMonitor):
    """Constant-memory accrual detector with loss and resource estimators."""

    kind = "iota"

    def __init__(self, config: DetectorConfig | None = None):
        super().__init__(config)
        self.estimator = RateEstimator(self.config.omega_max)
        self.loss_state = PacketLossState(self.config.alpha)
        self.resource_ring: deque[HeartbeatSample] = deque(maxlen=4)

    def record_heartbeat(self, hb: HeartbeatSample) -> None:
        self._check_order(hb)
        if self.last_timestamp is not None:
            self.estimator.add_interval(hb.timestamp - self.last_timestamp)
        self.loss_state.track(hb.seq)
        self.resource_ring.append(hb)
        self.last_timestamp = hb.timestamp
        self.last_seq = hb.seq

    def estimator_snapshot(self) -> EstimatorSnapshot:
        return self.estimator.snapshot(
            self.config.omega_min,
            use_frozen=True,
            bootstrap=(self.config.bootstrap_period, self.config.bootstrap_variance),
        )

    def suspicion_many(self, times) -> np.ndarray:
        mu, var, _ = self.estimator_snapshot()
        var_eff = max(var, self.config.variance_floor)
        d = np.asarray(times, dtype=float) - self._last_or_raise() - mu
        level = -np.log10(var_eff / (var_eff + d * d))
        return np.where(d <= 0.0, 0.0, level)

    def suspicion_inverse(self, threshold: float) -> float:
        """Smallest elapsed time at which the suspicion reaches ``threshold``."""
        if threshold <= 0.0:
            return -math.inf
        mu, var, _ = self.estimator_snapshot()
        var_eff = max(var, self.config.variance_floor)
        try:
            d = math.sqrt(var_eff) * math.sqrt(10.0 ** threshold - 1.0)
        except OverflowError:
            return math.inf
        return mu + d

    def packet_loss_estimate(self) -> float:
        return self.loss_state.estimate

    def resource_forecast(self, future_t: float) -> ResourceForecast:
        if len(self.resource_ring) < 4:
            raise UnavailableError(
                f"resource forecast needs 4 heartbeats, have {len(self.resource_ring)}"
            )
        xs = [s.timestamp for s in self.resource_ring]
        ys = [s.resource_level for s in self.resource_ring]
        raw = lagrange_interpolate(xs, ys, future_t)
        return ResourceForecast(raw, min(1.0, max(0.0, raw)))

    def to_json(self) -> dict:
        frozen = self.estimator.frozen
        ring = list(self.resource_ring)
        slots = []
        for i in range(4):
            if i < len(ring):
                s = ring[i]
                slots.append(
                    {
                        "timestamp": _enc_int(s.timestamp),
                        "seq": _enc_int(s.seq),
                        "resource_level": _enc_float(s.resource_level),
                    }
                )
            else:
                slots.append(
                    {"timestamp": _enc_int(0), "seq": _enc_int(0), "resource_level": _enc_float(0.0)}
                )
        return {
            "kind": self.kind,
            "rho_sum": _enc_int(self.estimator.rho_sum),
            "kappa_sum": _enc_int(self.estimator.kappa_sum),
            "n": _enc_int(self.estimator.n),
            "last_timestamp": _enc_int(-1 if self.last_timestamp is None else self.last_timestamp),
            "has_frozen": "1" if frozen is not None else "0",
            "frozen_mu": _enc_float(frozen[0] if frozen else 0.0),
            "frozen_var": _enc_float(frozen[1] if frozen else 0.0),
            "omega_max": _enc_int(self.config.omega_max),
            "omega_min": _enc_int(self.config.omega_min),
            "loss_state": {
                "alpha": _enc_float(self.loss_state.alpha),
                "p_prev": _enc_float(self.loss_state.p_prev),
                "last_seq": _enc_int(-1 if self.loss_state.last_seq is None else self.loss_state.last_seq),
                "window_len": _enc_int(self.loss_state.window_len),
            },
            "resource_ring": slots,
            "ring_len": str(len(ring)),
        }

    @classmethod
    def from_json(cls, doc: dict, config: DetectorConfig | None = None) -> "IotaDetector":
        base = config or DetectorConfig()
        cfg = replace(
            base,
            omega_max=int(doc["omega_max"]),
            omega_min=int(doc["omega_min"]),
            alpha=float(doc["loss_state"]["alpha"]),
        )
        det = cls(cfg)
        det.estimator.rho_sum = int(doc["rho_sum"])
        det.estimator.kappa_sum = int(doc["kappa_sum"])
        det.estimator.n = int(doc["n"])
        if doc["has_frozen"] == "1":
            det.estimator.frozen = (float(doc["frozen_mu"]), float(doc["frozen_var"]))
        last_ts = int(doc["last_timestamp"])
        det.last_timestamp = None if last_ts < 0 else last_ts
        loss = doc["loss_state"]
        det.loss_state.p_prev = float(loss["p_prev"])
        last_seq = int(loss["last_seq"])
        det.loss_state.last_seq = None if last_seq < 0 else last_seq
        det.last_seq = det.loss_state.last_seq
        det.loss_state.window_len = int(loss["window_len"])
        for slot in doc["resource_ring"][: int(doc["ring_len"])]:
            det.resource_ring.append(
                HeartbeatSample(
                    int(slot["timestamp"]), int(slot["seq"]), float(slot["resource_level"])
                )
            )
        return det


class PhiAccrualDetector(_HeartbeatMonitor):
    """Accrual detector assuming normally distributed inter-arrival times.

    Shares the recursive estimators with the iota detector but has no
    refresh semantics: after a window reset it switches back to live
    estimates as soon as a variance is defined (two intervals), falling
    back to the bootstrap defaults before that.
    """

    kind = "phi"

    def __init__(self, config: DetectorConfig | None = None):
        super().__init__(config)
        self.estimator = RateEstimator(self.config.omega_max)

    def record_heartbeat(self, hb: HeartbeatSample) -> None:
        self._check_order(hb)
        if self.last_timestamp is not None:
            self.estimator.add_interval(hb.timestamp - self.last_timestamp)
        self.last_timestamp = hb.timestamp
        self.last_seq = hb.seq

    def estimator_snapshot(self) -> EstimatorSnapshot:
        return self.estimator.snapshot(
            2,
            use_frozen=False,
            bootstrap=(self.config.bootstrap_period, self.config.bootstrap_variance),
        )

    def suspicion_many(self, times) -> np.ndarray:
        mu, var, _ = self.estimator_snapshot()
        sigma = math.sqrt(max(var, self.config.variance_floor))
        elapsed = np.asarray(times, dtype=float) - self._last_or_raise()
        z = (elapsed - mu) / sigma
        # -log10(P[X > elapsed]) computed in log space; stable in both tails.
        return -log_ndtr(-z) / _LN10

    def suspicion_inverse(self, threshold: float) -> float:
        if threshold <= 0.0:
            return -math.inf
        mu, var, _ = self.estimator_snapshot()
        sigma = math.sqrt(max(var, self.config.variance_floor))
        tail = 10.0 ** (-threshold)
        if tail <= 0.0:
            return math.inf
        return mu + sigma * float(-ndtri(tail))

    def to_json(self) -> dict:
        frozen = self.estimator.frozen
        return {
            "kind": self.kind,
            "rho_sum": _enc_int(self.estimator.rho_sum),
            "kappa_sum": _enc_int(self.estimator.kappa_sum),
            "n": _enc_int(self.estimator.n),
            "last_timestamp": _enc_int(-1 if self.last_timestamp is None else self.last_timestamp),
            "last_seq": _enc_int(-1 if self.last_seq is None else self.last_seq),
            "has_frozen": "1" if frozen is not None else "0",
            "frozen_mu": _enc_float(frozen[0] if frozen else 0.0),
            "frozen_var": _enc_float(frozen[1] if frozen else 0.0),
            "omega_max": _enc_int(self.config.omega_max),
        }

    @classmethod
    def from_json(cls, doc: dict, config: DetectorConfig | None = None) -> "PhiAccrualDetector":
        base = config or DetectorConfig()
        cfg = replace(base, omega_max=int(doc["omega_max"]))
        det = cls(cfg)
        det.estimator.rho_sum = int(doc["rho_sum"])
        det.estimator.kappa_sum = int(doc["kappa_sum"])
        det.estimator.n = int(doc["n"])
        if doc["has_frozen"] == "1":
            det.estimator.frozen = (float(doc["frozen_mu"]), float(doc["frozen_var"]))
        last_ts = int(doc["last_timestamp"])
        det.last_timestamp = None if last_ts < 0 else last_ts
        last_seq = int(doc["last_seq"])
        det.last_seq = None if last_seq < 0 else last_seq
        return det


class AdaptiveDetector(_HeartbeatMonitor):
    """Empirical-CDF detector over a bounded window of inter-arrival times."""

    kind = "adaptive"

    def __init__(self, config: DetectorConfig | None = None):
        super().__init__(config)
        self.window: deque[int] = deque(maxlen=self.config.omega_max)
        self._sorted: list[int] = []

    def record_heartbeat(self, hb: HeartbeatSample) -> None:
        self._check_order(hb)
        if self.last_timestamp is not None:
            delta = hb.timestamp - self.last_timestamp
            if len(self.window) == self.window.maxlen:
                evicted = self.window[0]
                self._sorted.pop(bisect.bisect_left(self._sorted, evicted))
            self.window.append(delta)
            bisect.insort(self._sorted, delta)
        self.last_timestamp = hb.timestamp
        self.last_seq = hb.seq

    def suspicion_many(self, times) -> np.ndarray:
        if not self.window:
            raise UnavailableError("adaptive: window is empty")
        elapsed = np.asarray(times, dtype=float) - self.last_timestamp
        counts = np.searchsorted(np.asarray(self._sorted, dtype=float), elapsed, side="right")
        return counts / len(self._sorted)

    def suspicion_inverse(self, threshold: float) -> float:
        if not self.window:
            raise UnavailableError("adaptive: window is empty")
        if threshold <= 0.0:
            return -math.inf
        if threshold > 1.0:
            return math.inf
        k = math.ceil(threshold * len(self._sorted))
        return float(self._sorted[k - 1])

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "window": [_enc_int(v) for v in self.window],
            "last_timestamp": _enc_int(-1 if self.last_timestamp is None else self.last_timestamp),
            "last_seq": _enc_int(-1 if self.last_seq is None else self.last_seq),
            "omega_max": _enc_int(self.config.omega_max),
        }

    @classmethod
    def from_json(cls, doc: dict, config: DetectorConfig | None = None) -> "AdaptiveDetector":
        base = config or DetectorConfig()
        cfg = replace(base, omega_max=int(doc["omega_max"]))
        det = cls(cfg)
        for v in doc["window"]:
            det.window.append(int(v))
        det._sorted = sorted(det.window)
        last_ts = int(doc["last_timestamp"])
        det.last_timestamp = None if last_ts < 0 else last_ts
        last_seq = int(doc["last_seq"])
        det.last_seq = None if last_seq < 0 else last_seq
        return det


DETECTOR_KINDS = ("iota", "phi", "adaptive")

_CLASSES = {
    "iota": IotaDetector,
    "phi": PhiAccrualDetector,
    "adaptive": AdaptiveDetector,
}


def make_detector(kind: str, config: DetectorConfig | None = None):
    """Build a fresh detector of the given kind behind the common contract."""
    try:
        cls = _CLASSES[kind]
    except KeyError:
        raise ValueError(f"unknown detector kind {kind!r}, expected one of {DETECTOR_KINDS}")
    return cls(config)


def serialize(detector) -> bytes:
    """Canonical checkpoint bytes; constant length per detector structure."""
    return json.dumps(detector.to_json(), sort_keys=True, separators=(",", ":")).encode("ascii")


def deserialize(data: bytes, config: DetectorConfig | None = None):
    doc = json.loads(data.decode("ascii"))
    return detector_from_json(doc, config)


def detector_from_json(doc: dict, config: DetectorConfig | None = None):
    kind = doc.get("kind")
    if kind not in _CLASSES:
        raise ValueError(f"unknown detector kind in document: {kind!r}")
    return _CLASSES[kind].from_json(doc, config)
