"""Quality-of-service metrics for failure detectors and threshold sweeps.

Three metrics are computed over one simulated run:

* detection time      - how long after a crash the detector permanently
                        suspects the node,
* mistake rate        - transitions into suspicion of a live node, per
                        time unit of the alive period,
* query accuracy      - fraction of periodically sampled verdicts that
                        match the ground-truth alive/crashed state.

A sweep runs every configured detector at every threshold over the
identical delivered heartbeat trace (same seeds throughout), yielding the
points of the accuracy/performance tradeoff curves.

Crossing times are solved analytically through each detector's
``suspicion_inverse``; since every suspicion function is non-decreasing
between heartbeats, the first crossing inside an interval is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .detectors import DetectorConfig, HeartbeatSample, make_detector
from .errors import ConfigError, UnavailableError
from .simnet import (
    MS_PER_UNIT,
    BurstLossModel,
    SimEvent,
    TracePoint,
    TraceSpec,
    apply_burst_loss,
    generate_heartbeat_trace,
    to_millis,
)

CURVE_COLUMNS = ("detector", "threshold", "detection_time", "mistake_rate", "query_accuracy", "censored")


@dataclass(frozen=True)
class QosReport:
    """One sweep point: metrics for a (detector, threshold) pair."""

    detector_kind: str
    threshold_U: float
    detection_time: float | None
    mistake_rate: float
    query_accuracy: float
    censored: bool
    run_metadata: dict


@dataclass(frozen=True)
class DetectorSweep:
    config: DetectorConfig
    thresholds: tuple[float, ...]

    def __post_init__(self):
        if not self.thresholds:
            raise ValueError("thresholds must not be empty")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")


@dataclass(frozen=True)
class SweepSpec:
    detectors: dict[str, DetectorSweep]
    trace: TraceSpec
    loss: BurstLossModel | None
    crash_time: float
    horizon: float
    sampling_period: float

    def __post_init__(self):
        if not 0 < self.crash_time <= self.horizon:
            raise ValueError("need 0 < crash_time <= horizon")
        if self.sampling_period <= 0:
            raise ValueError("sampling_period must be > 0")

    @classmethod
    def from_json(cls, doc: dict) -> "SweepSpec":
        if "trace" not in doc:
            raise ConfigError("trace", "missing required field")
        trace = TraceSpec.from_json(doc["trace"], "trace")
        loss = None
        if doc.get("loss") is not None:
            loss = BurstLossModel.from_json(doc["loss"], "loss")
        crash = _req_number(doc, "crash_time")
        horizon = _req_number(doc, "horizon")
        sampling = float(doc.get("sampling_period", trace.mean / 10.0))
        det_doc = doc.get("detectors")
        if not isinstance(det_doc, dict) or not det_doc:
            raise ConfigError("detectors", "expected a non-empty mapping of detector kinds")
        detectors = {}
        for kind, entry in det_doc.items():
            if kind not in ("iota", "phi", "adaptive"):
                raise ConfigError(f"detectors.{kind}", "unknown detector kind")
            try:
                cfg = DetectorConfig.from_json(entry.get("config", {}))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"detectors.{kind}.config", str(exc)) from exc
            thresholds = entry.get("thresholds")
            if not isinstance(thresholds, list) or not thresholds:
                raise ConfigError(f"detectors.{kind}.thresholds", "expected a non-empty list")
            try:
                detectors[kind] = DetectorSweep(cfg, tuple(float(u) for u in thresholds))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"detectors.{kind}.thresholds", str(exc)) from exc
        try:
            return cls(detectors, trace, loss, crash, horizon, sampling)
        except ValueError as exc:
            raise ConfigError("crash_time", str(exc)) from exc


# ---------------------------------------------------------------------------
# replay helpers

def _feed(detector, point: TracePoint) -> None:
    detector.record_heartbeat(
        HeartbeatSample(to_millis(point.time), point.seq, point.resource_level)
    )


def _crossing_time(detector, threshold: float) -> float:
    """Absolute time (units) at which suspicion first reaches the threshold.

    Valid until the next heartbeat arrives; may be +-inf.  A detector that
    cannot produce a verdict yet (e.g. an empty inter-arrival window) never
    crosses, so the node counts as not suspected.
    """
    try:
        elapsed_ms = detector.suspicion_inverse(threshold)
    except UnavailableError:
        return math.inf
    if math.isinf(elapsed_ms):
        return elapsed_ms
    return (detector.last_timestamp + elapsed_ms) / MS_PER_UNIT


def delivered_heartbeats(
    events: Iterable[SimEvent], source: str | None = None, target: str | None = None
) -> list[TracePoint]:
    """Extract delivered heartbeats from a simulator log as trace points."""
    out = []
    for ev in events:
        if ev.kind != "heartbeat-deliver":
            continue
        if source is not None and ev.source != source:
            continue
        if target is not None and ev.target != target:
            continue
        payload = ev.payload or {}
        out.append(
            TracePoint(ev.time, int(payload.get("seq", 0)), float(payload.get("resource", 1.0)))
        )
    return out


# ---------------------------------------------------------------------------
# metrics

def compute_detection_time(
    arrivals: list[TracePoint],
    make: Callable[[], object],
    threshold: float,
    crash_time: float,
    horizon: float,
) -> tuple[float | None, bool]:
    """Time from the crash until suspicion permanently reaches the threshold.

    Suspicion is monotone after the final heartbeat, so the first crossing
    is the permanent one.  Returns (None, True) when the detector never
    crosses before the horizon (censored), or when it never saw a
    heartbeat at all.
    """
    det = make()
    seen = False
    for p in arrivals:
        if p.time > crash_time:
            break
        _feed(det, p)
        seen = True
    if not seen:
        return None, True
    cross = _crossing_time(det, threshold)
    td = max(0.0, cross - crash_time)
    if crash_time + td > horizon:
        return None, True
    return td, False


def compute_mistake_rate(
    arrivals: list[TracePoint],
    make: Callable[[], object],
    threshold: float,
    alive_interval: tuple[float, float],
) -> float:
    """Transitions into suspicion while the node is alive, per time unit.

    A mistake is the false->true transition of the thresholded verdict;
    how long the mistake lasts affects query accuracy, not this rate.
    Before the first delivered heartbeat the detector has no verdict, so
    no transition can occur there.
    """
    a0, a1 = alive_interval
    if a1 <= a0:
        raise ValueError("alive interval must have positive length")
    det = make()
    flag = False
    mistakes = 0
    pts = [p for p in arrivals if p.time < a1]
    for i, p in enumerate(pts):
        _feed(det, p)
        seg_start = max(p.time, a0)
        seg_end = pts[i + 1].time if i + 1 < len(pts) else a1
        seg_end = min(seg_end, a1)
        if seg_end <= seg_start:
            continue  # segment entirely outside the alive window
        cross = _crossing_time(det, threshold)
        v_start = cross <= seg_start
        if v_start and not flag:
            mistakes += 1
        flag = v_start
        if not flag and cross < seg_end:
            mistakes += 1
            flag = True
    return mistakes / (a1 - a0)


def compute_query_accuracy(
    arrivals: list[TracePoint],
    make: Callable[[], object],
    threshold: float,
    sampling_period: float,
    run_interval: tuple[float, float],
    crash_time: float,
) -> float:
    """Fraction of periodically sampled verdicts matching the ground truth.

    Deterministic periodic sampling stands in for querying at random times;
    it estimates the same probability without Monte-Carlo noise.  Samples
    taken before the first delivered heartbeat are excluded (the detector
    has no basis for a verdict there).
    """
    r0, r1 = run_interval
    if sampling_period <= 0:
        raise ValueError("sampling_period must be > 0")
    if not arrivals:
        raise ValueError("no delivered heartbeats to sample")
    n = int(math.floor((r1 - r0) / sampling_period + 1e-9))
    samples = r0 + sampling_period * np.arange(1, n + 1)
    det = make()
    correct = 0
    considered = 0
    pts = list(arrivals)
    for i, p in enumerate(pts):
        _feed(det, p)
        seg_start = p.time
        seg_end = pts[i + 1].time if i + 1 < len(pts) else r1 + sampling_period
        lo = np.searchsorted(samples, seg_start, side="left")
        hi = np.searchsorted(samples, seg_end, side="left")
        if hi <= lo:
            continue
        sub = samples[lo:hi]
        cross = _crossing_time(det, threshold)
        verdicts = sub >= cross
        truth = sub >= crash_time
        correct += int(np.sum(verdicts == truth))
        considered += len(sub)
    if considered == 0:
        raise ValueError("no sample instants fell after the first heartbeat")
    return correct / considered


# ---------------------------------------------------------------------------
# sweep

def sweep_thresholds(spec: SweepSpec) -> list[QosReport]:
    """Run every (detector, threshold) pair over one identical delivered trace."""
    trace = generate_heartbeat_trace(spec.trace)
    sends = [p for p in trace if p.time <= spec.crash_time]
    delivered = apply_burst_loss(sends, spec.loss) if spec.loss is not None else sends
    if not delivered:
        raise ValueError("the configured trace delivers no heartbeats before the crash")
    alive = (0.0, spec.crash_time)
    run = (0.0, spec.horizon)
    metadata = sweep_metadata(spec)
    reports = []
    for kind in sorted(spec.detectors):
        sweep = spec.detectors[kind]
        for u in sweep.thresholds:
            cfg = replace(sweep.config, threshold_U=u)
            make = lambda kind=kind, cfg=cfg: make_detector(kind, cfg)
            td, censored = compute_detection_time(delivered, make, u, spec.crash_time, spec.horizon)
            lm = compute_mistake_rate(delivered, make, u, alive)
            pa = compute_query_accuracy(
                delivered, make, u, spec.sampling_period, run, spec.crash_time
            )
            reports.append(QosReport(kind, u, td, lm, pa, censored, metadata))
    return reports


def sweep_metadata(spec: SweepSpec) -> dict:
    meta = {
        "trace": spec.trace.to_json(),
        "loss": spec.loss.to_json() if spec.loss is not None else None,
        "crash_time": spec.crash_time,
        "horizon": spec.horizon,
        "sampling_period": spec.sampling_period,
        "time_unit_ms": MS_PER_UNIT,
        "detectors": {
            kind: {
                "config": sweep.config.to_json(),
                "thresholds": list(sweep.thresholds),
            }
            for kind, sweep in sorted(spec.detectors.items())
        },
    }
    return meta


def write_curve_csvs(reports: list[QosReport], out_dir) -> dict[str, Path]:
    """One CSV per detector kind; rows keep the sweep's threshold order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_kind: dict[str, list[QosReport]] = {}
    for r in reports:
        by_kind.setdefault(r.detector_kind, []).append(r)
    paths = {}
    for kind in sorted(by_kind):
        path = out_dir / f"{kind}_curve.csv"
        lines = [",".join(CURVE_COLUMNS)]
        for r in by_kind[kind]:
            td = "" if r.detection_time is None else repr(r.detection_time)
            lines.append(
                ",".join(
                    (
                        r.detector_kind,
                        repr(r.threshold_U),
                        td,
                        repr(r.mistake_rate),
                        repr(r.query_accuracy),
                        "true" if r.censored else "false",
                    )
                )
            )
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths[kind] = path
    return paths


def _req_number(doc: dict, key: str) -> float:
    if key not in doc:
        raise ConfigError(key, "missing required field")
    value = doc[key]
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(key, f"expected a number, got {value!r}")
    return float(value)
