"""Deterministic discrete-event simulation of heartbeat traffic.

Everything here is seeded: the same (spec, model, seeds, events) always
produces bit-identical traces and logs.  Simulated time is a float in
abstract "time units"; the detectors consume integer milliseconds, with
one time unit mapping to 1000 ms at the delivery boundary (rounded
half-up).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, SchedulingError

MS_PER_UNIT = 1000


def to_millis(t: float) -> int:
    """Convert simulated time units to detector milliseconds, rounding half-up."""
    return int(np.floor(t * MS_PER_UNIT + 0.5))


# ---------------------------------------------------------------------------
# seed derivation

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One splitmix64 step; the standard mixer for deriving child seeds."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, label: str) -> int:
    """Deterministically derive a labeled component seed from one master seed."""
    h = 0xCBF29CE484222325
    for b in label.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return splitmix64((master ^ h) & _MASK64)


# ---------------------------------------------------------------------------
# heartbeat trace generation

@dataclass(frozen=True)
class TracePoint:
    """One heartbeat send: absolute time (units), sequence number, resource level."""

    time: float
    seq: int
    resource_level: float = 1.0


@dataclass(frozen=True)
class TraceSpec:
    """Normal inter-arrival heartbeat trace, clamped below to stay causal."""

    mean: float
    variance: float
    duration: float
    seed: int
    clamp_floor: float = 1e-3

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be >= 0")
        if self.duration <= 0:
            raise ValueError("duration must be > 0")
        if self.clamp_floor <= 0:
            raise ValueError("clamp_floor must be > 0")

    def to_json(self) -> dict:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "duration": self.duration,
            "seed": self.seed,
            "clamp_floor": self.clamp_floor,
        }

    @classmethod
    def from_json(cls, doc: dict, path: str = "trace") -> "TraceSpec":
        mean = _req_number(doc, "mean", path)
        variance = _req_number(doc, "variance", path)
        duration = _req_number(doc, "duration", path)
        seed = int(doc.get("seed", 0))
        clamp = float(doc.get("clamp_floor", 1e-3))
        try:
            return cls(mean, variance, duration, seed, clamp)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from exc


def generate_heartbeat_trace(spec: TraceSpec) -> list[TracePoint]:
    """Draw i.i.d. normal inter-arrival times, clamp below, accumulate.

    Clamping (rather than resampling) keeps the generator branch-free, so a
    seed always maps to the same draw sequence regardless of parameters.
    """
    rng = np.random.default_rng(spec.seed)
    sigma = float(np.sqrt(spec.variance))
    points: list[TracePoint] = []
    t = 0.0
    seq = 0
    while True:
        deltas = rng.normal(spec.mean, sigma, size=1024)
        np.maximum(deltas, spec.clamp_floor, out=deltas)
        for d in deltas:
            t += float(d)
            if t > spec.duration:
                return points
            seq += 1
            points.append(TracePoint(t, seq))


# ---------------------------------------------------------------------------
# burst packet loss

@dataclass(frozen=True)
class BurstLossModel:
    """Burst loss: each examined packet may start a burst that drops the next L packets.

    The triggering packet itself is delivered; L is drawn uniformly from
    {burst_len_min .. burst_len_max}.  Packets inside a burst consume no
    randomness, so drop patterns are reproducible per seed.
    """

    burst_rate: float
    burst_len_min: int = 1
    burst_len_max: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.burst_rate <= 1.0:
            raise ValueError("burst_rate must be in [0, 1]")
        if not 1 <= self.burst_len_min <= self.burst_len_max:
            raise ValueError("need 1 <= burst_len_min <= burst_len_max")

    def to_json(self) -> dict:
        return {
            "burst_rate": self.burst_rate,
            "burst_len_min": self.burst_len_min,
            "burst_len_max": self.burst_len_max,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict, path: str = "loss") -> "BurstLossModel":
        rate = _req_number(doc, "burst_rate", path)
        lmin = int(doc.get("burst_len_min", 1))
        lmax = int(doc.get("burst_len_max", 4))
        seed = int(doc.get("seed", 0))
        try:
            return cls(rate, lmin, lmax, seed)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from exc


class BurstLossFilter:
    """Stateful per-packet form of :class:`BurstLossModel` for event-driven use."""

    def __init__(self, model: BurstLossModel):
        self.model = model
        self._rng = np.random.default_rng(model.seed)
        self._remaining = 0

    def survives(self) -> bool:
        if self._remaining > 0:
            self._remaining -= 1
            return False
        if self._rng.random() < self.model.burst_rate:
            self._remaining = int(
                self._rng.integers(self.model.burst_len_min, self.model.burst_len_max + 1)
            )
        return True


def apply_burst_loss(trace: Iterable[TracePoint], model: BurstLossModel) -> list[TracePoint]:
    """Delivered subset of an ordered trace; only deletes, never reorders."""
    filt = BurstLossFilter(model)
    return [p for p in trace if filt.survives()]


# ---------------------------------------------------------------------------
# event loop

EVENT_KINDS = ("crash", "heartbeat-send", "heartbeat-deliver", "data-message", "query")
_KIND_PRIORITY = {kind: i for i, kind in enumerate(EVENT_KINDS)}


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str
    source: str | None = None
    target: str | None = None
    payload: dict | None = None

    def __post_init__(self):
        if self.kind not in _KIND_PRIORITY:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def to_json(self) -> dict:
        return {
            "time": self.time,
            "kind": self.kind,
            "source": self.source,
            "target": self.target,
            "detail": self.payload,
        }


# Events are dispatched to the node that has to act on them: senders act on
# their own send ticks, receivers on deliveries and messages.
_DISPATCH_TO_SOURCE = {"heartbeat-send"}
_DISPATCH_TO_TARGET = {"heartbeat-deliver", "data-message", "query"}


class Simulator:
    """Single-threaded deterministic event loop.

    Ties are broken by (time, kind priority, insertion order).  A crash at
    time T removes the node: any later event originating from it is
    silently discarded, and events targeting it are logged but no longer
    dispatched.
    """

    def __init__(self):
        self.now = 0.0
        self.log: list[SimEvent] = []
        self.crashed: dict[str, float] = {}
        self._handlers: dict[str, Callable] = {}
        self._queue: list = []
        self._counter = 0

    def add_node(self, node_id: str, handler: Callable | None = None) -> None:
        if handler is not None:
            self._handlers[node_id] = handler

    def schedule(self, event: SimEvent) -> None:
        if event.time < self.now:
            raise SchedulingError(
                f"event at {event.time} is before current time {self.now}"
            )
        heapq.heappush(
            self._queue, (event.time, _KIND_PRIORITY[event.kind], self._counter, event)
        )
        self._counter += 1

    def crash(self, node_id: str, time: float) -> None:
        self.schedule(SimEvent(time, "crash", source=node_id))

    def run(self, until: float) -> list[SimEvent]:
        """Process all events up to and including ``until``; returns the full log."""
        while self._queue and self._queue[0][0] <= until:
            _, _, _, event = heapq.heappop(self._queue)
            self.now = event.time
            src = event.source
            if event.kind == "crash":
                self.log.append(event)
                if src is not None and src not in self.crashed:
                    self.crashed[src] = event.time
                continue
            if src in self.crashed and event.time > self.crashed[src]:
                continue  # the node no longer exists; nothing is emitted or logged
            self.log.append(event)
            if event.kind in _DISPATCH_TO_SOURCE:
                node = src
            elif event.kind in _DISPATCH_TO_TARGET:
                node = event.target
            else:
                node = None
            if node is None or node not in self._handlers:
                continue
            if node in self.crashed and event.time > self.crashed[node]:
                continue  # delivery to a dead node: logged, not processed
            self._handlers[node](self, event)
        return self.log


class HeartbeatSender:
    """Node handler replaying a precomputed send trace toward one monitor."""

    def __init__(
        self,
        node_id: str,
        target: str,
        trace: list[TracePoint],
        loss: BurstLossModel | None = None,
        link_delay: float = 0.0,
    ):
        self.node_id = node_id
        self.target = target
        self.trace = trace
        self.link_delay = link_delay
        self._filter = BurstLossFilter(loss) if loss is not None else None

    def schedule_all(self, sim: Simulator) -> None:
        for p in self.trace:
            sim.schedule(
                SimEvent(
                    p.time,
                    "heartbeat-send",
                    source=self.node_id,
                    target=self.target,
                    payload={"seq": p.seq, "resource": p.resource_level},
                )
            )

    def __call__(self, sim: Simulator, event: SimEvent) -> None:
        if self._filter is not None and not self._filter.survives():
            return
        sim.schedule(
            SimEvent(
                event.time + self.link_delay,
                "heartbeat-deliver",
                source=self.node_id,
                target=self.target,
                payload=event.payload,
            )
        )


class MonitorNode:
    """Node handler feeding delivered heartbeats into a detector."""

    def __init__(self, node_id: str, detector):
        self.node_id = node_id
        self.detector = detector

    def __call__(self, sim: Simulator, event: SimEvent) -> None:
        if event.kind != "heartbeat-deliver":
            return
        from .detectors import HeartbeatSample

        payload = event.payload or {}
        self.detector.record_heartbeat(
            HeartbeatSample(
                to_millis(event.time),
                int(payload.get("seq", 0)),
                float(payload.get("resource", 1.0)),
            )
        )


def write_event_log(events: Iterable[SimEvent], path) -> None:
    """Write one JSON record per line: time, kind, source, target, detail."""
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_json(), sort_keys=True))
            fh.write("\n")


def _req_number(doc: dict, key: str, path: str) -> float:
    if key not in doc:
        raise ConfigError(f"{path}.{key}", "missing required field")
    value = doc[key]
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {value!r}")
    return float(value)
