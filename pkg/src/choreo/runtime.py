"""Controller and engine state machines, driven by the simulator.

The controller owns discovery: offerings register with it, it instantiates
recipe runtime configurations, derives the monitoring topology, and
distributes one interaction descriptor per engine.  From then on engines
run autonomously: they exchange choreography data directly, send
heartbeats to whoever monitors them, and watch their own monitored peers.
Only a failure notification brings the controller back into the loop, at
which point it re-runs offering selection and redistributes descriptors.

Offering behaviors are pluggable pure functions keyed by category, so a
demo scenario (switches driving lights) is configuration rather than
special-cased code.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

from .choreography import (
    CategoryTaxonomy,
    InteractionDescriptor,
    MonitoringLink,
    Offering,
    Recipe,
    RecipeRuntimeConfiguration,
    attach_monitoring,
    derive_monitoring_links,
    evaluate_osr,
    generate_interaction_descriptors,
    instantiate_rrc,
    match_offering,
)
from .detectors import DetectorConfig, HeartbeatSample, IotaDetector
from .errors import ConfigError, RegistrationError, RoutingError, UnavailableError
from .simnet import SimEvent, Simulator, to_millis

log = logging.getLogger(__name__)

CONTROLLER_ID = "controller"


# ---------------------------------------------------------------------------
# offering behaviors

def passthrough_behavior(engine: "Engine", inputs: dict) -> dict:
    """Copy the (single) input value to every output port."""
    if not inputs or not engine.offering.outputs:
        return {}
    value = next(iter(inputs.values()))
    return {p.name: value for p in engine.offering.outputs}


def recording_behavior(engine: "Engine", inputs: dict) -> dict:
    """Store the received value as the device state; emit nothing."""
    if inputs:
        engine.device_state = next(iter(inputs.values())) if len(inputs) == 1 else dict(inputs)
    return {}


DEFAULT_BEHAVIORS: dict[str, Callable] = {
    "Light": recording_behavior,
}


# ---------------------------------------------------------------------------
# engine

class Engine:
    """One offering's runtime: routing, computation, monitoring.

    Driven entirely by simulator events; holds a detector per monitored
    peer (created and dropped strictly in step with the interaction
    descriptor) and notifies the controller exactly once per false-to-true
    suspicion transition.
    """

    def __init__(
        self,
        offering: Offering,
        heartbeat_period: float = 1.0,
        tick_period: float = 0.25,
        behaviors: Mapping[str, Callable] | None = None,
        controller_id: str = CONTROLLER_ID,
    ):
        self.offering = offering
        self.id = offering.id
        self.heartbeat_period = heartbeat_period
        self.tick_period = tick_period
        self.behaviors = dict(DEFAULT_BEHAVIORS if behaviors is None else behaviors)
        self.controller_id = controller_id
        self.indes: InteractionDescriptor | None = None
        self.input_buffer: dict[str, object] = {}
        self.detectors: dict[str, IotaDetector] = {}
        self.suspected: dict[str, bool] = {}
        self.device_state = None
        self.last_input_source: str | None = None
        self.last_input_time: float | None = None
        self._seq = 0
        self._hb_chain = False
        self._tick_chain = False

    # -- event plumbing ----------------------------------------------------

    def handle(self, sim: Simulator, event: SimEvent) -> None:
        if event.kind == "data-message":
            payload = event.payload or {}
            mtype = payload.get("type")
            if mtype == "indes":
                self.apply_indes(InteractionDescriptor.from_json(payload["indes"]), sim)
            elif mtype == "stimulus":
                self.emit_output(sim, payload.get("value"), payload.get("port"))
            elif mtype == "data":
                self.process_input(sim, payload["port"], payload["value"], event.source)
        elif event.kind == "heartbeat-deliver":
            self._record_heartbeat(event)
        elif event.kind == "heartbeat-send":
            self._heartbeat_tick(sim, event)
        elif event.kind == "query":
            self._monitor_tick(sim, event)

    def apply_indes(self, indes: InteractionDescriptor, sim: Simulator) -> None:
        """Adopt a fresh descriptor; detector states follow the monitoring list.

        Detectors for peers that stay monitored are kept (their learned
        estimates survive redistribution); removed peers are dropped and new
        peers start fresh.
        """
        wanted = dict(indes.monitoring)
        for peer in list(self.detectors):
            if peer not in wanted:
                del self.detectors[peer]
                self.suspected.pop(peer, None)
        for peer, cfg in wanted.items():
            if peer not in self.detectors:
                self.detectors[peer] = IotaDetector(cfg)
                self.suspected[peer] = False
        self.indes = indes
        if indes.heartbeat_targets and not self._hb_chain:
            self._hb_chain = True
            sim.schedule(
                SimEvent(sim.now + self.heartbeat_period, "heartbeat-send", source=self.id)
            )
        if indes.monitoring and not self._tick_chain:
            self._tick_chain = True
            sim.schedule(SimEvent(sim.now + self.tick_period, "query", source=self.id, target=self.id))

    def _record_heartbeat(self, event: SimEvent) -> None:
        det = self.detectors.get(event.source)
        if det is None:
            return
        payload = event.payload or {}
        det.record_heartbeat(
            HeartbeatSample(
                to_millis(event.time),
                int(payload.get("seq", 0)),
                float(payload.get("resource", 1.0)),
            )
        )

    def _heartbeat_tick(self, sim: Simulator, event: SimEvent) -> None:
        self._seq += 1
        targets = self.indes.heartbeat_targets if self.indes else ()
        for target in targets:
            sim.schedule(
                SimEvent(
                    event.time,
                    "heartbeat-deliver",
                    source=self.id,
                    target=target,
                    payload={"seq": self._seq, "resource": 1.0},
                )
            )
        sim.schedule(
            SimEvent(event.time + self.heartbeat_period, "heartbeat-send", source=self.id)
        )

    def _monitor_tick(self, sim: Simulator, event: SimEvent) -> None:
        for peer in sorted(self.detectors):
            det = self.detectors[peer]
            try:
                level = det.suspicion(to_millis(event.time))
            except UnavailableError:
                continue  # no heartbeat from this peer yet
            now_suspected = level >= det.config.threshold_U
            if now_suspected and not self.suspected.get(peer, False):
                sim.schedule(
                    SimEvent(
                        event.time,
                        "data-message",
                        source=self.id,
                        target=self.controller_id,
                        payload={
                            "type": "notification",
                            "failed": peer,
                            "suspicion": level,
                            "timestamp": event.time,
                        },
                    )
                )
            self.suspected[peer] = now_suspected
        sim.schedule(
            SimEvent(event.time + self.tick_period, "query", source=self.id, target=self.id)
        )

    # -- choreography data -------------------------------------------------

    def process_input(self, sim: Simulator, port: str, value, source: str | None) -> None:
        """Buffer one input; when all bound inputs hold values, compute and emit."""
        if self.indes is None:
            raise RoutingError(f"{self.id}: no interaction descriptor yet")
        bound = {b.port for b in self.indes.input_bindings}
        if port not in bound:
            raise RoutingError(f"{self.id}: port {port!r} is not bound")
        self.input_buffer[port] = value
        self.last_input_source = source
        self.last_input_time = sim.now
        if not bound.issubset(self.input_buffer):
            return  # still waiting for the rest of the inputs
        inputs = dict(self.input_buffer)
        self.input_buffer.clear()
        behavior = self.behaviors.get(self.offering.category, passthrough_behavior)
        outputs = behavior(self, inputs) or {}
        for out_port, out_value in outputs.items():
            self._send_output(sim, out_port, out_value)

    def emit_output(self, sim: Simulator, value, port: str | None = None) -> None:
        """Device-originated output (e.g. a physical button press)."""
        self.device_state = value
        if self.indes is None:
            return  # not part of any choreography yet
        if port is None:
            if not self.offering.outputs:
                return
            port = self.offering.outputs[0].name
        self._send_output(sim, port, value)

    def _send_output(self, sim: Simulator, port: str, value) -> None:
        for target in self.indes.output_targets:
            if target.port != port:
                continue
            sim.schedule(
                SimEvent(
                    sim.now,
                    "data-message",
                    source=self.id,
                    target=target.remote_offering,
                    payload={"type": "data", "port": target.remote_port, "value": value},
                )
            )

    def state_dump(self) -> dict:
        return {
            "offering": self.id,
            "has_indes": self.indes is not None,
            "device_state": self.device_state,
            "last_input_source": self.last_input_source,
            "last_input_time": self.last_input_time,
            "monitored_peers": sorted(self.detectors),
        }


# ---------------------------------------------------------------------------
# controller

class Controller:
    """Discovery, descriptor distribution, and recovery.

    All mutations are serialized through the event loop; between
    distributions the controller is idle and the choreography runs without
    it.
    """

    def __init__(
        self,
        taxonomy: CategoryTaxonomy,
        recipes: Mapping[str, Recipe],
        rrcs: list[RecipeRuntimeConfiguration],
        default_config: DetectorConfig | None = None,
    ):
        self.taxonomy = taxonomy
        self.recipes = dict(recipes)
        self.rrcs: dict[str, RecipeRuntimeConfiguration] = {r.id: r for r in rrcs}
        self.registry: dict[str, Offering] = {}
        self.failed: set[str] = set()
        self.default_config = default_config or DetectorConfig()
        self._last_indes: dict[str, str] = {}

    def handle(self, sim: Simulator, event: SimEvent) -> None:
        if event.kind != "data-message":
            return
        payload = event.payload or {}
        mtype = payload.get("type")
        if mtype == "register":
            offering = Offering.from_json(payload["offering"])
            distributions = self.register_offering(offering)
        elif mtype == "notification":
            distributions = self.handle_failure_notification(payload["failed"])
        else:
            return
        for oid, indes in distributions:
            sim.schedule(
                SimEvent(
                    event.time,
                    "data-message",
                    source=CONTROLLER_ID,
                    target=oid,
                    payload={"type": "indes", "indes": indes.to_json()},
                )
            )

    def register_offering(self, offering: Offering) -> list[tuple[str, InteractionDescriptor]]:
        """Insert or replace an offering, then re-run discovery everywhere.

        Re-registration is also the resurrection path for a previously
        failed offering.
        """
        if not offering.id or not isinstance(offering.id, str):
            raise RegistrationError("offering id must be a non-empty string")
        if not self.taxonomy.contains(offering.category):
            raise RegistrationError(f"unknown offering category {offering.category!r}")
        self.registry[offering.id] = offering
        self.failed.discard(offering.id)
        return self.rediscover()

    def handle_failure_notification(self, failed_id: str) -> list[tuple[str, InteractionDescriptor]]:
        """Exclude the offering from candidacy and re-run selection."""
        if failed_id not in self.registry:
            log.warning("failure notification for unknown offering %r ignored", failed_id)
            return []
        if failed_id in self.failed:
            return []  # already handled
        self.failed.add(failed_id)
        return self.rediscover()

    def rediscover(self) -> list[tuple[str, InteractionDescriptor]]:
        """Re-instantiate every RRC and distribute descriptors that changed."""
        available = {
            oid: off for oid, off in self.registry.items() if oid not in self.failed
        }
        for rrc_id in sorted(self.rrcs):
            rrc = self.rrcs[rrc_id]
            fresh = instantiate_rrc(rrc, self.recipes[rrc.recipe_id], available, self.taxonomy)
            if fresh.status != "active" and rrc.status in ("active", "degraded"):
                fresh = replace(fresh, status="degraded")
            self.rrcs[rrc_id] = fresh
        links = self.monitoring_links()
        descriptors: dict[str, InteractionDescriptor] = {
            oid: InteractionDescriptor(oid) for oid in sorted(available)
        }
        for rrc_id in sorted(self.rrcs):
            rrc = self.rrcs[rrc_id]
            if rrc.status != "active":
                continue
            partial = generate_interaction_descriptors(
                rrc, self.recipes[rrc.recipe_id], self.registry, monitoring_links=()
            )
            for oid, indes in partial.items():
                merged = descriptors[oid]
                for b in indes.input_bindings:
                    if b not in merged.input_bindings:
                        merged.input_bindings.append(b)
                for b in indes.output_targets:
                    if b not in merged.output_targets:
                        merged.output_targets.append(b)
        attach_monitoring(descriptors, links)
        changed = []
        for oid in sorted(descriptors):
            doc = json.dumps(descriptors[oid].to_json(), sort_keys=True)
            if self._last_indes.get(oid) != doc:
                self._last_indes[oid] = doc
                changed.append((oid, descriptors[oid]))
        for oid in self.failed:
            self._last_indes.pop(oid, None)
        return changed

    def monitoring_links(self) -> list[MonitoringLink]:
        return derive_monitoring_links(
            list(self.rrcs.values()),
            self.recipes,
            self.registry,
            self.default_config,
            self.failed,
        )

    def validate_assignments(self) -> list[str]:
        """Re-check every active RRC against matching, rules, and cardinality."""
        problems = []
        for rrc_id in sorted(self.rrcs):
            rrc = self.rrcs[rrc_id]
            if rrc.status != "active":
                continue
            recipe = self.recipes[rrc.recipe_id]
            for ing in recipe.ingredients:
                osr = rrc.osr_for(ing.id)
                chosen = rrc.assignment.get(ing.id, ())
                if not osr.min_count <= len(chosen) <= osr.max_count:
                    problems.append(f"{rrc_id}/{ing.id}: cardinality {len(chosen)} outside bounds")
                for oid in chosen:
                    if oid in self.failed or oid not in self.registry:
                        problems.append(f"{rrc_id}/{ing.id}: {oid} not available")
                        continue
                    off = self.registry[oid]
                    if not match_offering(ing, off, self.taxonomy):
                        problems.append(f"{rrc_id}/{ing.id}: {oid} no longer matches")
                    elif not evaluate_osr(osr.rule, off):
                        problems.append(f"{rrc_id}/{ing.id}: {oid} violates the selection rule")
        return problems

    def state_dump(self) -> dict:
        return {
            "registry": sorted(self.registry),
            "failed": sorted(self.failed),
            "rrcs": {rid: self.rrcs[rid].to_json() for rid in sorted(self.rrcs)},
            "monitoring_links": [
                {"monitor": l.monitor, "monitored": l.monitored, "kind": l.kind}
                for l in self.monitoring_links()
            ],
        }


# ---------------------------------------------------------------------------
# scenarios

@dataclass(frozen=True)
class ScenarioSpec:
    """A full runtime scenario: world definition, schedule, and assertions."""

    taxonomy: CategoryTaxonomy
    recipes: dict[str, Recipe]
    offerings: dict[str, Offering]
    rrcs: list[RecipeRuntimeConfiguration]
    schedule: tuple[dict, ...]
    assertions: tuple[dict, ...]
    horizon: float
    heartbeat_period: float = 1.0
    tick_period: float = 0.25
    default_config: DetectorConfig = field(default_factory=DetectorConfig)

    @classmethod
    def from_json(cls, doc: dict) -> "ScenarioSpec":
        try:
            taxonomy = CategoryTaxonomy.from_json(_req(doc, "taxonomy"))
        except Exception as exc:
            raise ConfigError("taxonomy", str(exc)) from exc
        recipes = {}
        for i, rdoc in enumerate(_req(doc, "recipes")):
            try:
                recipe = Recipe.from_json(rdoc)
            except Exception as exc:
                raise ConfigError(f"recipes[{i}]", str(exc)) from exc
            recipes[recipe.id] = recipe
        offerings = {}
        for i, odoc in enumerate(_req(doc, "offerings")):
            try:
                off = Offering.from_json(odoc)
            except Exception as exc:
                raise ConfigError(f"offerings[{i}]", str(exc)) from exc
            offerings[off.id] = off
        rrcs = []
        for i, rrcdoc in enumerate(_req(doc, "rrcs")):
            try:
                rrc = RecipeRuntimeConfiguration.from_json(rrcdoc)
            except Exception as exc:
                raise ConfigError(f"rrcs[{i}]", str(exc)) from exc
            if rrc.recipe_id not in recipes:
                raise ConfigError(f"rrcs[{i}].recipe", f"unknown recipe {rrc.recipe_id!r}")
            rrcs.append(rrc)
        horizon = doc.get("horizon")
        if not isinstance(horizon, (int, float)) or horizon <= 0:
            raise ConfigError("horizon", "expected a positive number")
        schedule = tuple(doc.get("schedule", ()))
        for i, item in enumerate(schedule):
            if "time" not in item or "action" not in item:
                raise ConfigError(f"schedule[{i}]", "needs 'time' and 'action'")
            if item["action"] not in ("register", "crash", "stimulus", "stimulus_train"):
                raise ConfigError(f"schedule[{i}].action", f"unknown action {item['action']!r}")
            if item.get("offering") not in offerings:
                raise ConfigError(f"schedule[{i}].offering", "references an unknown offering")
        try:
            default_config = DetectorConfig.from_json(doc.get("default_detector", {}))
        except ValueError as exc:
            raise ConfigError("default_detector", str(exc)) from exc
        return cls(
            taxonomy=taxonomy,
            recipes=recipes,
            offerings=offerings,
            rrcs=rrcs,
            schedule=schedule,
            assertions=tuple(doc.get("assertions", ())),
            horizon=float(horizon),
            heartbeat_period=float(doc.get("heartbeat_period", 1.0)),
            tick_period=float(doc.get("tick_period", 0.25)),
            default_config=default_config,
        )


@dataclass(frozen=True)
class AssertionResult:
    name: str
    passed: bool
    detail: str


@dataclass
class ScenarioResult:
    events: list[SimEvent]
    controller: Controller
    engines: dict[str, Engine]
    assertions: list[AssertionResult]

    @property
    def ok(self) -> bool:
        return all(a.passed for a in self.assertions)

    def final_state(self) -> dict:
        return {
            "controller": self.controller.state_dump(),
            "engines": {oid: self.engines[oid].state_dump() for oid in sorted(self.engines)},
            "assertions": [
                {"name": a.name, "passed": a.passed, "detail": a.detail} for a in self.assertions
            ],
        }


def run_scenario(spec: ScenarioSpec) -> ScenarioResult:
    """Execute a scenario to its horizon and evaluate its assertions."""
    sim = Simulator()
    controller = Controller(spec.taxonomy, spec.recipes, list(spec.rrcs), spec.default_config)
    sim.add_node(CONTROLLER_ID, controller.handle)
    engines = {}
    for oid in sorted(spec.offerings):
        engine = Engine(
            spec.offerings[oid],
            heartbeat_period=spec.heartbeat_period,
            tick_period=spec.tick_period,
        )
        engines[oid] = engine
        sim.add_node(oid, engine.handle)
    for item in spec.schedule:
        _schedule_item(sim, spec, item)
    events = sim.run(spec.horizon)
    assertions = [_evaluate_assertion(a, events, controller, engines) for a in spec.assertions]
    return ScenarioResult(events, controller, engines, assertions)


def _schedule_item(sim: Simulator, spec: ScenarioSpec, item: dict) -> None:
    t = float(item["time"])
    action = item["action"]
    oid = item["offering"]
    if action == "register":
        sim.schedule(
            SimEvent(
                t,
                "data-message",
                source=oid,
                target=CONTROLLER_ID,
                payload={"type": "register", "offering": spec.offerings[oid].to_json()},
            )
        )
    elif action == "crash":
        sim.crash(oid, t)
    elif action == "stimulus":
        sim.schedule(
            SimEvent(
                t,
                "data-message",
                target=oid,
                payload={"type": "stimulus", "value": item.get("value"), "port": item.get("port")},
            )
        )
    elif action == "stimulus_train":
        period = float(item.get("period", 2.0))
        until = float(item.get("until", spec.horizon))
        values = item.get("values", [1, 0])
        k = 0
        when = t
        while when <= until:
            sim.schedule(
                SimEvent(
                    when,
                    "data-message",
                    target=oid,
                    payload={
                        "type": "stimulus",
                        "value": values[k % len(values)],
                        "port": item.get("port"),
                    },
                )
            )
            k += 1
            when = t + k * period


def _evaluate_assertion(
    spec: dict, events: list[SimEvent], controller: Controller, engines: dict[str, Engine]
) -> AssertionResult:
    kind = spec.get("type")
    if kind == "failover":
        return _assert_failover(spec, events, controller)
    if kind == "rrc_status":
        rrc = controller.rrcs.get(spec["rrc"])
        status = rrc.status if rrc else "missing"
        return AssertionResult(
            f"rrc_status:{spec['rrc']}",
            status == spec["status"],
            f"expected {spec['status']}, found {status}",
        )
    if kind == "assignment_valid":
        problems = controller.validate_assignments()
        return AssertionResult(
            "assignment_valid", not problems, "; ".join(problems) or "all assignments valid"
        )
    return AssertionResult(str(kind), False, f"unknown assertion type {kind!r}")


def _assert_failover(spec: dict, events: list[SimEvent], controller: Controller) -> AssertionResult:
    failed = spec["failed"]
    replacement = spec["replacement"]
    within = float(spec["within"])
    name = f"failover:{failed}->{replacement}"
    crash_time = next(
        (e.time for e in events if e.kind == "crash" and e.source == failed), None
    )
    if crash_time is None:
        return AssertionResult(name, False, f"no crash of {failed} in the log")
    rrc = controller.rrcs.get(spec["rrc"])
    if rrc is None or rrc.status != "active":
        return AssertionResult(name, False, f"RRC not active after recovery: {rrc and rrc.status}")
    if replacement not in rrc.assigned_offerings():
        return AssertionResult(name, False, f"{replacement} not assigned after recovery")
    recipe = controller.recipes[rrc.recipe_id]
    ing_of = {
        ing.id for ing in recipe.ingredients if replacement in rrc.assignment.get(ing.id, ())
    }
    dependents = set()
    for ia in recipe.interactions:
        if ia.from_ingredient in ing_of:
            dependents.update(rrc.assignment.get(ia.to_ingredient, ()))
    if not dependents:
        return AssertionResult(name, False, f"{replacement} feeds no dependents in the recipe")
    latencies = []
    for dep in sorted(dependents):
        arrival = next(
            (
                e.time
                for e in events
                if e.kind == "data-message"
                and e.source == replacement
                and e.target == dep
                and (e.payload or {}).get("type") == "data"
                and e.time > crash_time
            ),
            None,
        )
        if arrival is None:
            return AssertionResult(name, False, f"{dep} never heard from {replacement} after the crash")
        latencies.append(arrival - crash_time)
    worst = max(latencies)
    return AssertionResult(
        name,
        worst <= within,
        f"all dependents driven by {replacement} within {worst:.3f} (limit {within})",
    )


def _req(doc: dict, key: str):
    if key not in doc:
        raise ConfigError(key, "missing required field")
    return doc[key]
