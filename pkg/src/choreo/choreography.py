"""Recipes, offerings, selection rules, and monitoring-topology derivation.

A recipe is a dataflow template whose ingredients stand for classes of
devices or services (a category in an explicit taxonomy plus typed ports).
Instantiating a recipe replaces each ingredient with concrete offerings
that match its category/ports and satisfy the per-ingredient selection
rule; one instantiation is a recipe runtime configuration (RRC).  From an
active RRC the per-engine interaction descriptors and the monitoring
topology are derived.

Everything in this module is a pure function of (registry, taxonomy, RRC)
and is deterministic: candidate ties break by ascending offering id.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .detectors import DetectorConfig
from .errors import RecipeError, StateError, TaxonomyError


# ---------------------------------------------------------------------------
# taxonomy

class CategoryTaxonomy:
    """Explicit category graph: nodes plus acyclic child-is-a-parent edges."""

    def __init__(self, nodes: Iterable[str], subsumptions: Iterable[tuple[str, str]] = ()):
        self.nodes = set(nodes)
        self._parents: dict[str, set[str]] = {n: set() for n in self.nodes}
        for child, parent in subsumptions:
            if child not in self.nodes or parent not in self.nodes:
                raise TaxonomyError(f"subsumption references unknown category: {child} -> {parent}")
            self._parents[child].add(parent)
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        seen_done: dict[str, int] = {}
        for start in self.nodes:
            stack = [(start, iter(self._parents[start]))]
            state = {start: 1}
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    seen_done[node] = 2
                    stack.pop()
                    continue
                if seen_done.get(nxt) == 2:
                    continue
                if state.get(nxt) == 1:
                    raise TaxonomyError(f"taxonomy contains a cycle through {nxt!r}")
                state[nxt] = 1
                stack.append((nxt, iter(self._parents[nxt])))

    def contains(self, category: str) -> bool:
        return category in self.nodes

    def is_a(self, child: str, ancestor: str) -> bool:
        """True when ``child`` equals or transitively subsumes into ``ancestor``."""
        if child not in self.nodes or ancestor not in self.nodes:
            raise TaxonomyError(f"unknown category: {child if child not in self.nodes else ancestor}")
        if child == ancestor:
            return True
        queue = deque(self._parents[child])
        visited = set()
        while queue:
            node = queue.popleft()
            if node == ancestor:
                return True
            if node in visited:
                continue
            visited.add(node)
            queue.extend(self._parents[node])
        return False

    def to_json(self) -> dict:
        subs = sorted((c, p) for c, parents in self._parents.items() for p in parents)
        return {"nodes": sorted(self.nodes), "subsumptions": [list(s) for s in subs]}

    @classmethod
    def from_json(cls, doc: dict) -> "CategoryTaxonomy":
        return cls(doc.get("nodes", ()), [tuple(s) for s in doc.get("subsumptions", ())])


# ---------------------------------------------------------------------------
# recipes and offerings

@dataclass(frozen=True)
class Port:
    name: str
    data_type: str

    def to_json(self) -> dict:
        return {"name": self.name, "data_type": self.data_type}

    @classmethod
    def from_json(cls, doc: dict) -> "Port":
        return cls(doc["name"], doc["data_type"])


@dataclass(frozen=True)
class Ingredient:
    """A placeholder for a class of devices: category plus typed ports."""

    id: str
    category: str
    inputs: tuple[Port, ...] = ()
    outputs: tuple[Port, ...] = ()
    non_functional_keys: tuple[str, ...] | None = None

    def __post_init__(self):
        names = [p.name for p in self.inputs] + [p.name for p in self.outputs]
        if len(names) != len(set(names)):
            raise RecipeError(f"ingredient {self.id!r} has duplicate port names")

    @classmethod
    def from_json(cls, doc: dict) -> "Ingredient":
        keys = doc.get("non_functional_keys")
        return cls(
            doc["id"],
            doc["category"],
            tuple(Port.from_json(p) for p in doc.get("inputs", ())),
            tuple(Port.from_json(p) for p in doc.get("outputs", ())),
            tuple(keys) if keys is not None else None,
        )


@dataclass(frozen=True)
class Interaction:
    from_ingredient: str
    from_port: str
    to_ingredient: str
    to_port: str

    @classmethod
    def from_json(cls, doc: dict) -> "Interaction":
        return cls(doc["from"][0], doc["from"][1], doc["to"][0], doc["to"][1])


@dataclass(frozen=True)
class Recipe:
    """Dataflow template: ingredients wired by type-matched interactions."""

    id: str
    ingredients: tuple[Ingredient, ...]
    interactions: tuple[Interaction, ...] = ()

    def ingredient(self, ingredient_id: str) -> Ingredient:
        for ing in self.ingredients:
            if ing.id == ingredient_id:
                return ing
        raise RecipeError(f"recipe {self.id!r} has no ingredient {ingredient_id!r}")

    def validate(self) -> None:
        by_id = {}
        for ing in self.ingredients:
            if ing.id in by_id:
                raise RecipeError(f"duplicate ingredient id {ing.id!r}")
            by_id[ing.id] = ing
        for ia in self.interactions:
            src = by_id.get(ia.from_ingredient)
            dst = by_id.get(ia.to_ingredient)
            if src is None or dst is None:
                raise RecipeError(f"interaction references unknown ingredient: {ia}")
            out = {p.name: p for p in src.outputs}.get(ia.from_port)
            inp = {p.name: p for p in dst.inputs}.get(ia.to_port)
            if out is None:
                raise RecipeError(f"{ia.from_ingredient!r} has no output port {ia.from_port!r}")
            if inp is None:
                raise RecipeError(f"{ia.to_ingredient!r} has no input port {ia.to_port!r}")
            if out.data_type != inp.data_type:
                raise RecipeError(
                    f"type mismatch on {ia}: {out.data_type!r} vs {inp.data_type!r}"
                )
        self._check_acyclic(by_id)

    def _check_acyclic(self, by_id: Mapping[str, Ingredient]) -> None:
        indeg = {i: 0 for i in by_id}
        adj: dict[str, list[str]] = {i: [] for i in by_id}
        for ia in self.interactions:
            adj[ia.from_ingredient].append(ia.to_ingredient)
            indeg[ia.to_ingredient] += 1
        queue = deque(i for i, d in indeg.items() if d == 0)
        seen = 0
        while queue:
            node = queue.popleft()
            seen += 1
            for nxt in adj[node]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    queue.append(nxt)
        if seen != len(by_id):
            raise RecipeError(f"recipe {self.id!r} interaction graph has a cycle")

    @classmethod
    def from_json(cls, doc: dict) -> "Recipe":
        recipe = cls(
            doc["id"],
            tuple(Ingredient.from_json(i) for i in doc.get("ingredients", ())),
            tuple(Interaction.from_json(i) for i in doc.get("interactions", ())),
        )
        recipe.validate()
        return recipe


@dataclass(frozen=True)
class Offering:
    """A concrete device or service: category, typed ports, live properties."""

    id: str
    category: str
    inputs: tuple[Port, ...] = ()
    outputs: tuple[Port, ...] = ()
    properties: Mapping[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "inputs": [p.to_json() for p in self.inputs],
            "outputs": [p.to_json() for p in self.outputs],
            "properties": dict(self.properties),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Offering":
        return cls(
            doc["id"],
            doc["category"],
            tuple(Port.from_json(p) for p in doc.get("inputs", ())),
            tuple(Port.from_json(p) for p in doc.get("outputs", ())),
            dict(doc.get("properties", {})),
        )


# ---------------------------------------------------------------------------
# selection rules

class Rule:
    """Boolean expression over offering properties."""

    def evaluate(self, properties: Mapping[str, object]) -> bool:  # pragma: no cover
        raise NotImplementedError

    def to_json(self) -> dict:  # pragma: no cover
        raise NotImplementedError


_COMPARATORS = {
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
}


@dataclass(frozen=True)
class Predicate(Rule):
    """One comparison leaf.  A missing key makes the leaf false (closed world):
    an offering that does not declare a property must not match a rule that
    restricts it, negated comparisons included."""

    key: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in _COMPARATORS:
            raise ValueError(f"unknown operator {self.op!r}")

    def evaluate(self, properties: Mapping[str, object]) -> bool:
        if self.key not in properties:
            return False
        try:
            return bool(_COMPARATORS[self.op](properties[self.key], self.value))
        except TypeError:
            return False

    def to_json(self) -> dict:
        return {"op": self.op, "key": self.key, "value": self.value}


@dataclass(frozen=True)
class And(Rule):
    args: tuple[Rule, ...]

    def evaluate(self, properties):
        return all(a.evaluate(properties) for a in self.args)

    def to_json(self):
        return {"op": "and", "args": [a.to_json() for a in self.args]}


@dataclass(frozen=True)
class Or(Rule):
    args: tuple[Rule, ...]

    def evaluate(self, properties):
        return any(a.evaluate(properties) for a in self.args)

    def to_json(self):
        return {"op": "or", "args": [a.to_json() for a in self.args]}


@dataclass(frozen=True)
class Not(Rule):
    arg: Rule

    def evaluate(self, properties):
        return not self.arg.evaluate(properties)

    def to_json(self):
        return {"op": "not", "arg": self.arg.to_json()}


def rule_from_json(doc: dict | None) -> Rule | None:
    if doc is None:
        return None
    op = doc.get("op")
    if op == "and":
        return And(tuple(rule_from_json(a) for a in doc["args"]))
    if op == "or":
        return Or(tuple(rule_from_json(a) for a in doc["args"]))
    if op == "not":
        return Not(rule_from_json(doc["arg"]))
    return Predicate(doc["key"], op, doc.get("value"))


@dataclass(frozen=True)
class OfferingSelectionRule:
    """Property constraints plus cardinality bounds for one ingredient."""

    rule: Rule | None = None
    min_count: int = 1
    max_count: int = 1

    def __post_init__(self):
        if not 0 <= self.min_count <= self.max_count:
            raise ValueError("need 0 <= min_count <= max_count")

    def to_json(self) -> dict:
        return {
            "rule": self.rule.to_json() if self.rule is not None else None,
            "cardinality": [self.min_count, self.max_count],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "OfferingSelectionRule":
        lo, hi = doc.get("cardinality", [1, 1])
        return cls(rule_from_json(doc.get("rule")), int(lo), int(hi))


def evaluate_osr(rule: Rule | None, offering: Offering) -> bool:
    """Evaluate a selection rule against an offering; no rule means no constraint."""
    if rule is None:
        return True
    return rule.evaluate(offering.properties)


# ---------------------------------------------------------------------------
# matching and instantiation

def match_offering(ingredient: Ingredient, offering: Offering, taxonomy: CategoryTaxonomy) -> bool:
    """Category subsumption plus a distinct same-type offering port per ingredient port."""
    if not taxonomy.contains(ingredient.category):
        raise TaxonomyError(f"unknown ingredient category {ingredient.category!r}")
    if not taxonomy.contains(offering.category):
        raise TaxonomyError(f"unknown offering category {offering.category!r}")
    if not taxonomy.is_a(offering.category, ingredient.category):
        return False
    return _covers(ingredient.inputs, offering.inputs) and _covers(
        ingredient.outputs, offering.outputs
    )


def _covers(required: tuple[Port, ...], available: tuple[Port, ...]) -> bool:
    need = Counter(p.data_type for p in required)
    have = Counter(p.data_type for p in available)
    return all(have[t] >= c for t, c in need.items())


def port_mapping(ingredient: Ingredient, offering: Offering) -> tuple[dict, dict]:
    """Deterministic ingredient->offering port maps (inputs, outputs).

    First fit in declaration order among same-type ports; callers must have
    checked :func:`match_offering` first.
    """

    def assign(required, available):
        used = set()
        mapping = {}
        for rp in required:
            for ap in available:
                if ap.name not in used and ap.data_type == rp.data_type:
                    mapping[rp.name] = ap.name
                    used.add(ap.name)
                    break
            else:
                raise RecipeError(
                    f"offering {offering.id!r} cannot carry port {rp.name!r} of {ingredient.id!r}"
                )
        return mapping

    return assign(ingredient.inputs, offering.inputs), assign(ingredient.outputs, offering.outputs)


@dataclass(frozen=True)
class RecipeRuntimeConfiguration:
    """One instantiation of a recipe: selection rules and current assignment."""

    id: str
    recipe_id: str
    osrs: Mapping[str, OfferingSelectionRule]
    detector_config: DetectorConfig = field(default_factory=DetectorConfig)
    assignment: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    status: str = "unsatisfied"

    def osr_for(self, ingredient_id: str) -> OfferingSelectionRule:
        return self.osrs.get(ingredient_id, OfferingSelectionRule())

    def assigned_offerings(self) -> set[str]:
        return {oid for ids in self.assignment.values() for oid in ids}

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "recipe": self.recipe_id,
            "osrs": {k: v.to_json() for k, v in sorted(self.osrs.items())},
            "detector": self.detector_config.to_json(),
            "assignment": {k: list(v) for k, v in sorted(self.assignment.items())},
            "status": self.status,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RecipeRuntimeConfiguration":
        return cls(
            doc["id"],
            doc["recipe"],
            {k: OfferingSelectionRule.from_json(v) for k, v in doc.get("osrs", {}).items()},
            DetectorConfig.from_json(doc.get("detector", {})),
        )


def instantiate_rrc(
    rrc: RecipeRuntimeConfiguration,
    recipe: Recipe,
    registry: Mapping[str, Offering],
    taxonomy: CategoryTaxonomy,
) -> RecipeRuntimeConfiguration:
    """Select offerings for every ingredient; deterministic by ascending id.

    Candidates must match the ingredient (category and ports) and satisfy
    its selection rule; the lowest ids win when candidates exceed the
    cardinality cap.  Status encodes the outcome: ``active`` when every
    ingredient reaches its minimum, ``unsatisfied`` otherwise.
    """
    assignment = {}
    satisfied = True
    for ing in recipe.ingredients:
        osr = rrc.osr_for(ing.id)
        candidates = [
            oid
            for oid in sorted(registry)
            if match_offering(ing, registry[oid], taxonomy)
            and evaluate_osr(osr.rule, registry[oid])
        ]
        chosen = tuple(candidates[: osr.max_count])
        assignment[ing.id] = chosen
        if len(chosen) < osr.min_count:
            satisfied = False
    return replace(rrc, assignment=assignment, status="active" if satisfied else "unsatisfied")


# ---------------------------------------------------------------------------
# monitoring topology

@dataclass(frozen=True)
class MonitoringLink:
    """monitor observes monitored with the given detector parameters."""

    monitor: str
    monitored: str
    config: DetectorConfig
    kind: str  # "flow" | "backlink" | "ring"


def _offering_edges(rrc: RecipeRuntimeConfiguration, recipe: Recipe) -> list[tuple[str, str]]:
    """Offering-level dataflow edges under the current assignment, in order, deduped."""
    edges: list[tuple[str, str]] = []
    seen = set()
    for ia in recipe.interactions:
        for a in rrc.assignment.get(ia.from_ingredient, ()):
            for b in rrc.assignment.get(ia.to_ingredient, ()):
                if a == b:
                    continue  # an offering serving both ends needs no self link
                if (a, b) not in seen:
                    seen.add((a, b))
                    edges.append((a, b))
    return edges


def maximal_chain_endpoints(edges: Iterable[tuple[str, str]]) -> list[tuple[str, str]]:
    """(initial, terminal) pairs of the maximal dataflow chains.

    Initial nodes have no incoming edge; each is paired with every terminal
    node (no outgoing edge) it can reach.  Branching dataflows therefore
    yield one chain per reachable terminal.
    """
    edges = list(edges)
    nodes = {n for e in edges for n in e}
    outgoing: dict[str, list[str]] = {n: [] for n in nodes}
    indeg = {n: 0 for n in nodes}
    for a, b in edges:
        outgoing[a].append(b)
        indeg[b] += 1
    chains = []
    for initial in sorted(n for n in nodes if indeg[n] == 0 and outgoing[n]):
        reached = set()
        queue = deque(outgoing[initial])
        while queue:
            node = queue.popleft()
            if node in reached:
                continue
            reached.add(node)
            queue.extend(outgoing[node])
        for terminal in sorted(n for n in reached if not outgoing[n]):
            chains.append((initial, terminal))
    return chains


def _rrc_links(rrc: RecipeRuntimeConfiguration, recipe: Recipe) -> list[MonitoringLink]:
    """Flow links (receiver monitors sender) plus one backlink per maximal chain."""
    edges = _offering_edges(rrc, recipe)
    links = [MonitoringLink(b, a, rrc.detector_config, "flow") for a, b in edges]
    for initial, terminal in maximal_chain_endpoints(edges):
        links.append(MonitoringLink(initial, terminal, rrc.detector_config, "backlink"))
    return links


def derive_monitoring_links(
    rrcs: Iterable[RecipeRuntimeConfiguration],
    recipes: Mapping[str, Recipe],
    registry: Mapping[str, Offering],
    default_config: DetectorConfig,
    failed: Iterable[str] = (),
) -> list[MonitoringLink]:
    """Full monitoring topology: per-RRC links plus the standby ring.

    Offerings not assigned in any active RRC (and not failed) are ordered
    by id and each monitors its successor cyclically, keeping spares
    observable.  A single spare forms no ring: self monitoring is useless.
    Ring links carry the controller's default detector parameters since no
    RRC owns them.
    """
    failed = set(failed)
    links: list[MonitoringLink] = []
    assigned: set[str] = set()
    for rrc in sorted(rrcs, key=lambda r: r.id):
        if rrc.status != "active":
            continue
        links.extend(_rrc_links(rrc, recipes[rrc.recipe_id]))
        assigned |= rrc.assigned_offerings()
    unused = sorted(set(registry) - assigned - failed)
    if len(unused) >= 2:
        for i, oid in enumerate(unused):
            links.append(
                MonitoringLink(oid, unused[(i + 1) % len(unused)], default_config, "ring")
            )
    return links


# ---------------------------------------------------------------------------
# interaction descriptors

@dataclass(frozen=True)
class PortBinding:
    port: str
    remote_offering: str
    remote_port: str

    def to_json(self) -> dict:
        return {"port": self.port, "remote_offering": self.remote_offering, "remote_port": self.remote_port}

    @classmethod
    def from_json(cls, doc: dict) -> "PortBinding":
        return cls(doc["port"], doc["remote_offering"], doc["remote_port"])


@dataclass
class InteractionDescriptor:
    """Everything one engine needs to run autonomously: routing plus monitoring.

    ``monitoring`` lists the peers this engine watches (with per-link
    detector parameters); ``heartbeat_targets`` lists the peers watching
    this engine, i.e. where its liveness pings must go.
    """

    offering_id: str
    input_bindings: list[PortBinding] = field(default_factory=list)
    output_targets: list[PortBinding] = field(default_factory=list)
    monitoring: list[tuple[str, DetectorConfig]] = field(default_factory=list)
    heartbeat_targets: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "offering": self.offering_id,
            "input_bindings": [b.to_json() for b in self.input_bindings],
            "output_targets": [b.to_json() for b in self.output_targets],
            "monitoring": [
                {"offering": oid, "config": cfg.to_json()} for oid, cfg in self.monitoring
            ],
            "heartbeat_targets": list(self.heartbeat_targets),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "InteractionDescriptor":
        return cls(
            doc["offering"],
            [PortBinding.from_json(b) for b in doc.get("input_bindings", ())],
            [PortBinding.from_json(b) for b in doc.get("output_targets", ())],
            [
                (m["offering"], DetectorConfig.from_json(m["config"]))
                for m in doc.get("monitoring", ())
            ],
            list(doc.get("heartbeat_targets", ())),
        )


def attach_monitoring(
    descriptors: Mapping[str, InteractionDescriptor], links: Iterable[MonitoringLink]
) -> None:
    """Fill monitoring entries and heartbeat targets from a link set, in place."""
    for link in links:
        if link.monitor in descriptors:
            entry = (link.monitored, link.config)
            if entry not in descriptors[link.monitor].monitoring:
                descriptors[link.monitor].monitoring.append(entry)
        if link.monitored in descriptors:
            targets = descriptors[link.monitored].heartbeat_targets
            if link.monitor not in targets:
                targets.append(link.monitor)


def generate_interaction_descriptors(
    rrc: RecipeRuntimeConfiguration,
    recipe: Recipe,
    registry: Mapping[str, Offering],
    monitoring_links: Iterable[MonitoringLink] | None = None,
) -> dict[str, InteractionDescriptor]:
    """One descriptor per assigned offering, expanding recipe interactions.

    Every offering replacing ingredient A gains an output target for every
    offering replacing B, per recipe interaction A -> B (and the mirrored
    input binding on B's side).  Monitoring entries come from
    ``monitoring_links`` when given (the controller passes the full
    topology) and are otherwise derived from this RRC alone.
    """
    if rrc.status != "active":
        raise StateError(f"RRC {rrc.id!r} is {rrc.status}, need active")
    descriptors: dict[str, InteractionDescriptor] = {}
    in_maps: dict[tuple[str, str], dict] = {}
    out_maps: dict[tuple[str, str], dict] = {}
    for ing in recipe.ingredients:
        for oid in rrc.assignment.get(ing.id, ()):
            descriptors.setdefault(oid, InteractionDescriptor(oid))
            imap, omap = port_mapping(ing, registry[oid])
            in_maps[(ing.id, oid)] = imap
            out_maps[(ing.id, oid)] = omap
    for ia in recipe.interactions:
        for a in rrc.assignment.get(ia.from_ingredient, ()):
            a_port = out_maps[(ia.from_ingredient, a)][ia.from_port]
            for b in rrc.assignment.get(ia.to_ingredient, ()):
                b_port = in_maps[(ia.to_ingredient, b)][ia.to_port]
                descriptors[a].output_targets.append(PortBinding(a_port, b, b_port))
                descriptors[b].input_bindings.append(PortBinding(b_port, a, a_port))
    links = _rrc_links(rrc, recipe) if monitoring_links is None else monitoring_links
    attach_monitoring(descriptors, links)
    return descriptors
