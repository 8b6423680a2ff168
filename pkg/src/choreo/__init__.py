"""Failure detection and self-healing service choreographies for the IoT.

The package splits into five layers:

* :mod:`choreo.detectors`    - accrual failure detectors (constant-memory
  Chebyshev, normal-CDF, and empirical-CDF variants) behind one contract.
* :mod:`choreo.simnet`       - deterministic heartbeat traces, burst packet
  loss, and a discrete-event simulator.
* :mod:`choreo.qos`          - detection-time / mistake-rate / query-accuracy
  metrics and threshold sweeps producing tradeoff curves.
* :mod:`choreo.choreography` - recipes, offerings, selection rules, and
  monitoring-topology derivation.
* :mod:`choreo.runtime`      - controller and engine state machines with
  automatic failover, driven by the simulator.
"""

from .detectors import (
    AdaptiveDetector,
    DetectorConfig,
    EstimatorSnapshot,
    HeartbeatSample,
    IotaDetector,
    PacketLossState,
    PhiAccrualDetector,
    RateEstimator,
    ResourceForecast,
    deserialize,
    detector_from_json,
    make_detector,
    serialize,
)
from .errors import (
    ChoreoError,
    ConfigError,
    OrderingError,
    RecipeError,
    RegistrationError,
    RoutingError,
    SchedulingError,
    StateError,
    TaxonomyError,
    UnavailableError,
)
from .simnet import (
    BurstLossFilter,
    BurstLossModel,
    HeartbeatSender,
    MonitorNode,
    SimEvent,
    Simulator,
    TracePoint,
    TraceSpec,
    apply_burst_loss,
    derive_seed,
    generate_heartbeat_trace,
    splitmix64,
    to_millis,
    write_event_log,
)
from .qos import (
    DetectorSweep,
    QosReport,
    SweepSpec,
    compute_detection_time,
    compute_mistake_rate,
    compute_query_accuracy,
    delivered_heartbeats,
    sweep_thresholds,
    write_curve_csvs,
)
from .choreography import (
    And,
    CategoryTaxonomy,
    Ingredient,
    Interaction,
    InteractionDescriptor,
    MonitoringLink,
    Not,
    Offering,
    OfferingSelectionRule,
    Or,
    Port,
    PortBinding,
    Predicate,
    Recipe,
    RecipeRuntimeConfiguration,
    derive_monitoring_links,
    evaluate_osr,
    generate_interaction_descriptors,
    instantiate_rrc,
    match_offering,
    rule_from_json,
)
from .runtime import (
    AssertionResult,
    Controller,
    Engine,
    ScenarioResult,
    ScenarioSpec,
    run_scenario,
)

__version__ = "0.1.0"
