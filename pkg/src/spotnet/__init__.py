"""Coloured stochastic Petri nets on road networks: simulation, exact
analysis, and spatio-temporal property checking for a vehicular message
relay around a coverage dead spot."""

from .deadspot import (
    DeadspotParams,
    DeliveryRecord,
    MessageTracker,
    SatelliteSweepResult,
    build,
    delivery_metrics,
    message_records,
    params_from_json,
    params_to_json,
    road_network,
    run_deadspot_batch,
    satellite_sweep,
    simulate_deadspot,
)
from .errors import (
    ConfigError,
    DeadspotError,
    ExprError,
    FormulaError,
    NetError,
    ParseError,
    SimError,
    SpatialError,
    SpotnetError,
)
from .logic import (
    CheckResult,
    ProbQuery,
    eval_atomic,
    exact_bounded_unless,
    exact_bounded_until,
    exact_check,
    exact_space_bounded,
    formula_to_text,
    parse_formula,
    smc_check,
    wilson_interval,
)
from .net import (
    AtomDomain,
    Domain,
    DotDomain,
    InputArc,
    IntDomain,
    Marking,
    Net,
    OutputArc,
    Place,
    TransitionDef,
    TupleDomain,
    add_bound_place,
    net_from_json,
    net_to_json,
)
from .semantics import (
    Ctmc,
    ReachGraph,
    UnfoldResult,
    detect_conflicts,
    enabled_firings,
    fire,
    reachability,
    state_limit,
    to_ctmc,
    to_dot,
    unfold,
    unfolding_isomorphic,
    write_ctmc,
)
from .sim import (
    Engine,
    SweepSpec,
    Trace,
    TraceEvent,
    read_trace_bin,
    read_trace_csv,
    run_many,
    simulate,
    sweep,
    write_trace_bin,
    write_trace_csv,
)
from .spatial import RoadNetwork, bubbles, proximity_graph

__version__ = "0.1.0"

__all__ = [
    "CheckResult",
    "AtomDomain",
    "ConfigError",
    "Ctmc",
    "DeadspotError",
    "DeadspotParams",
    "DeliveryRecord",
    "Domain",
    "DotDomain",
    "Engine",
    "ExprError",
    "FormulaError",
    "InputArc",
    "IntDomain",
    "Marking",
    "MessageTracker",
    "Net",
    "NetError",
    "OutputArc",
    "ParseError",
    "Place",
    "ProbQuery",
    "ReachGraph",
    "RoadNetwork",
    "SatelliteSweepResult",
    "SimError",
    "SpatialError",
    "SpotnetError",
    "SweepSpec",
    "Trace",
    "TraceEvent",
    "TransitionDef",
    "TupleDomain",
    "UnfoldResult",
    "add_bound_place",
    "build",
    "bubbles",
    "delivery_metrics",
    "detect_conflicts",
    "enabled_firings",
    "eval_atomic",
    "exact_bounded_unless",
    "exact_bounded_until",
    "exact_check",
    "exact_space_bounded",
    "fire",
    "formula_to_text",
    "message_records",
    "net_from_json",
    "net_to_json",
    "params_from_json",
    "params_to_json",
    "parse_formula",
    "proximity_graph",
    "reachability",
    "read_trace_bin",
    "read_trace_csv",
    "road_network",
    "run_deadspot_batch",
    "run_many",
    "satellite_sweep",
    "simulate",
    "simulate_deadspot",
    "smc_check",
    "state_limit",
    "sweep",
    "to_ctmc",
    "to_dot",
    "unfold",
    "unfolding_isomorphic",
    "wilson_interval",
    "write_ctmc",
    "write_trace_bin",
    "write_trace_csv",
]
