"""trackswitch - optimal policy switching for a hidden Markov chain seen through arrivals."""

from .beliefgrid import NodeFunction, SimplexLattice, build_lattice, interpolate
from .bellman import (
    ValueSurface,
    apply_first_jump_L,
    intervene,
    jump_expectation_S,
    noaction_exact,
    noaction_iterates,
    restricted_iterates,
    solve_finite,
    solve_infinite,
    stationary_iterates,
    value_noaction_U0,
)
from .filtering import (
    FlowCache,
    UnnormalizedBelief,
    filter_path,
    flow_drift,
    flow_fixed_point,
    flow_x,
    jump_coefficient,
    jump_update,
    propagate_m,
)
from .models import McEstimate, ModelFile, RunManifest, SolverConfig
from .problem import Belief, SwitchingModel, cost_C, cost_K, load_bundled, load_model, validate
from .simkit import (
    SamplePath,
    evaluate_strategy,
    filter_consistency_check,
    replay_path,
    simulate_system,
)
from .strategy import Controller, StrategyTable, boundary_curve, classify_regions, decide

__version__ = "0.1.0"

__all__ = [
    "Belief",
    "SwitchingModel",
    "ModelFile",
    "SolverConfig",
    "McEstimate",
    "RunManifest",
    "validate",
    "load_model",
    "load_bundled",
    "cost_C",
    "cost_K",
    "FlowCache",
    "UnnormalizedBelief",
    "propagate_m",
    "flow_x",
    "flow_drift",
    "jump_update",
    "jump_coefficient",
    "flow_fixed_point",
    "filter_path",
    "SimplexLattice",
    "NodeFunction",
    "build_lattice",
    "interpolate",
    "ValueSurface",
    "intervene",
    "jump_expectation_S",
    "value_noaction_U0",
    "noaction_exact",
    "noaction_iterates",
    "restricted_iterates",
    "stationary_iterates",
    "apply_first_jump_L",
    "solve_finite",
    "solve_infinite",
    "StrategyTable",
    "Controller",
    "classify_regions",
    "boundary_curve",
    "decide",
    "SamplePath",
    "simulate_system",
    "evaluate_strategy",
    "filter_consistency_check",
    "replay_path",
]
