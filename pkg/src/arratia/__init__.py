"""Arratia flow with drift: splitting schemes, coalescence schemes and densities."""
from .densities import (DensityEstimate, KMKernel, QuadSpec, QuadratureError, estimate_scheme_density,
                        km_density, pair_density_merged, refinement_gap)
from .drift import DriftSpec
from .driver import PathDriver, TimeGrid, brownian_values
from .experiments import ExperimentConfig, ResultRecord, __version__, emit, run_experiment
from .flow import Ensemble, ParticleSystem, run, simulate, step
from .measures import (AtomicMeasure, FlowConfig, LawDistanceEstimate, SharedDrivers,
                       estimate_law_distance, pushforward_lebesgue, pushforward_uniform,
                       wasserstein)
from .schemes import CoalescenceScheme, IntervalPartition, count, enumerate_schemes, to_partition
from .splitting import SplitScheme, ode_flow, run_split_flow, simulate_split, solve_D, solve_S

__all__ = [
    "AtomicMeasure", "CoalescenceScheme", "DensityEstimate", "DriftSpec", "Ensemble",
    "ExperimentConfig", "FlowConfig", "IntervalPartition", "KMKernel", "LawDistanceEstimate",
    "ParticleSystem", "PathDriver", "QuadSpec", "QuadratureError", "ResultRecord", "SharedDrivers",
    "SplitScheme", "TimeGrid", "brownian_values", "count", "emit", "enumerate_schemes",
    "estimate_law_distance", "estimate_scheme_density", "km_density", "ode_flow",
    "pair_density_merged", "pushforward_lebesgue", "pushforward_uniform", "refinement_gap", "run",
    "run_experiment", "run_split_flow", "simulate", "simulate_split", "solve_D", "solve_S", "step",
    "to_partition", "wasserstein", "__version__",
]
