"""Laser-threshold magnetometry with NV diamond in an external-cavity diode laser."""

__version__ = "0.1.0"

from .cavity import CavityGeometry, effective_reflectivity, total_cavity_loss
from .config_io import Scenario, emit_results, load_scenario
from .laser import DiodeParams, solve_steady_state, threshold_current
from .nv_levels import NvSystem, PumpCondition, absorption_contrast, contrast_map, diamond_response
from .optimize import OptimizationProblem, optimize, sweep
from .sensing import (
    Chain,
    NoiseModel,
    OdmrConfig,
    chain_sensitivity,
    evaluate_chain,
    feasibility_map,
    sensitivity,
    threshold_contrast_to_spectrum,
)

__all__ = [
    "CavityGeometry",
    "Chain",
    "DiodeParams",
    "NoiseModel",
    "NvSystem",
    "OdmrConfig",
    "OptimizationProblem",
    "PumpCondition",
    "Scenario",
    "absorption_contrast",
    "chain_sensitivity",
    "contrast_map",
    "diamond_response",
    "effective_reflectivity",
    "emit_results",
    "evaluate_chain",
    "feasibility_map",
    "load_scenario",
    "optimize",
    "sensitivity",
    "solve_steady_state",
    "sweep",
    "threshold_contrast_to_spectrum",
    "threshold_current",
    "total_cavity_loss",
]
