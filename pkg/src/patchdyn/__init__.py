"""Conservative patch dynamics (gap-tooth scheme with projective integration) for a
one-dimensional agent-based market model and its Fokker-Planck approximation."""

__version__ = "0.1.0"

from .errors import SimulationAbort
from .grid import MacroState, PatchGeometry, build_geometry, total_mass
from .fokker_planck import FIG4_PARAMS, FIG8_PARAMS, FvState, ModelParams, fv_step, run_to_time
from .lifting import QuadraticReconstruction, lift_interior, lift_left_boundary, lift_right_boundary
from .engine import (AgentBackend, FVBackend, PatchRunConfig, gap_tooth_step, projective_step,
                     run_patch_dynamics)
from .analysis import fit_loglog, l2_errors, run_order_study

__all__ = [
    "SimulationAbort", "MacroState", "PatchGeometry", "build_geometry", "total_mass",
    "FIG4_PARAMS", "FIG8_PARAMS", "FvState", "ModelParams", "fv_step", "run_to_time",
    "QuadraticReconstruction", "lift_interior", "lift_left_boundary", "lift_right_boundary",
    "AgentBackend", "FVBackend", "PatchRunConfig", "gap_tooth_step", "projective_step",
    "run_patch_dynamics", "fit_loglog", "l2_errors", "run_order_study",
]
