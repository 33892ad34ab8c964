"""Pollution-aware predictive control for sewer networks.

The package splits into:

- ``model``       network/scenario description and validation
- ``kinetics``    reaction-rate laws and their convex relaxations
- ``discretize``  implicit multistep stencils used by the trajectory program
- ``simulate``    nonlinear ground-truth simulator and plant-state estimator
- ``socp``        trajectory optimization program builders
- ``solver``      conic-program container and solver adapters
- ``mpc``         receding-horizon loop and controller comparison
- ``metrics``     post-run performance summaries
- ``cli``         command-line entry points
"""

__version__ = "0.1.0"

from .discretize import AMScheme, am_coefficients, delayed_index, stencil_residual
from .kinetics import (
    ChordRow,
    ConeRow,
    Contois,
    FirstOrderDecay,
    MonodFixedBiomass,
    exactness_gap,
    rate_eval,
    rate_vector,
    soc_rows,
    underestimator_row,
)
from .metrics import MetricsReport, compute_metrics, release_by_species
from .model import (
    Scenario,
    ScenarioError,
    ScenarioParseError,
    ScenarioValidationError,
    Timing,
    Weights,
    bundled_path,
    load_scenario,
    save_scenario,
    scenario_from_dict,
    validate_scenario,
)
from .mpc import ClosedLoopResult, ComparisonResult, compare_controllers, run_closed_loop
from .simulate import ControlSchedule, Observation, TrajectoryLog, observe, run
from .socp import build_traj_f, build_traj_fc
from .solver import ConicProgram, SolverResult, default_adapter

__all__ = [
    "__version__",
    "AMScheme",
    "am_coefficients",
    "delayed_index",
    "stencil_residual",
    "ChordRow",
    "ConeRow",
    "Contois",
    "FirstOrderDecay",
    "MonodFixedBiomass",
    "exactness_gap",
    "rate_eval",
    "rate_vector",
    "soc_rows",
    "underestimator_row",
    "MetricsReport",
    "compute_metrics",
    "release_by_species",
    "Scenario",
    "ScenarioError",
    "ScenarioParseError",
    "ScenarioValidationError",
    "Timing",
    "Weights",
    "bundled_path",
    "load_scenario",
    "save_scenario",
    "scenario_from_dict",
    "validate_scenario",
    "ClosedLoopResult",
    "ComparisonResult",
    "compare_controllers",
    "run_closed_loop",
    "ControlSchedule",
    "Observation",
    "TrajectoryLog",
    "observe",
    "run",
    "build_traj_f",
    "build_traj_fc",
    "ConicProgram",
    "SolverResult",
    "default_adapter",
]
