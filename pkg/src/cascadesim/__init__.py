"""Dynamic cascading-failure simulation of power grids.

Trapezoidal-rule ground truth, large-step backward Euler with an
eigenanalysis-based predictor-corrector, relay models and island-aware
center-of-inertia framing.
"""

from cascadesim.case_io import (
    BranchRecord,
    BusRecord,
    CaseDefinition,
    MachineParams,
    PowerFlowSolution,
    load_builtin_case,
    parse_case,
    solve_power_flow,
    synthesize_dynamics,
)
from cascadesim.engine import (
    CascadeRun,
    RunConfig,
    run_bem_pc,
    run_bem_plain,
    run_rk4_partitioned,
    run_tm_ground_truth,
)
from cascadesim.metrics import end_state_compare, monte_carlo, path_agreement

__version__ = "0.1.0"

__all__ = [
    "BranchRecord",
    "BusRecord",
    "CascadeRun",
    "CaseDefinition",
    "MachineParams",
    "PowerFlowSolution",
    "RunConfig",
    "end_state_compare",
    "load_builtin_case",
    "monte_carlo",
    "parse_case",
    "path_agreement",
    "run_bem_pc",
    "run_bem_plain",
    "run_rk4_partitioned",
    "run_tm_ground_truth",
    "solve_power_flow",
    "synthesize_dynamics",
]
