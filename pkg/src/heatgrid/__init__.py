"""Planning toolkit for integrated district-heating and electric-power systems."""

__version__ = "0.1.0"

from .network import NetworkModel, load_network, derive_adjacency, serialize
from .formulation import (
    ProblemInstance,
    Variant,
    apply_mccormick,
    build,
    objective_value,
)
from .qpsolver import QpProblem, QpSolution, SolveStatus, SolverConfig, solve_qp, extract_duals
from .globalsolve import BnbConfig, GlobalSolution, solve_global
from .tightening import TighteningConfig, TighteningResult, tighten, violation_report, repair_fixed_flow
from .analysis import compare_variants, exact_heat_loss_audit, recover_temperatures

__all__ = [
    "NetworkModel", "load_network", "derive_adjacency", "serialize",
    "ProblemInstance", "Variant", "apply_mccormick", "build", "objective_value",
    "QpProblem", "QpSolution", "SolveStatus", "SolverConfig", "solve_qp",
    "extract_duals",
    "BnbConfig", "GlobalSolution", "solve_global",
    "TighteningConfig", "TighteningResult", "tighten", "violation_report",
    "repair_fixed_flow",
    "compare_variants", "exact_heat_loss_audit", "recover_temperatures",
]
