"""Sparse iterative polynomial chaos for AC power flow uncertainty quantification."""

from .netmodel import CaseError, Network, load_case, parse_case
from .pce_basis import PceBasis, build_index_set, make_basis
from .spice_solver import PceCoefficients, SpiceConfig, solve_full_pce, spice
from .stochastic import UncertaintyModel, make_model, partition_areas, sample
from .uq_eval import build_report, compare_reports, evaluate_pce, run_monte_carlo

__all__ = [
    "CaseError", "Network", "load_case", "parse_case", "PceBasis", "build_index_set",
    "make_basis", "PceCoefficients", "SpiceConfig", "solve_full_pce", "spice",
    "UncertaintyModel", "make_model", "partition_areas", "sample", "build_report",
    "compare_reports", "evaluate_pce", "run_monte_carlo",
]
__version__ = "0.1.0"
