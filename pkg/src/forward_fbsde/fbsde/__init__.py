"""Primal and dual FBSDE solvers for the complete-market, exponential and decoupling-field regimes."""

from .complete import DeterministicExpProcess, solve_complete_market
from .decoupling import classify, realize_decoupling, solve_decoupling_field
from .exponential import exponential_handle, realize_exponential, solve_exponential_primal
from .transforms import dual_from_primal, primal_from_dual
from .types import ClippingWarning, DualSolution, EndowmentSpec, PathView, PrimalSolution
from .verify import (
    CheckResult,
    Report,
    collapse_check,
    marginal_martingale_statistic,
    perturbation_directions,
    verify_maturity_independence,
    verify_optimality,
    verify_self_generation,
    xz_martingale_statistic,
)

__all__ = [
    "CheckResult", "ClippingWarning", "DeterministicExpProcess", "DualSolution", "EndowmentSpec", "PathView",
    "PrimalSolution", "Report", "classify", "collapse_check", "dual_from_primal", "exponential_handle",
    "marginal_martingale_statistic", "perturbation_directions", "primal_from_dual", "realize_decoupling", "realize_exponential",
    "solve_complete_market", "solve_decoupling_field", "solve_exponential_primal", "verify_maturity_independence",
    "verify_optimality", "verify_self_generation", "xz_martingale_statistic",
]
