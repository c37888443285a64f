"""Ergodic control of regime-switching diffusions: PDE and BSDE solvers."""

from .core_model import ControlProblem, make_ou_problem, validate_problem
from .grid import Grid
from .pde_solver import (
    extract_feedback,
    solve_discounted,
    solve_ergodic_vanishing_discount,
    solve_parabolic,
    solve_penalized,
)

__version__ = "0.1.0"

__all__ = [
    "ControlProblem",
    "Grid",
    "extract_feedback",
    "make_ou_problem",
    "solve_discounted",
    "solve_ergodic_vanishing_discount",
    "solve_parabolic",
    "solve_penalized",
    "validate_problem",
]
