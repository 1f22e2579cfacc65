"""Augmented Lagrangian solver for constrained open-loop dynamic games."""

from .dynamics import ModelKind, ModelSpec
from .game import ConstraintSet, GameProblem, PlayerObjective, quadratic_objective
from .newton import SolveReport, SolverOptions, solve

__all__ = [
    "ConstraintSet",
    "GameProblem",
    "ModelKind",
    "ModelSpec",
    "PlayerObjective",
    "SolveReport",
    "SolverOptions",
    "quadratic_objective",
    "solve",
]
