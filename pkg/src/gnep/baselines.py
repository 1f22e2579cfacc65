"""Comparison solvers: best response, iterative best response, a fixed-penalty solver and
the predict-then-plan planner. All of them run on the Newton core of :mod:`newton`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import alcore as alc
from . import game as gm
from . import newton as nt
from .dynamics import ModelKind, rollout

CONSTANT_VELOCITY_STRAIGHT = "ConstantVelocityStraight"


@dataclass
class PenaltyOptions:
    rho_fixed: float = 1.0
    solver: nt.SolverOptions = field(default_factory=nt.SolverOptions)

    def __post_init__(self):
        if not self.rho_fixed > 0:
            raise ValueError("rho_fixed must be positive")


@dataclass
class PredictThenPlanOptions:
    ego: int
    prediction: str = CONSTANT_VELOCITY_STRAIGHT
    solver: nt.SolverOptions = field(default_factory=nt.SolverOptions)
    # braking fallback on the acceleration channel; None uses the problem's lower bound
    brake: Optional[float] = None
    # when set, others are extrapolated along this road direction instead of their heading
    lane_axis: Optional[tuple] = None

    def __post_init__(self):
        if self.prediction != CONSTANT_VELOCITY_STRAIGHT:
            raise ValueError(f"unknown prediction model {self.prediction!r}")
        if self.ego < 0:
            raise ValueError("ego index must be nonnegative")


def _player_cols(p: gm.GameProblem, nu: int) -> slice:
    return slice(nu * p.m_p, (nu + 1) * p.m_p)


def best_response(p: gm.GameProblem, nu: int, fixed_others, opts: Optional[nt.SolverOptions] = None,
                  init: Optional[alc.PrimalDualPoint] = None, al: Optional[alc.AlState] = None):
    """Player nu's optimal response with every other player's controls frozen.

    Returns the full primal-dual point (frozen controls filled in) and the report.
    """
    opts = nt.SolverOptions() if opts is None else opts
    U_fixed = np.array(fixed_others, dtype=float)
    if U_fixed.shape != (p.K, p.m):
        raise ValueError(f"fixed controls must have shape {(p.K, p.m)}")
    if not np.all(np.isfinite(np.delete(U_fixed, np.arange(p.m)[_player_cols(p, nu)], axis=1))):
        raise ValueError("others' controls must be complete")
    if init is None:
        U0 = U_fixed.copy()
        if not np.all(np.isfinite(U0[:, _player_cols(p, nu)])):
            U0[:, _player_cols(p, nu)] = 0.0
        init = alc.initial_point(p, U0)
    lay = alc.Layout(p, active=[nu], U_fixed=U_fixed)
    return nt.solve_layout(lay, init, opts, al)


def single_player_solve(p: gm.GameProblem, nu: int, fixed_others, opts: Optional[nt.SolverOptions] = None,
                        init: Optional[alc.PrimalDualPoint] = None):
    """(U^nu, X, report) of player nu's best response to frozen controls of the others."""
    pt, rep = best_response(p, nu, fixed_others, opts, init)
    return pt.U[:, _player_cols(p, nu)].copy(), pt.X.copy(), rep


def best_response_gap(p: gm.GameProblem, point: alc.PrimalDualPoint, nu: int,
                      opts: Optional[nt.SolverOptions] = None) -> tuple:
    """(cost at point, best-response cost, best-response report) for player nu.

    The response is warm-started from the point's trajectory with fresh multipliers.
    """
    J0 = gm.player_cost(p, nu, point.X, point.U)
    init = alc.PrimalDualPoint(point.X.copy(), point.U.copy(), np.zeros_like(point.mu))
    br, rep = best_response(p, nu, point.U, opts, init)
    return J0, gm.player_cost(p, nu, br.X, br.U), rep


# ---------------------------------------------------------------------------
# iterative best response


@dataclass
class IbrReport:
    converged: bool
    rounds: int
    deltas: list  # max control change per round
    residuals: list  # full-game ||G||_1 after every single-player solve
    solves: list  # cumulative linear solves matching ``residuals``
    linear_solves: int = 0


def game_residual(p: gm.GameProblem, point: alc.PrimalDualPoint, al: Optional[alc.AlState] = None) -> float:
    """||G||_1 of the full game at a point (zero multipliers and unit penalties by default)."""
    lay = alc.Layout(p)
    al = alc.AlState.initial(p.constraint_meta.size) if al is None else al
    return float(np.abs(alc.evaluate(lay, lay.pack(point), al).G).sum())


def ibr_solve(p: gm.GameProblem, opts: Optional[nt.SolverOptions] = None, max_rounds: int = 20,
              tol: float = 1e-4, order: Optional[Sequence[int]] = None,
              init: Optional[alc.PrimalDualPoint] = None):
    """Round-robin best responses until the largest control change drops below ``tol``."""
    if p.M < 2:
        raise ValueError("iterative best response needs at least two players")
    opts = nt.SolverOptions() if opts is None else opts
    order = list(range(p.M)) if order is None else list(order)
    pt = alc.initial_point(p) if init is None else init.copy()
    deltas, residuals, solves = [], [], []
    total = 0
    converged = False
    rounds = 0
    last_al = {}
    for rounds in range(1, max_rounds + 1):
        U_prev = pt.U.copy()
        for nu in order:
            br, rep = best_response(p, nu, pt.U, opts, pt)
            total += rep.linear_solves
            mu = pt.mu.copy()
            mu[nu] = br.mu[nu]
            pt = alc.PrimalDualPoint(br.X.copy(), br.U.copy(), mu)
            last_al[nu] = rep.al
            residuals.append(game_residual(p, pt))
            solves.append(total)
        delta = float(np.abs(pt.U - U_prev).max())
        deltas.append(delta)
        if delta < tol:
            converged = True
            break
    return pt, IbrReport(converged, rounds, deltas, residuals, solves, total)


# ---------------------------------------------------------------------------
# fixed quadratic penalty


def penalty_solve(p: gm.GameProblem, popts: Optional[PenaltyOptions] = None,
                  init: Optional[alc.PrimalDualPoint] = None):
    """Newton on the penalized game: multipliers held at zero, a single fixed penalty.

    With zero multipliers the activation reduces to "0 if C < 0", so no penalty weight is
    ever negative. There is no dual ascent and no schedule.
    """
    popts = PenaltyOptions() if popts is None else popts
    opts = popts.solver
    init = alc.initial_point(p) if init is None else init
    lay = alc.Layout(p)
    al = alc.AlState.initial(p.constraint_meta.size, popts.rho_fixed, opts.gamma_pen)
    y, ev, inner = nt.inner_solve(lay, lay.pack(init), al, opts)
    res = float(np.abs(ev.G).sum())
    viol = nt._violation(lay, ev.C)
    if res <= opts.tol_residual and viol <= opts.tol_constraint:
        status = nt.CONVERGED
    elif inner.status == nt.LINE_SEARCH_STALL:
        status = nt.LINE_SEARCH_STALL
    else:
        status = nt.MAX_ITERS
    dual = [{"C": ev.C.copy(), "rho": al.rho.copy(), "lam": al.lam.copy(), "final": True}]
    rep = nt.SolveReport(status, 1, inner.iters, res, viol, list(inner.trace), dual, inner.linear_solves, al)
    return lay.unpack(y, init), rep


# ---------------------------------------------------------------------------
# predict-then-plan


@dataclass
class PlanResult:
    u: np.ndarray  # ego control to apply
    point: alc.PrimalDualPoint  # ego plan with predicted others
    report: Optional[nt.SolveReport]
    fallback: bool


def predicted_controls(p: gm.GameProblem) -> np.ndarray:
    """Controls that propagate every player straight at constant speed (all zero here)."""
    if p.model.kind == ModelKind.QUADROTOR:
        raise ValueError("constant-velocity prediction is defined for ground vehicles and integrators")
    return np.zeros((p.K, p.m))


def braking_control(p: gm.GameProblem, ego: int, x, brake: Optional[float] = None) -> np.ndarray:
    """Straight-line maximal deceleration for the ego."""
    u = np.zeros(p.m_p)
    model = p.model
    if model.heading_index is not None:
        if brake is None:
            cb = p.constraints.control_bounds
            brake = float(cb[ego][0][1]) if cb is not None else -6.0
        xe = np.asarray(x, float)[ego * p.n_p : (ego + 1) * p.n_p]
        # stop decelerating once at rest
        v = xe[model.velocity_index]
        u[1] = max(brake, -v / p.dt) if v > 0 else 0.0
    return u


def _prediction_state(p: gm.GameProblem, x, opts: PredictThenPlanOptions) -> np.ndarray:
    """Joint state whose zero-control rollout gives the predictions (ego state untouched)."""
    x = np.array(x, dtype=float)
    h = p.model.heading_index
    if opts.lane_axis is None or h is None:
        return x
    theta = float(np.arctan2(opts.lane_axis[1], opts.lane_axis[0]))
    for nu in range(p.M):
        if nu != opts.ego:
            x[nu * p.n_p + h] = theta
    return x


def predict_then_plan_step(p: gm.GameProblem, x, opts: PredictThenPlanOptions,
                           warm: Optional[alc.PrimalDualPoint] = None) -> PlanResult:
    """One tick of the non-game planner: others are immutable constant-velocity obstacles."""
    if not opts.ego < p.M:
        raise ValueError("ego index out of range")
    q = p.replace(x0=_prediction_state(p, x, opts))
    U = predicted_controls(q)
    if warm is not None:
        U[:, _player_cols(q, opts.ego)] = warm.U[:, _player_cols(q, opts.ego)]
    init = alc.initial_point(q, U)
    if warm is not None:
        init.mu[opts.ego] = warm.mu[opts.ego]
    pt, rep = best_response(q, opts.ego, U, opts.solver, init)
    if rep.converged:
        return PlanResult(pt.U[0, _player_cols(q, opts.ego)].copy(), pt, rep, False)
    u = braking_control(q, opts.ego, x, opts.brake)
    return PlanResult(u, pt, rep, True)
