"""Receding-horizon execution of game and baseline planners on a noisy plant."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import alcore as alc
from . import baselines as bl
from . import game as gm
from . import newton as nt
from .dynamics import ModelKind, rollout, step
from .scenarios import Scenario

ALGAMES = "Algames"
PREDICT_THEN_PLAN = "PredictThenPlan"
MISMATCH_DELTA = 0.5


@dataclass
class MpcConfig:
    horizon_seconds: float = 3.0
    knots: int = 40
    sim_duration_seconds: Optional[float] = None  # defaults to 60 ticks
    noise: dict = field(default_factory=lambda: {"position": 0.01, "heading": 0.005, "velocity": 0.01})
    controller: str = ALGAMES
    warm_start: bool = True
    solver: nt.SolverOptions = field(default_factory=nt.SolverOptions)

    def __post_init__(self):
        if self.knots < 2 or not self.horizon_seconds > 0:
            raise ValueError("horizon needs a positive length and at least two knots")
        if self.controller not in (ALGAMES, PREDICT_THEN_PLAN):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.sim_duration_seconds is None:
            self.sim_duration_seconds = 60 * self.sim_dt
        ticks = self.sim_duration_seconds / self.sim_dt
        if ticks < 1 or abs(ticks - round(ticks)) > 1e-6:
            raise ValueError("simulation duration must be a positive multiple of sim_dt")

    @property
    def sim_dt(self) -> float:
        return self.horizon_seconds / (self.knots - 1)

    @property
    def ticks(self) -> int:
        return int(round(self.sim_duration_seconds / self.sim_dt))


@dataclass
class MpcLog:
    states: np.ndarray  # (ticks + 1, n) realized states
    controls: np.ndarray  # (ticks, m) executed controls
    status: list
    inner_iters: list
    residuals: list
    violations: list
    degraded: list
    fallback: list  # baseline braking fallback taken, per tick and player
    min_pair_distance: list
    min_boundary_clearance: list
    wall_times: list
    ranks: dict = field(default_factory=dict)

    @property
    def ticks(self) -> int:
        return len(self.controls)

    def deterministic_view(self) -> dict:
        """Everything except wall-clock times."""
        return {
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "status": list(self.status),
            "inner_iters": list(self.inner_iters),
            "residuals": list(self.residuals),
            "violations": list(self.violations),
            "degraded": list(self.degraded),
            "fallback": [list(f) for f in self.fallback],
            "min_pair_distance": list(self.min_pair_distance),
            "min_boundary_clearance": list(self.min_boundary_clearance),
            "ranks": dict(self.ranks),
        }


def mpc_problem(s: Scenario, cfg: MpcConfig, x0=None) -> gm.GameProblem:
    p = s.problem.replace(N=cfg.knots, dt=cfg.sim_dt)
    return p if x0 is None else p.replace(x0=np.asarray(x0, float))


def warm_start_shift(p: gm.GameProblem, prev: alc.PrimalDualPoint, new_x0, ticks_elapsed: int = 1) -> alc.PrimalDualPoint:
    """Shift controls and dynamics multipliers forward, repeat the last knot, re-roll X from new_x0."""
    t = int(ticks_elapsed)
    if t < 0:
        raise ValueError("ticks_elapsed must be nonnegative")

    def shift(a, axis=0):
        a = np.asarray(a, float)
        if t == 0:
            return a.copy()
        n = a.shape[axis]
        idx = np.minimum(np.arange(n) + t, n - 1)
        return np.take(a, idx, axis=axis)

    U = shift(prev.U)
    mu = shift(prev.mu, axis=1)
    X = rollout(p.model, np.asarray(new_x0, float), U, p.dt)
    return alc.PrimalDualPoint(X, U, mu)


def _noise_std(p: gm.GameProblem, noise: dict) -> np.ndarray:
    model = p.model
    sd = np.zeros(p.n_p)
    pos = np.array(model.position_indices)
    sd[pos] = noise.get("position", 0.0)
    if model.heading_index is not None:
        sd[model.heading_index] = noise.get("heading", 0.0)
        sd[model.velocity_index] = noise.get("velocity", 0.0)
    elif model.kind in (ModelKind.DOUBLE_INTEGRATOR_2D, ModelKind.DOUBLE_INTEGRATOR_3D):
        d = len(pos)
        sd[d : 2 * d] = noise.get("velocity", 0.0)
    return np.tile(sd, p.M)


def _monitor(p: gm.GameProblem, x) -> tuple:
    """(smallest pairwise centre distance, smallest boundary clearance minus radius)."""
    pos = np.asarray(x, float).reshape(p.M, p.n_p)[:, np.array(p.model.position_indices)]
    dmin = np.inf
    for i in range(p.M):
        for j in range(i + 1, p.M):
            dmin = min(dmin, float(np.linalg.norm(pos[i] - pos[j])))
    bmin = np.inf
    for a, b in p.constraints.boundaries:
        a = np.asarray(a)
        b = np.asarray(b)
        for q in pos[:, :2]:
            d = b - a
            s = np.clip((q - a) @ d / (d @ d), 0.0, 1.0)
            bmin = min(bmin, float(np.linalg.norm(q - (a + s * d))) - p.constraints.radius)
    return dmin, bmin


def rank_at_end(log: MpcLog, lane_axis, ego: int, n_p: Optional[int] = None) -> int:
    """Longitudinal place of the ego among all vehicles at the final tick (1 = front)."""
    x = log.states[-1]
    M = len(log.fallback[0]) if log.fallback else None
    n_p = n_p if n_p is not None else x.size // M
    pos = x.reshape(-1, n_p)[:, :2]
    s = pos @ np.asarray(lane_axis, float)
    return int(1 + np.sum(s > s[ego]))


def _algames_tick(p, x, prev, cfg):
    q = p.replace(x0=x)
    init = warm_start_shift(q, prev, x, 1) if (cfg.warm_start and prev is not None) else None
    pt, rep = nt.solve(q, init, cfg.solver)
    return pt, rep


def mpc_run(s: Scenario, cfg: MpcConfig, seed: int, x0=None) -> MpcLog:
    """Closed-loop simulation; deterministic given (scenario, cfg, seed, x0)."""
    rng = np.random.default_rng(seed)
    p = mpc_problem(s, cfg, x0)
    x = p.x0.copy()
    sd = _noise_std(p, cfg.noise)
    states = [x.copy()]
    controls = []
    log = MpcLog(np.zeros(0), np.zeros(0), [], [], [], [], [], [], [], [], [])
    prev = None  # last successful joint plan (Algames) or per-player plans (baseline)
    prev_plans = [None] * p.M
    since = 0
    for _ in range(cfg.ticks):
        t0 = time.perf_counter()
        fb = [False] * p.M
        if cfg.controller == ALGAMES:
            pt, rep = _algames_tick(p, x, prev if prev is None else prev, cfg)
            if rep.converged:
                u = pt.U[0].copy()
                prev = pt
                since = 0
                degraded = False
            else:
                degraded = True
                since += 1
                if prev is not None:
                    u = prev.U[min(since, p.K - 1)].copy()
                    prev = alc.PrimalDualPoint(prev.X, prev.U, prev.mu)
                else:
                    u = np.zeros(p.m)
            status, iters, res, viol = rep.status, rep.inner_iters_total, rep.final_residual_l1, rep.max_constraint_violation
        else:
            u = np.zeros(p.m)
            status, iters, res, viol = nt.CONVERGED, 0, 0.0, 0.0
            for nu in range(p.M):
                q = p.replace(x0=x)
                warm = None
                if cfg.warm_start and prev_plans[nu] is not None:
                    warm = warm_start_shift(q, prev_plans[nu], x, 1)
                plan = bl.predict_then_plan_step(q, x, bl.PredictThenPlanOptions(ego=nu, solver=cfg.solver, lane_axis=s.lane_axis), warm)
                u[nu * p.m_p : (nu + 1) * p.m_p] = plan.u
                fb[nu] = plan.fallback
                prev_plans[nu] = None if plan.fallback else plan.point
                if plan.report is not None:
                    iters += plan.report.inner_iters_total
                    res = max(res, plan.report.final_residual_l1)
                    viol = max(viol, plan.report.max_constraint_violation)
                    if not plan.report.converged:
                        status = plan.report.status
            degraded = False
        x = step(p.model, x, u, p.dt) + rng.normal(size=p.n) * sd
        log.wall_times.append(time.perf_counter() - t0)
        controls.append(u)
        states.append(x.copy())
        log.status.append(status)
        log.inner_iters.append(int(iters))
        log.residuals.append(float(res))
        log.violations.append(float(viol))
        log.degraded.append(bool(degraded))
        log.fallback.append(fb)
        d, b = _monitor(p, x)
        log.min_pair_distance.append(d)
        log.min_boundary_clearance.append(b)
    log.states = np.array(states)
    log.controls = np.array(controls)
    if s.ego is not None:
        log.ranks = {"ego": rank_at_end(log, s.lane_axis, s.ego, p.n_p)}
    return log


# ---------------------------------------------------------------------------
# equilibrium mismatch between two independent controllers


@dataclass
class MismatchTrace:
    flags: list
    distances: list
    states: np.ndarray


def yielding_guess(p: gm.GameProblem, leader: int, accel: float = 1.0) -> alc.PrimalDualPoint:
    """Initial guess where ``leader`` speeds up and every other player slows down."""
    if p.model.heading_index is None:
        raise ValueError("yielding guesses are defined for ground vehicles")
    U = np.zeros((p.K, p.m))
    for nu in range(p.M):
        U[:, nu * p.m_p + 1] = accel if nu == leader else -accel
    return alc.initial_point(p, U)


def divergent_guesses(p: gm.GameProblem, accel: float = 1.0) -> tuple:
    """Each of two players assumes the other one goes first."""
    return yielding_guess(p, 1, accel), yielding_guess(p, 0, accel)


def mismatch_experiment(s: Scenario, cfg: MpcConfig, divergent_inits, seed: int, x0=None,
                        delta: float = MISMATCH_DELTA, ticks: Optional[int] = None) -> MismatchTrace:
    """Two players, each solving the full game from its own guess and executing its own control."""
    rng = np.random.default_rng(seed)
    p = mpc_problem(s, cfg, x0)
    if p.M != 2:
        raise ValueError("the mismatch experiment is defined for two players")
    x = p.x0.copy()
    sd = _noise_std(p, cfg.noise)
    guesses = [g.copy() if g is not None else None for g in divergent_inits]
    pos = np.array(p.model.position_indices)
    flags, dists, states = [], [], [x.copy()]
    for _ in range(cfg.ticks if ticks is None else ticks):
        q = p.replace(x0=x)
        plans = []
        for i in range(2):
            init = None if guesses[i] is None else warm_start_shift(q, guesses[i], x, 0)
            pt, rep = nt.solve(q, init, cfg.solver)
            plans.append((pt, rep))
        d = 0.0
        for nu in range(2):
            cols = nu * p.n_p + pos
            d = max(d, float(np.abs(plans[0][0].X[:, cols] - plans[1][0].X[:, cols]).max()))
        flags.append(bool(d > delta))
        dists.append(d)
        u = np.concatenate([plans[i][0].U[0, i * p.m_p : (i + 1) * p.m_p] for i in range(2)])
        x = step(p.model, x, u, p.dt) + rng.normal(size=p.n) * sd
        states.append(x.copy())
        guesses = [warm_start_shift(q, plans[i][0], x, 1) for i in range(2)]
    return MismatchTrace(flags, dists, np.array(states))
