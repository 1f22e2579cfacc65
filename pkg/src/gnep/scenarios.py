"""Experiment setups: road geometry, nominal states, goals and initial-state sampling.

All geometry is declared here (SI units). Roads run along +x; lanes are 3.7 m wide and
every vehicle is a disc of radius 1 m.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import game as gm
from .dynamics import ModelSpec, ModelKind

LANE_WIDTH = 3.7
RADIUS = 1.0
HIGHWAY_SPEED = 10.0
RAMP_SPEED = 5.0
PEDESTRIAN_SPEED = 1.2
STRICT_FEASIBILITY = 1e-6

# solver Monte Carlo: +-1 m longitudinal, +-3 % speed, +-2.5 deg heading
SOLVER_MC_RANGES = {"longitudinal": 1.0, "lateral": 0.0, "heading": np.deg2rad(2.5), "speed_frac": 0.03}
# MPC Monte Carlo: +-2.5 m longitudinal, +-0.25 m lateral, +-3 deg heading
MPC_MC_RANGES = {"longitudinal": 2.5, "lateral": 0.25, "heading": np.deg2rad(3.0), "speed_frac": 0.0}


class SamplingExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    problem: gm.GameProblem
    lane_axis: tuple = (1.0, 0.0)
    sampling: dict = field(default_factory=lambda: dict(SOLVER_MC_RANGES))
    ego: Optional[int] = None
    info: dict = field(default_factory=dict)

    @property
    def x0(self) -> np.ndarray:
        return self.problem.x0

    def with_x0(self, x0) -> "Scenario":
        from dataclasses import replace

        return replace(self, problem=self.problem.replace(x0=np.asarray(x0, float)))

    def to_config(self) -> dict:
        """Plain-data description of the scenario, including every geometry constant."""
        p = self.problem
        cs = p.constraints
        return {
            "name": self.name,
            "model": p.model.kind.value,
            "model_params": dict(p.model.params),
            "players": p.M,
            "knots": p.N,
            "dt": p.dt,
            "x0": p.x0.tolist(),
            "lane_axis": list(self.lane_axis),
            "ego": self.ego,
            "radius": cs.radius,
            "boundaries": [[list(a), list(b)] for a, b in cs.boundaries],
            "control_bounds": None
            if cs.control_bounds is None
            else [[lo.tolist(), hi.tolist()] for lo, hi in cs.control_bounds],
            "sampling": {k: float(v) for k, v in self.sampling.items()},
            "goals": [ob.xf.tolist() for ob in p.objectives],
            "info": self.info,
        }


# ---------------------------------------------------------------------------
# shared pieces


def _unicycle_objectives(M, goals, q, r, qf, prox_weight=0.0, prox_radius=0.0, sign=gm.REPULSIVE):
    model = ModelSpec(ModelKind.UNICYCLE)
    return model, [
        gm.quadratic_objective(model, M, i, goals[i], q, r, qf, prox_weight, prox_radius, sign) for i in range(M)
    ]


def _knots(horizon: float, N: int) -> float:
    return horizon / (N - 1)


def ramp_boundaries(gore_x=5.0, taper_start=20.0, taper_end=45.0, x_min=-60.0, x_max=160.0, lanes=2):
    """Highway of ``lanes`` lanes (0 <= y <= lanes * w) with a parallel on-ramp lane below it.

    The ramp is separated from the highway by a barrier up to ``gore_x`` and its outer
    edge tapers into the highway edge between ``taper_start`` and ``taper_end``.
    """
    w = LANE_WIDTH
    return (
        ((x_min, lanes * w), (x_max, lanes * w)),  # highway outer edge
        ((x_min, 0.0), (gore_x, 0.0)),  # barrier between ramp and highway
        ((x_min, -w), (taper_start, -w)),  # ramp outer edge
        ((taper_start, -w), (taper_end, 0.0)),  # taper
        ((taper_end, 0.0), (x_max, 0.0)),  # highway inner edge after the merge
    )


def _lane_y(lane: str) -> float:
    return {"ramp": -0.5 * LANE_WIDTH, "right": 0.5 * LANE_WIDTH, "left": 1.5 * LANE_WIDTH}[lane]


_Q_MERGE = (0.02, 0.5, 1.0, 0.5)
_QF_MERGE = (0.5, 5.0, 5.0, 2.0)
_R = (1.0, 0.2)
_U_BOUNDS = ((-1.5, -6.0), (1.5, 4.0))


def ramp_merging(M: int = 3, horizon: float = 5.0, N: int = 41, constrained: bool = True,
                 prox_weight: float = 0.0, prox_radius: float = 0.0, control_bounds: bool = False) -> Scenario:
    """Highway cars in the right lane and one car on the ramp that merges between them.

    Player order: highway cars front to back, then the ramp car (last player).
    ``constrained=False`` drops collision and boundary rows (use a proximity cost instead).
    """
    if M not in (2, 3, 4):
        raise ValueError("ramp merging is defined for 2 to 4 players")
    T = horizon
    v = HIGHWAY_SPEED
    yr = _lane_y("right")
    hw = [(6.0, yr), (-8.0, yr), (-22.0, yr)][: M - 1]
    ramp = (-1.0, _lane_y("ramp"))
    x0 = []
    for x, y in hw:
        x0 += [x, y, 0.0, v]
    x0 += [ramp[0], ramp[1], 0.0, RAMP_SPEED]
    # merge slot: between the first two highway cars (behind the only one when M == 2)
    goals = [[x + v * T, yr, 0.0, v] for x, y in hw]
    slot = 0.5 * (hw[0][0] + hw[1][0]) if M > 2 else hw[0][0] - 12.0
    goals.append([slot + v * T, yr, 0.0, v])
    model, obs = _unicycle_objectives(M, goals, _Q_MERGE, _R, _QF_MERGE, prox_weight, prox_radius)
    cb = tuple(_U_BOUNDS for _ in range(M)) if control_bounds else None
    cs = gm.ConstraintSet(
        radius=RADIUS,
        boundaries=ramp_boundaries() if constrained else (),
        control_bounds=cb,
        collisions=constrained,
    )
    p = gm.GameProblem(model, M, N, _knots(T, N), np.array(x0), obs, cs)
    return Scenario(f"ramp_merging_{M}", p, ego=M - 1, info={"lane_width": LANE_WIDTH, "horizon": T})


def intersection(M: int = 3, horizon: float = 5.0, N: int = 41) -> Scenario:
    """Two cars crossing an intersection in opposite directions, a pedestrian when M >= 3,
    and a fourth car heading north when M == 4."""
    if M not in (2, 3, 4):
        raise ValueError("intersection is defined for 2 to 4 players")
    w = LANE_WIDTH
    T = horizon
    v = 8.0
    L = 60.0
    x0 = [-25.0, -0.5 * w, 0.0, v, 25.0, 0.5 * w, np.pi, v]
    goals = [[-25.0 + v * T, -0.5 * w, 0.0, v], [25.0 - v * T, 0.5 * w, np.pi, v]]
    if M >= 3:
        # crosswalk just east of the junction
        x0 += [6.0, -w + 1.1, np.pi / 2, PEDESTRIAN_SPEED]
        goals.append([6.0, w - 1.2, np.pi / 2, 0.0])
    if M == 4:
        x0 += [0.5 * w, -35.0, np.pi / 2, v]
        goals.append([0.5 * w, -35.0 + v * T, np.pi / 2, v])
    bounds = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            corner = (sx * w, sy * w)
            bounds.append((corner, (sx * L, sy * w)))
            bounds.append((corner, (sx * w, sy * L)))
    model, obs = _unicycle_objectives(M, goals, (0.05, 0.5, 1.0, 0.5), _R, (1.0, 5.0, 5.0, 2.0))
    cs = gm.ConstraintSet(radius=RADIUS, boundaries=tuple(bounds))
    p = gm.GameProblem(model, M, N, _knots(T, N), np.array(x0, float), obs, cs)
    return Scenario(f"intersection_{M}", p, info={"lane_width": w, "horizon": T})


# lane keeping at cruise speed with no longitudinal goal
_Q_LANE = (0.0, 0.3, 1.0, 0.3)
_QF_LANE = (0.0, 3.0, 3.0, 1.0)


def highway_merge_crowded(horizon: float = 3.0, N: int = 40, gap: float = 2.6, gore_x: float = 5.0,
                          taper=(25.0, 50.0)) -> Scenario:
    """Three cars in the right lane and an ego car on the ramp (player 3).

    Objectives track the lane centre, a cruise speed and a zero heading; no longitudinal goal,
    so the merge order is decided by the interaction. Controls are bounded.
    """
    w = LANE_WIDTH
    yr = _lane_y("right")
    v = HIGHWAY_SPEED
    x_lead = 8.0
    xs = [x_lead, x_lead - gap, x_lead - 2 * gap]
    x0 = []
    for x in xs:
        x0 += [x, yr, 0.0, v]
    ego_x = xs[1] - 0.5 * gap
    x0 += [ego_x, _lane_y("ramp"), 0.0, v]
    goals = [[0.0, yr, 0.0, v]] * 4
    model, obs = _unicycle_objectives(4, goals, _Q_LANE, _R, _QF_LANE)
    cs = gm.ConstraintSet(
        radius=RADIUS,
        boundaries=ramp_boundaries(gore_x=gore_x, taper_start=taper[0], taper_end=taper[1], lanes=1),
        control_bounds=tuple(_U_BOUNDS for _ in range(4)),
    )
    p = gm.GameProblem(model, 4, N, _knots(horizon, N), np.array(x0), obs, cs)
    return Scenario(
        "highway_merge_crowded", p, sampling=dict(MPC_MC_RANGES), ego=3,
        info={"lane_width": w, "horizon": horizon, "gap": gap},
    )


def drone_doorway(M: int = 2, model: ModelSpec | str = "double_integrator_2d", horizon: float = 5.0,
                  N: int = 41, gap_width: float = 6.0) -> Scenario:
    """Agents cross a wall at x = 0 through a single gap, starting on the left."""
    if not 2 <= M <= 8:
        raise ValueError("drone doorway is defined for 2 to 8 players")
    model = model if isinstance(model, ModelSpec) else ModelSpec(ModelKind(model))
    n_p = model.state_dim
    wall = 15.0
    half = 0.5 * gap_width
    bounds = (((0.0, -wall), (0.0, -half)), ((0.0, half), (0.0, wall)))
    rows = max(2, (M + 1) // 2)
    starts, goals = [], []
    for i in range(M):
        col, row = divmod(i, rows)
        y = (row - 0.5 * (rows - 1)) * 3.0
        sx = -6.0 - 3.0 * col - 1.0 * row  # staggered so crossing paths never meet head-on
        starts.append((sx, y))
        goals.append((6.0 + 3.0 * col, -y))
    x0 = np.zeros(M * n_p)
    xf = []
    for i in range(M):
        s = np.zeros(n_p)
        g = np.zeros(n_p)
        s[:2] = starts[i]
        g[:2] = goals[i]
        if len(model.position_indices) == 3:
            s[2] = g[2] = 1.5
        x0[i * n_p : (i + 1) * n_p] = s
        xf.append(g)
    q = np.full(n_p, 0.05)
    qf = np.full(n_p, 2.0)
    r = np.full(model.control_dim, 0.5)
    if model.kind == ModelKind.QUADROTOR:
        r = np.array([0.5, 20.0, 20.0, 20.0])
    obs = [gm.quadratic_objective(model, M, i, xf[i], q, r, qf) for i in range(M)]
    cs = gm.ConstraintSet(radius=0.5 * RADIUS, boundaries=bounds)
    p = gm.GameProblem(model, M, N, _knots(horizon, N), x0, obs, cs)
    return Scenario(f"drone_doorway_{M}_{model.kind.value}", p, info={"gap_width": gap_width, "horizon": horizon})


def merge_pair(horizon: float = 3.0, N: int = 40, offset: float = 0.5, taper=(5.0, 20.0),
               constrained: bool = True, prox_weight: float = 0.0, prox_radius: float = 0.0) -> Scenario:
    """One highway car and one ramp car side by side; either may end up in front.

    Same costs, bounds and road as the crowded merge. ``offset`` puts the ramp car slightly
    behind so the nominal state is not exactly symmetric. ``constrained=False`` keeps only the
    control bounds; pair it with a proximity cost.
    """
    yr = _lane_y("right")
    v = HIGHWAY_SPEED
    x0 = [0.0, yr, 0.0, v, -offset, _lane_y("ramp"), 0.0, v]
    goals = [[0.0, yr, 0.0, v]] * 2
    model, obs = _unicycle_objectives(2, goals, _Q_LANE, _R, _QF_LANE, prox_weight, prox_radius)
    cs = gm.ConstraintSet(
        radius=RADIUS,
        boundaries=ramp_boundaries(gore_x=0.0, taper_start=taper[0], taper_end=taper[1], lanes=1)
        if constrained else (),
        control_bounds=(_U_BOUNDS, _U_BOUNDS),
        collisions=constrained,
    )
    p = gm.GameProblem(model, 2, N, _knots(horizon, N), np.array(x0), obs, cs)
    return Scenario("merge_pair", p, sampling=dict(MPC_MC_RANGES), ego=1,
                    info={"horizon": horizon, "offset": offset, "taper": tuple(taper)})


def coupled_toy(N: int = 21, prox_weight: float = 1.0, prox_radius: float = 10.0) -> Scenario:
    """Two-car unconstrained merge coupled only through a repulsive proximity cost.

    Solver-comparison instance: every player's cost depends on the other's trajectory, and
    there are no constraints, so all solvers work on the same smooth game.
    """
    s = ramp_merging(M=2, N=N, constrained=False, prox_weight=prox_weight, prox_radius=prox_radius)
    return dataclasses.replace(s, name="coupled_toy")


SCENARIOS = {
    "coupled_toy": coupled_toy,
    "merge_pair": merge_pair,
    "ramp_merging": ramp_merging,
    "intersection": intersection,
    "highway_merge_crowded": highway_merge_crowded,
    "drone_doorway": drone_doorway,
}


def build(name: str, **kwargs) -> Scenario:
    try:
        return SCENARIOS[name](**kwargs)
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


# ---------------------------------------------------------------------------
# feasibility and sampling


def state_constraints(p: gm.GameProblem, x) -> np.ndarray:
    """Collision and boundary rows evaluated at a single joint state."""
    q = p.replace(N=2, x0=np.asarray(x, float), constraints=gm.ConstraintSet(
        radius=p.constraints.radius, boundaries=p.constraints.boundaries, collisions=p.constraints.collisions))
    X = np.asarray(x, float)[None]
    return gm._constraint_values(q, X, np.zeros((1, p.m)))


def strictly_feasible(p: gm.GameProblem, x, margin: float = STRICT_FEASIBILITY) -> bool:
    C = state_constraints(p, x)
    return bool(C.size == 0 or C.max() < -margin)


def sample_initial_state(s: Scenario, seed: int, ranges: Optional[dict] = None, max_draws: int = 100) -> np.ndarray:
    """Uniformly perturb the nominal state per vehicle until it is strictly feasible."""
    rng = np.random.default_rng(seed)
    ranges = dict(s.sampling if ranges is None else ranges)
    p = s.problem
    model = p.model
    n_p = model.state_dim
    axis = np.asarray(s.lane_axis, float)
    axis = axis / np.linalg.norm(axis)
    normal = np.array([-axis[1], axis[0]])
    h, vi = model.heading_index, model.velocity_index
    for _ in range(max_draws):
        x = p.x0.copy().reshape(p.M, n_p)
        for i in range(p.M):
            dl = rng.uniform(-1, 1) * ranges.get("longitudinal", 0.0)
            dn = rng.uniform(-1, 1) * ranges.get("lateral", 0.0)
            dh = rng.uniform(-1, 1) * ranges.get("heading", 0.0)
            dv = rng.uniform(-1, 1) * ranges.get("speed_frac", 0.0)
            x[i, :2] += dl * axis + dn * normal
            if h is not None:
                x[i, h] += dh
                x[i, vi] *= 1.0 + dv
            elif model.kind in (ModelKind.DOUBLE_INTEGRATOR_2D, ModelKind.DOUBLE_INTEGRATOR_3D):
                d = len(model.position_indices)
                vel = x[i, d : 2 * d].copy()
                c, sn = np.cos(dh), np.sin(dh)
                vel[:2] = np.array([[c, -sn], [sn, c]]) @ vel[:2]
                x[i, d : 2 * d] = vel * (1.0 + dv)
        x = x.ravel()
        if strictly_feasible(p, x):
            return x
    raise SamplingExhausted(f"no strictly feasible sample in {max_draws} draws")
