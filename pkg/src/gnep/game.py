"""GNEP instances: player objectives, shared constraints, and their derivatives.

Trajectory conventions used throughout the package:

* ``X`` has shape ``(N-1, n)`` and holds the joint states x_2..x_N (x_1 = x0 is fixed).
* ``U`` has shape ``(N-1, m)`` and holds the joint controls u_1..u_{N-1}.
* The primal vector ``z`` is ``[X.ravel(), U^1.ravel(), ..., U^M.ravel()]`` with each
  ``U^v`` stored time-major.

Inequality rows follow the ``C_i <= 0`` convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dynamics import ModelSpec, DimensionError

COLLISION, BOUNDARY, CONTROL, EQUALITY = 0, 1, 2, 3
KIND_NAMES = {COLLISION: "collision", BOUNDARY: "boundary", CONTROL: "control_bound", EQUALITY: "equality"}

REPULSIVE = "repulsive"
AS_PRINTED = "as_printed"


@dataclass(frozen=True)
class PlayerObjective:
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    xf: np.ndarray
    prox_weight: float = 0.0
    prox_radius: float = 0.0
    proximity_sign: str = REPULSIVE

    def __post_init__(self):
        for name in ("Q", "R", "Qf", "xf"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        for name in ("Q", "Qf", "R"):
            mat = getattr(self, name)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(mat, mat.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-10 or np.linalg.eigvalsh(self.Qf).min() < -1e-10:
            raise ValueError("Q and Qf must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() < 1e-10:
            raise ValueError("R must be positive definite")
        if self.prox_weight < 0 or self.prox_radius < 0:
            raise ValueError("proximity weight and radius must be nonnegative")
        if self.proximity_sign not in (REPULSIVE, AS_PRINTED):
            raise ValueError(f"unknown proximity_sign {self.proximity_sign!r}")


@dataclass(frozen=True)
class ConstraintSet:
    radius: float
    boundaries: tuple = ()
    # per player (lower, upper); entries may be +-inf
    control_bounds: Optional[tuple] = None
    # tuple of (player, {state index within player: target})
    terminal_equalities: tuple = ()
    collisions: bool = True

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("collision radius must be positive")
        segs = []
        for seg in self.boundaries:
            a, b = np.asarray(seg[0], float), np.asarray(seg[1], float)
            if np.linalg.norm(b - a) <= 0:
                raise ValueError("boundary segments must have positive length")
            segs.append((tuple(a), tuple(b)))
        object.__setattr__(self, "boundaries", tuple(segs))
        if self.control_bounds is not None:
            cb = tuple((np.asarray(lo, float), np.asarray(hi, float)) for lo, hi in self.control_bounds)
            for lo, hi in cb:
                if np.any(lo > hi):
                    raise ValueError("control lower bound exceeds upper bound")
            object.__setattr__(self, "control_bounds", cb)
        eqs = tuple((int(nu), dict(t)) for nu, t in self.terminal_equalities)
        object.__setattr__(self, "terminal_equalities", eqs)


@dataclass(frozen=True)
class ConstraintMeta:
    kind: np.ndarray
    p1: np.ndarray  # first player involved, -1 if none
    p2: np.ndarray  # second player for collision rows, -1 otherwise
    stage: np.ndarray  # time index into X / U rows (0-based)
    n_ci: int
    n_ce: int

    @property
    def size(self):
        return self.n_ci + self.n_ce

    def involves(self, nu: int) -> np.ndarray:
        return (self.p1 == nu) | (self.p2 == nu)


@dataclass(frozen=True)
class GameProblem:
    model: ModelSpec
    M: int
    N: int
    dt: float
    x0: np.ndarray
    objectives: tuple
    constraints: ConstraintSet = field(default_factory=lambda: ConstraintSet(radius=1.0, collisions=False))

    def __post_init__(self):
        if self.M < 1 or self.N < 2:
            raise ValueError("need M >= 1 and N >= 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "x0", np.array(self.x0, dtype=float))
        object.__setattr__(self, "objectives", tuple(self.objectives))
        if self.x0.shape != (self.n,):
            raise DimensionError(f"x0 has shape {self.x0.shape}, expected ({self.n},)")
        if len(self.objectives) != self.M:
            raise ValueError("one objective per player is required")
        for ob in self.objectives:
            if ob.Q.shape != (self.n, self.n) or ob.Qf.shape != (self.n, self.n) or ob.xf.shape != (self.n,):
                raise DimensionError("objective state weights must match the joint state size")
            if ob.R.shape != (self.m_p, self.m_p):
                raise DimensionError("objective control weight must match the player control size")
        cb = self.constraints.control_bounds
        if cb is not None and len(cb) != self.M:
            raise ValueError("control bounds must be given for every player")

    # sizes -----------------------------------------------------------------
    @property
    def n_p(self) -> int:
        return self.model.state_dim

    @property
    def m_p(self) -> int:
        return self.model.control_dim

    @property
    def n(self) -> int:
        return self.M * self.n_p

    @property
    def m(self) -> int:
        return self.M * self.m_p

    @property
    def K(self) -> int:
        """Number of decision knots, N-1."""
        return self.N - 1

    @property
    def nbar(self) -> int:
        return self.n * self.K

    @property
    def mbar_p(self) -> int:
        return self.m_p * self.K

    @property
    def nz(self) -> int:
        return self.nbar + self.M * self.mbar_p

    def replace(self, **kw) -> "GameProblem":
        from dataclasses import replace

        return replace(self, **kw)

    # index helpers ---------------------------------------------------------
    def pos_cols(self, nu: int) -> np.ndarray:
        return np.array(self.model.position_indices) + nu * self.n_p

    def u_offset(self, nu: int) -> int:
        return self.nbar + nu * self.mbar_p

    def split(self, z):
        X = z[: self.nbar].reshape(self.K, self.n)
        Us = z[self.nbar :].reshape(self.M, self.K, self.m_p)
        U = Us.transpose(1, 0, 2).reshape(self.K, self.m)
        return X, U

    def join(self, X, U) -> np.ndarray:
        Us = np.asarray(U).reshape(self.K, self.M, self.m_p).transpose(1, 0, 2)
        return np.concatenate([np.asarray(X).ravel(), Us.ravel()])

    def check_traj(self, X, U):
        if np.shape(X) != (self.K, self.n) or np.shape(U) != (self.K, self.m):
            raise DimensionError(
                f"trajectory shapes {np.shape(X)}, {np.shape(U)} do not match ({self.K}, {self.n}), ({self.K}, {self.m})"
            )

    # constraint structure --------------------------------------------------
    @cached_property
    def _quadratic_hessians(self) -> list:
        """Constant Q / Qf / R part of every player's cost Hessian over z (COO)."""
        out = []
        K, n = self.K, self.n
        for nu, ob in enumerate(self.objectives):
            blocks = sp.kron(sp.eye(K, format="csr"), sp.csr_matrix(ob.Q), format="coo")
            rows, cols, vals = [blocks.row], [blocks.col], [blocks.data]
            qf = sp.coo_matrix(ob.Qf)
            rows.append(qf.row + (K - 1) * n)
            cols.append(qf.col + (K - 1) * n)
            vals.append(qf.data)
            r = sp.kron(sp.eye(K, format="csr"), sp.csr_matrix(ob.R), format="coo")
            o = self.u_offset(nu)
            rows.append(r.row + o)
            cols.append(r.col + o)
            vals.append(r.data)
            out.append(sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.nz, self.nz)
            ))
        return out

    @cached_property
    def pairs(self):
        return list(combinations(range(self.M), 2)) if self.constraints.collisions else []

    @cached_property
    def constraint_meta(self) -> ConstraintMeta:
        cs = self.constraints
        K, M = self.K, self.M
        kinds, p1, p2, stage = [], [], [], []
        P = len(self.pairs)
        if P:
            kk, pp = np.meshgrid(np.arange(K), np.arange(P), indexing="ij")
            pa = np.array(self.pairs)
            kinds.append(np.full(K * P, COLLISION))
            p1.append(pa[pp.ravel(), 0])
            p2.append(pa[pp.ravel(), 1])
            stage.append(kk.ravel())
        nb = len(cs.boundaries)
        if nb:
            kk, vv, bb = np.meshgrid(np.arange(K), np.arange(M), np.arange(nb), indexing="ij")
            kinds.append(np.full(kk.size, BOUNDARY))
            p1.append(vv.ravel())
            p2.append(np.full(kk.size, -1))
            stage.append(kk.ravel())
        if cs.control_bounds is not None:
            for k in range(K):
                for nu, (lo, hi) in enumerate(cs.control_bounds):
                    for j in range(self.m_p):
                        for bound in (hi[j], lo[j]):
                            if np.isfinite(bound):
                                kinds.append([CONTROL])
                                p1.append([nu])
                                p2.append([-1])
                                stage.append([k])
        n_ci = int(sum(np.size(a) for a in kinds))
        for nu, targets in cs.terminal_equalities:
            for _ in targets:
                kinds.append([EQUALITY])
                p1.append([nu])
                p2.append([-1])
                stage.append([K - 1])
        cat = lambda parts: np.concatenate([np.asarray(a, dtype=int) for a in parts]) if parts else np.zeros(0, int)
        kind = cat(kinds)
        return ConstraintMeta(kind, cat(p1), cat(p2), cat(stage), n_ci, int(kind.size - n_ci))

    @cached_property
    def _control_rows(self):
        """(stage, player, control index, sign, bound) for every control-bound row, in row order."""
        rows = []
        cs = self.constraints
        if cs.control_bounds is None:
            return np.zeros((0, 5))
        for k in range(self.K):
            for nu, (lo, hi) in enumerate(cs.control_bounds):
                for j in range(self.m_p):
                    if np.isfinite(hi[j]):
                        rows.append((k, nu, j, 1.0, hi[j]))
                    if np.isfinite(lo[j]):
                        rows.append((k, nu, j, -1.0, lo[j]))
        return np.array(rows, dtype=float).reshape(-1, 5)

    @cached_property
    def _eq_rows(self):
        rows = []
        for nu, targets in self.constraints.terminal_equalities:
            for j, t in targets.items():
                rows.append((nu * self.n_p + int(j), float(t)))
        return np.array(rows, dtype=float).reshape(-1, 2)


# ---------------------------------------------------------------------------
# costs


def _positions(p: GameProblem, X):
    """Array (K, M, d) of player positions."""
    idx = np.array(p.model.position_indices)
    return X.reshape(p.K, p.M, p.n_p)[:, :, idx]


def _proximity_terms(ob: PlayerObjective, diff):
    """Value, first and second derivative of the proximity penalty as a function of distance."""
    d = np.linalg.norm(diff, axis=-1)
    g, eta = ob.prox_weight, ob.prox_radius
    if ob.proximity_sign == REPULSIVE:
        gap = np.maximum(0.0, eta - d)
        val = g * gap**2
        d1 = -2.0 * g * gap
    else:
        gap = np.maximum(0.0, d - eta)
        val = g * gap**2
        d1 = 2.0 * g * gap
    d2 = np.where(gap > 0, 2.0 * g, 0.0)
    return d, val, d1, d2


def player_cost(p: GameProblem, nu: int, X, U) -> float:
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    p.check_traj(X, U)
    ob = p.objectives[nu]
    E = X - ob.xf
    J = 0.5 * np.einsum("ki,ij,kj->", E, ob.Q, E) + 0.5 * E[-1] @ ob.Qf @ E[-1]
    Uv = U[:, nu * p.m_p : (nu + 1) * p.m_p]
    J += 0.5 * np.einsum("ki,ij,kj->", Uv, ob.R, Uv)
    if ob.prox_weight > 0 and p.M > 1:
        pos = _positions(p, X)
        for w in range(p.M):
            if w != nu:
                J += _proximity_terms(ob, pos[:, nu] - pos[:, w])[1].sum()
    return float(J)


def cost_gradient_full(p: GameProblem, nu: int, X, U) -> np.ndarray:
    """Gradient of J^nu with respect to the full primal vector z (zeros on others' controls)."""
    ob = p.objectives[nu]
    E = X - ob.xf
    gX = E @ ob.Q
    gX[-1] += ob.Qf @ E[-1]
    if ob.prox_weight > 0 and p.M > 1:
        pos = _positions(p, X)
        gpos = np.zeros_like(pos)
        for w in range(p.M):
            if w == nu:
                continue
            diff = pos[:, nu] - pos[:, w]
            d, _, d1, _ = _proximity_terms(ob, diff)
            e = diff / np.maximum(d, 1e-12)[:, None]
            gpos[:, nu] += d1[:, None] * e
            gpos[:, w] -= d1[:, None] * e
        gX = gX.reshape(p.K, p.M, p.n_p)
        gX[:, :, np.array(p.model.position_indices)] += gpos
        gX = gX.reshape(p.K, p.n)
    g = np.zeros(p.nz)
    g[: p.nbar] = gX.ravel()
    Uv = U[:, nu * p.m_p : (nu + 1) * p.m_p]
    o = p.u_offset(nu)
    g[o : o + p.mbar_p] = (Uv @ ob.R).ravel()
    return g


def player_cost_gradient(p: GameProblem, nu: int, X, U) -> np.ndarray:
    """Gradient of J^nu with respect to (X, U^nu)."""
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    p.check_traj(X, U)
    g = cost_gradient_full(p, nu, X, U)
    o = p.u_offset(nu)
    return np.concatenate([g[: p.nbar], g[o : o + p.mbar_p]])


def cost_hessian_full(p: GameProblem, nu: int, X) -> sp.csr_matrix:
    """Hessian of J^nu over the full primal vector z (sparse, nz x nz)."""
    ob = p.objectives[nu]
    K, n = p.K, p.n
    base = p._quadratic_hessians[nu]
    if not (ob.prox_weight > 0 and p.M > 1):
        return base.tocsr()
    rows, cols, vals = [base.row], [base.col], [base.data]
    pos = _positions(p, X)
    pidx = np.array(p.model.position_indices)
    dpos = len(pidx)
    eye = np.eye(dpos)
    karr = np.arange(K)
    for w in range(p.M):
        if w == nu:
            continue
        diff = pos[:, nu] - pos[:, w]
        d, _, d1, d2 = _proximity_terms(ob, diff)
        dsafe = np.maximum(d, 1e-12)
        e = diff / dsafe[:, None]
        ee = e[:, :, None] * e[:, None, :]
        Kb = d2[:, None, None] * ee + (d1 / dsafe)[:, None, None] * (eye - ee)
        for a, sa in ((nu, 1.0), (w, -1.0)):
            for b, sb in ((nu, 1.0), (w, -1.0)):
                ra = karr[:, None] * n + a * p.n_p + pidx[None, :]
                cb = karr[:, None] * n + b * p.n_p + pidx[None, :]
                rows.append(np.repeat(ra, dpos, axis=1).ravel())
                cols.append(np.tile(cb, (1, dpos)).ravel())
                vals.append((sa * sb * Kb).ravel())
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(p.nz, p.nz)
    )


# ---------------------------------------------------------------------------
# constraints


def _segment_projection(P, a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = b - a
    t = np.clip(((P - a) @ d) / (d @ d), 0.0, 1.0)
    return a + t[..., None] * d


def eval_constraints(p: GameProblem, X, U):
    """Constraint vector C (inequalities first, then equalities) and its row metadata."""
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    p.check_traj(X, U)
    return _constraint_values(p, X, U), p.constraint_meta


def _constraint_values(p: GameProblem, X, U) -> np.ndarray:
    cs = p.constraints
    parts = []
    pos = _positions(p, X)
    if p.pairs:
        pa = np.array(p.pairs)
        diff = pos[:, pa[:, 0]] - pos[:, pa[:, 1]]
        parts.append(((2.0 * cs.radius) ** 2 - np.sum(diff**2, axis=-1)).ravel())
    if cs.boundaries:
        xy = pos[:, :, :2]
        vals = np.empty((p.K, p.M, len(cs.boundaries)))
        for b, (a0, a1) in enumerate(cs.boundaries):
            q = _segment_projection(xy, a0, a1)
            vals[:, :, b] = cs.radius**2 - np.sum((xy - q) ** 2, axis=-1)
        parts.append(vals.ravel())
    cr = p._control_rows
    if cr.size:
        k, nu, j = cr[:, 0].astype(int), cr[:, 1].astype(int), cr[:, 2].astype(int)
        parts.append(cr[:, 3] * (U[k, nu * p.m_p + j] - cr[:, 4]))
    er = p._eq_rows
    if er.size:
        parts.append(X[-1, er[:, 0].astype(int)] - er[:, 1])
    return np.concatenate(parts) if parts else np.zeros(0)


def constraint_jacobian(p: GameProblem, X, U) -> sp.csr_matrix:
    """Sparse dC/dz, shape (n_c, nz)."""
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    p.check_traj(X, U)
    cs = p.constraints
    K, n = p.K, p.n
    pidx = np.array(p.model.position_indices)
    rows, cols, vals = [], [], []
    r0 = 0
    pos = _positions(p, X)
    karr = np.arange(K)
    if p.pairs:
        pa = np.array(p.pairs)
        P = len(pa)
        diff = pos[:, pa[:, 0]] - pos[:, pa[:, 1]]  # (K, P, d)
        ridx = r0 + karr[:, None] * P + np.arange(P)[None, :]
        for who, sign in ((pa[:, 0], -2.0), (pa[:, 1], 2.0)):
            c = karr[:, None, None] * n + who[None, :, None] * p.n_p + pidx[None, None, :]
            rows.append(np.broadcast_to(ridx[:, :, None], c.shape).ravel())
            cols.append(c.ravel())
            vals.append((sign * diff).ravel())
        r0 += K * P
    nb = len(cs.boundaries)
    if nb:
        xy = pos[:, :, :2]
        ridx = r0 + (karr[:, None, None] * p.M + np.arange(p.M)[None, :, None]) * nb + np.arange(nb)[None, None, :]
        for b, (a0, a1) in enumerate(cs.boundaries):
            q = _segment_projection(xy, a0, a1)
            g = -2.0 * (xy - q)  # (K, M, 2)
            c = karr[:, None, None] * n + np.arange(p.M)[None, :, None] * p.n_p + pidx[None, None, :2]
            rows.append(np.broadcast_to(ridx[:, :, b][:, :, None], c.shape).ravel())
            cols.append(c.ravel())
            vals.append(g.ravel())
        r0 += K * p.M * nb
    cr = p._control_rows
    if cr.size:
        k, nu, j = cr[:, 0].astype(int), cr[:, 1].astype(int), cr[:, 2].astype(int)
        rows.append(r0 + np.arange(len(cr)))
        cols.append(p.nbar + nu * p.mbar_p + k * p.m_p + j)
        vals.append(cr[:, 3])
        r0 += len(cr)
    er = p._eq_rows
    if er.size:
        rows.append(r0 + np.arange(len(er)))
        cols.append((K - 1) * n + er[:, 0].astype(int))
        vals.append(np.ones(len(er)))
        r0 += len(er)
    if not rows:
        return sp.csr_matrix((0, p.nz))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r0, p.nz)
    )


def constraint_violation(p: GameProblem, C) -> float:
    """Largest violation: max(0, C_i) over inequalities and |C_e| over equalities."""
    meta = p.constraint_meta
    if C.size == 0:
        return 0.0
    v = np.concatenate([np.maximum(0.0, C[: meta.n_ci]), np.abs(C[meta.n_ci :])])
    return float(v.max())


# ---------------------------------------------------------------------------
# convenience constructors


def quadratic_objective(
    p_model: ModelSpec,
    M: int,
    nu: int,
    goal,
    q_diag,
    r_diag,
    qf_diag=None,
    prox_weight=0.0,
    prox_radius=0.0,
    proximity_sign=REPULSIVE,
) -> PlayerObjective:
    """Objective that only weights player nu's own state block."""
    n_p = p_model.state_dim
    n = M * n_p
    Q = np.zeros((n, n))
    Qf = np.zeros((n, n))
    blk = slice(nu * n_p, (nu + 1) * n_p)
    Q[blk, blk] = np.diag(q_diag)
    Qf[blk, blk] = np.diag(q_diag if qf_diag is None else qf_diag)
    xf = np.zeros(n)
    xf[blk] = goal
    return PlayerObjective(Q, np.diag(r_diag), Qf, xf, prox_weight, prox_radius, proximity_sign)
