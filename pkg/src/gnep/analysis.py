"""Equilibrium structure: static quadratic games, duplicated-multiplier KKT systems,
nullspace exploration, PCA of equilibria and normalized-Nash checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.cluster.hierarchy import fcluster, linkage

from . import alcore as alc
from . import game as gm
from . import newton as nt
from .dynamics import ModelKind, linearize, rollout

UNIQUE = "Unique"
AFFINE_SUBSPACE = "AffineSubspace"
NO_SOLUTION = "NoSolution"

ACTIVE_TOL = 1e-4
SVD_TOL = 1e-10
CLUSTER_DELTA = 1e-1


class NotConverged(ValueError):
    """Raised when an operation needs a converged equilibrium and gets something else."""


# ---------------------------------------------------------------------------
# static quadratic games


@dataclass
class StaticQuadraticGame:
    """J^nu(s) = 1/2 s'Q^nu s + q^nu's + c^nu over the stacked strategy s = [s^1, ..., s^M].

    ``Q[nu]`` is the full Hessian of player nu's cost; block (i, j) is ``Q^nu_{i,j}``.
    """

    Q: list
    q: list
    c: list
    dims: tuple

    def __post_init__(self):
        self.Q = [np.atleast_2d(np.asarray(a, float)) for a in self.Q]
        self.q = [np.atleast_1d(np.asarray(a, float)) for a in self.q]
        self.c = [float(a) for a in self.c]
        self.dims = tuple(int(d) for d in self.dims)
        n = sum(self.dims)
        if not (len(self.Q) == len(self.q) == len(self.c) == len(self.dims)):
            raise ValueError("one Q, q, c per player is required")
        for Qn, qn in zip(self.Q, self.q):
            if Qn.shape != (n, n) or qn.shape != (n,):
                raise ValueError("every Q must be (n, n) and every q of length n with n the total dimension")
        for nu in range(self.M):
            b = self.Q[nu][self.block(nu), self.block(nu)]
            if not np.allclose(b, b.T, atol=1e-10):
                raise ValueError("Q^nu_{nu,nu} must be symmetric")

    @property
    def M(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return sum(self.dims)

    def block(self, nu: int) -> slice:
        o = sum(self.dims[:nu])
        return slice(o, o + self.dims[nu])

    def cost(self, nu: int, s) -> float:
        s = np.asarray(s, float)
        return float(0.5 * s @ self.Q[nu] @ s + self.q[nu] @ s + self.c[nu])

    def stacked(self):
        """(A, b) with row block nu equal to the gradient of J^nu with respect to s^nu: A s = b."""
        A = np.vstack([self.Q[nu][self.block(nu)] for nu in range(self.M)])
        b = -np.concatenate([self.q[nu][self.block(nu)] for nu in range(self.M)])
        return A, b

    def stationarity(self, s) -> np.ndarray:
        A, b = self.stacked()
        return A @ np.asarray(s, float) - b


@dataclass
class LqSolution:
    kind: str
    point: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None  # orthonormal columns spanning the equilibrium directions
    second_order_ok: bool = True

    def project(self, s0) -> np.ndarray:
        """Orthogonal projection of s0 onto the equilibrium set."""
        if self.kind == NO_SOLUTION:
            raise ValueError("no equilibrium to project on")
        if self.basis is None or self.basis.shape[1] == 0:
            return self.point.copy()
        B = self.basis
        return self.point + B @ (B.T @ (np.asarray(s0, float) - self.point))


def lq_nash_solve(g: StaticQuadraticGame, rtol: float = 1e-9) -> LqSolution:
    """Classify and solve the stacked first-order conditions of a static quadratic game."""
    A, b = g.stacked()
    U, sv, Vt = np.linalg.svd(A)
    smax = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > rtol * max(smax, 1.0)))
    Aug = np.column_stack([A, b])
    sva = np.linalg.svd(Aug, compute_uv=False)
    rank_aug = int(np.sum(sva > rtol * max(sva[0] if sva.size else 0.0, 1.0)))
    second = all(np.linalg.eigvalsh(g.Q[nu][g.block(nu), g.block(nu)]).min() >= -1e-10 for nu in range(g.M))
    if rank_aug > rank:
        return LqSolution(NO_SOLUTION, second_order_ok=second)
    inv = np.zeros_like(sv)
    inv[:rank] = 1.0 / sv[:rank]
    point = Vt.T @ (inv * (U.T @ b))
    if rank == g.size:
        return LqSolution(UNIQUE, point, np.zeros((g.size, 0)), second)
    return LqSolution(AFFINE_SUBSPACE, point, Vt[rank:].T.copy(), second)


def _control_map(p: gm.GameProblem):
    """Affine map s -> z = z0 + T s for a game with linear dynamics, s = stacked controls."""
    if p.model.kind not in (ModelKind.DOUBLE_INTEGRATOR_2D, ModelKind.DOUBLE_INTEGRATOR_3D):
        raise ValueError("condensing needs linear dynamics")
    K, n, m = p.K, p.n, p.m
    A, B = linearize(p.model, p.x0, np.zeros(m), p.dt)
    X0 = rollout(p.model, p.x0, np.zeros((K, m)), p.dt)
    # d x_{k+1} / d u_j = A^{k-j} B for j <= k
    Gam = np.zeros((K, n, K, m))
    Ak = [np.eye(n)]
    for _ in range(K):
        Ak.append(A @ Ak[-1])
    for k in range(K):
        for j in range(k + 1):
            Gam[k, :, j, :] = Ak[k - j] @ B
    Tx = Gam.reshape(K * n, K * m)
    # stacked strategy order is player-major, each player time-major
    perm = np.array([k * m + nu * p.m_p + i for nu in range(p.M) for k in range(K) for i in range(p.m_p)])
    T = np.vstack([Tx[:, perm], np.eye(K * m)])
    z0 = np.concatenate([X0.ravel(), np.zeros(K * m)])
    return z0, T


def condense(p: gm.GameProblem) -> StaticQuadraticGame:
    """Eliminate states from an unconstrained linear-quadratic dynamic game."""
    if p.constraint_meta.size:
        raise ValueError("condensing needs a game without constraints")
    if any(ob.prox_weight > 0 for ob in p.objectives):
        raise ValueError("condensing needs purely quadratic costs")
    z0, T = _control_map(p)
    X0, U0 = p.split(z0)
    Qs, qs, cs = [], [], []
    for nu in range(p.M):
        Hz = gm.cost_hessian_full(p, nu, X0).toarray()
        gz = gm.cost_gradient_full(p, nu, X0, U0)
        Qs.append(T.T @ Hz @ T)
        qs.append(T.T @ gz)
        cs.append(gm.player_cost(p, nu, X0, U0))
    return StaticQuadraticGame(Qs, qs, cs, (p.mbar_p,) * p.M)


def strategy_to_point(p: gm.GameProblem, s, mu=None) -> alc.PrimalDualPoint:
    """Primal point for stacked controls s (linear dynamics), with given or zero multipliers."""
    z0, T = _control_map(p)
    X, U = p.split(z0 + T @ np.asarray(s, float))
    mu = np.zeros((p.M, p.K, p.n)) if mu is None else np.asarray(mu, float)
    return alc.PrimalDualPoint(X.copy(), U.copy(), mu)


def point_to_strategy(p: gm.GameProblem, pt: alc.PrimalDualPoint) -> np.ndarray:
    return pt.primal(p)[p.nbar :]


# ---------------------------------------------------------------------------
# duplicated-multiplier KKT system


@dataclass
class AugmentedKkt:
    G: np.ndarray
    H: np.ndarray  # dense, rows = len(G), cols = len(G) + n_shared
    active: np.ndarray  # constraint row indices held at C_k = 0
    shared: np.ndarray  # subset of active that are pair (collision) rows
    lam_columns: list  # per column beyond the base system: (row k, owner player or -1)
    n_c: int
    n_base: int  # size of the square game system [X, U, mu]

    @property
    def n_a(self) -> int:
        return int(self.shared.size)

    def column_values(self, lam_eff) -> np.ndarray:
        """Initial duplicated multipliers (every copy equal to the shared value)."""
        return np.array([lam_eff[k] for k, _ in self.lam_columns])


def _effective_multipliers(p, ev, al):
    C = ev.C
    w = alc.penalty_activation(C, al.lam, al.rho, p.constraint_meta.n_ci)
    return al.lam + w * C


def build_augmented_kkt(p: gm.GameProblem, point: alc.PrimalDualPoint, al: alc.AlState,
                        report: Optional[nt.SolveReport] = None, active_tol: float = ACTIVE_TOL) -> AugmentedKkt:
    """Residual and Jacobian of the game KKT conditions with one multiplier copy per player
    on every active pair constraint."""
    if report is not None and not report.converged:
        raise NotConverged("the augmented KKT system needs a converged equilibrium")
    lay = alc.Layout(p)
    y = lay.pack(point)
    ev0 = alc.evaluate(lay, y, al)
    meta = p.constraint_meta
    lam_eff = _effective_multipliers(p, ev0, al)
    # rows near the boundary, plus rows still carrying a multiplier (the AL tolerance lets
    # a loaded row sit slightly inside the feasible side)
    active = np.flatnonzero((ev0.C >= -active_tol) | (lam_eff > 0)) if meta.size else np.zeros(0, int)
    # pure Lagrangian at the effective multipliers, restricted to the active rows
    lam_act = np.zeros(meta.size)
    lam_act[active] = lam_eff[active]
    al0 = alc.AlState(lam_act, np.zeros(meta.size), al.gamma_pen, al.rho_max, al.lam_max)
    ev = alc.evaluate(lay, y, al0)
    Hb = alc.kkt_jacobian(lay, y, al0, ev).toarray()
    nb = lay.size
    # the base Jacobian already carries lam_act through G; the lam columns take over that role
    shared = active[meta.kind[active] == gm.COLLISION]
    cols = []
    for k in active:
        if meta.kind[k] == gm.COLLISION:
            cols.append((int(k), int(meta.p1[k])))
            cols.append((int(k), int(meta.p2[k])))
        else:
            cols.append((int(k), -1))
    JC = ev.JC.tocsr()
    L = np.zeros((nb, len(cols)))
    for j, (k, owner) in enumerate(cols):
        grad = JC[k].toarray().ravel()
        for ia, a in enumerate(lay.active):
            if owner < 0 or owner == a:
                f = 1.0
            elif meta.kind[k] == gm.COLLISION and a not in (meta.p1[k], meta.p2[k]):
                f = 0.5
            else:
                f = 0.0
            if f:
                L[lay.g_slice(ia), j] = f * grad[lay.z_rows[a]]
    Crow = np.zeros((active.size, nb + len(cols)))
    for i, k in enumerate(active):
        Crow[i, : lay.n_primal] = JC[k].toarray().ravel()[lay.z_active]
    H = np.vstack([np.hstack([Hb, L]), Crow])
    G = np.concatenate([ev.G, ev0.C[active]])
    return AugmentedKkt(G, H, active, shared, cols, meta.size, nb)


def kkt_nullspace(a, svd_tol: float = SVD_TOL) -> np.ndarray:
    """Orthonormal basis (columns) of the nullspace of H by singular value thresholding.

    Accepts an AugmentedKkt or a plain matrix.
    """
    H = a.H if isinstance(a, AugmentedKkt) else np.atleast_2d(np.asarray(a, float))
    r, c = H.shape
    _, sv, Vt = np.linalg.svd(H, full_matrices=True)
    smax = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > svd_tol * smax)) if smax > 0 else 0
    basis = Vt[rank:].T.copy()
    if isinstance(a, AugmentedKkt) and basis.shape[1] < a.n_a:
        raise RuntimeError("nullspace smaller than the number of active shared rows")
    return basis


@dataclass
class ProjectionResult:
    point: Optional[alc.PrimalDualPoint]
    report: nt.SolveReport
    drift: float
    al: Optional[alc.AlState] = None

    @property
    def ok(self) -> bool:
        return self.point is not None


def perturb_and_project(p: gm.GameProblem, point: alc.PrimalDualPoint, al: alc.AlState, direction,
                        step: Optional[float] = None, opts: Optional[nt.SolverOptions] = None,
                        kkt: Optional[AugmentedKkt] = None) -> ProjectionResult:
    """Step the primal trajectory along ``direction`` and re-solve from there.

    ``direction`` is either a column-space vector of the augmented system or a full
    layout vector; its primal part is normalized. Duplicated multipliers are averaged back
    into the shared ones. ``step`` defaults to 1e-2 of the trajectory norm.
    """
    opts = nt.SolverOptions() if opts is None else opts
    lay = alc.Layout(p)
    y = lay.pack(point)
    z = point.primal(p)
    d = np.asarray(direction, float)
    dp = d[: lay.n_primal]
    nrm = np.linalg.norm(dp)
    if step is None:
        step = 1e-2 * np.linalg.norm(z)
    al_new = al.copy()
    y_new = y.copy()
    if nrm > 0 and step != 0:
        y_new[: lay.n_primal] += step * dp / nrm
        if kkt is not None and d.size == kkt.H.shape[1]:
            extra = d[kkt.n_base :] * step / nrm
            acc = {}
            for (k, _), v in zip(kkt.lam_columns, extra):
                acc.setdefault(k, []).append(v)
            for k, vs in acc.items():
                lam = al_new.lam[k] + float(np.mean(vs))
                al_new.lam[k] = max(lam, 0.0) if k < p.constraint_meta.n_ci else lam
    init = lay.unpack(y_new, point)
    new, rep = nt.solve(p, init, opts, al_new)
    drift = float(np.linalg.norm(new.primal(p) - z))
    if not rep.converged:
        return ProjectionResult(None, rep, drift)
    return ProjectionResult(new, rep, drift, rep.al)


def pca_of_equilibria(points: Sequence) -> tuple:
    """(eigenvalues descending, eigenvectors as columns) of mean-centered primal vectors."""
    P = np.array([np.asarray(v, float).ravel() for v in points])
    if P.shape[0] < 2:
        raise ValueError("PCA needs at least two points")
    Xc = P - P.mean(axis=0)
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    ev = s**2 / (P.shape[0] - 1)
    return ev, Vt.T


# ---------------------------------------------------------------------------
# normalized Nash check


@dataclass
class NneReport:
    is_nne: bool
    max_multiplier_gap: float
    replay_error: float  # deviation of the replayed copies from the shared multipliers
    updates: int


def nne_check(p: gm.GameProblem, report: nt.SolveReport, init=(0.0, 0.0), tol: float = 1e-12) -> NneReport:
    """Replay dual ascent with one multiplier copy per player on every pair constraint.

    Both copies see the same constraint value and penalty at every update, so starting them
    equal keeps them equal; unequal ``init`` shows the gap persisting.
    """
    meta = p.constraint_meta
    pair = np.flatnonzero(meta.kind == gm.COLLISION)
    n_ci = meta.n_ci
    l1 = np.zeros(meta.size)
    l2 = np.zeros(meta.size)
    shared = np.zeros(meta.size)
    l1[pair] = init[0]
    l2[pair] = init[1]
    gap = float(np.abs(l1[pair] - l2[pair]).max()) if pair.size else 0.0
    err = 0.0
    updates = 0
    lam_max = report.al.lam_max if report.al is not None else alc.LAM_MAX
    for rec in report.dual_trace:
        if rec["final"]:
            break
        C, rho = rec["C"], rec["rho"]
        err = max(err, float(np.abs(shared[pair] - rec["lam"][pair]).max()) if pair.size else 0.0)
        for lam in (l1, l2, shared):
            new = lam + rho * C
            new[:n_ci] = np.clip(new[:n_ci], 0.0, lam_max)
            new[n_ci:] = np.clip(new[n_ci:], -lam_max, lam_max)
            lam[:] = new
        updates += 1
        if pair.size:
            gap = max(gap, float(np.abs(l1[pair] - l2[pair]).max()))
    return NneReport(gap <= tol, gap, err, updates)


# ---------------------------------------------------------------------------
# multi-start


@dataclass
class ClusterResult:
    count: int
    labels: np.ndarray
    representatives: list
    solutions: list
    failed: int


def cluster_solutions(Z: Sequence, delta: float = CLUSTER_DELTA) -> np.ndarray:
    """Single-linkage labels with the threshold scaled by the mean trajectory norm."""
    Z = np.array([np.asarray(z, float) for z in Z])
    if len(Z) == 1:
        return np.ones(1, int)
    scale = max(float(np.mean(np.linalg.norm(Z, axis=1))), 1e-12)
    return fcluster(linkage(Z / scale, method="single"), t=delta, criterion="distance")


def multistart_cluster(p: gm.GameProblem, K: int, seed: int, opts: Optional[nt.SolverOptions] = None,
                       u_range=None, delta: float = CLUSTER_DELTA) -> ClusterResult:
    """Solve from K random dynamically feasible initial guesses and cluster the equilibria."""
    if K < 2:
        raise ValueError("multistart needs at least two samples")
    opts = nt.SolverOptions() if opts is None else opts
    rng = np.random.default_rng(seed)
    cb = p.constraints.control_bounds
    if u_range is not None:
        lo = np.tile(np.broadcast_to(np.asarray(u_range[0], float), (p.m_p,)), p.M)
        hi = np.tile(np.broadcast_to(np.asarray(u_range[1], float), (p.m_p,)), p.M)
    elif cb is not None:
        lo = np.concatenate([np.clip(l, -1.0, None) for l, _ in cb])
        hi = np.concatenate([np.clip(h, None, 1.0) for _, h in cb])
    else:
        lo, hi = -np.ones(p.m), np.ones(p.m)
    sols, failed = [], 0
    for _ in range(K):
        U = rng.uniform(lo, hi, size=(p.K, p.m))
        pt, rep = nt.solve(p, alc.initial_point(p, U), opts)
        if rep.converged:
            sols.append(pt)
        else:
            failed += 1
    if not sols:
        return ClusterResult(0, np.zeros(0, int), [], [], failed)
    labels = cluster_solutions([s.primal(p) for s in sols], delta)
    reps = [sols[int(np.flatnonzero(labels == c)[0])] for c in np.unique(labels)]
    return ClusterResult(len(reps), labels, reps, sols, failed)
