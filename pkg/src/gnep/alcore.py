"""Augmented Lagrangian residual and Jacobian for the stacked per-player optimality system.

The decision vector of a (possibly restricted) game is ``y = [X, U^a..., mu^a...]`` for the
active players ``a``; players outside the active set keep their controls frozen. The
residual stacks ``G^a = grad_{X,U^a} L^a`` for each active player and the dynamics
defects ``D``. Shared multipliers ``lam`` and penalties ``rho`` cover every constraint row
of the problem; a restricted layout simply ignores the rows that do not involve any
active player.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import game as gm
from .dynamics import rk4_player, rk4_player_jac, DimensionError

LAM_MAX = 1e7
RHO_MAX = 1e8


@dataclass
class PrimalDualPoint:
    X: np.ndarray  # (N-1, n)
    U: np.ndarray  # (N-1, m)
    mu: np.ndarray  # (M, N-1, n)

    def copy(self) -> "PrimalDualPoint":
        return PrimalDualPoint(self.X.copy(), self.U.copy(), self.mu.copy())

    def flat(self) -> np.ndarray:
        """Full-game stacking [X, U^1..U^M, mu^1..mu^M]."""
        M, K, n = self.mu.shape
        m_p = self.U.shape[1] // M
        Us = self.U.reshape(K, M, m_p).transpose(1, 0, 2)
        return np.concatenate([self.X.ravel(), Us.ravel(), self.mu.ravel()])

    @classmethod
    def from_flat(cls, p: gm.GameProblem, y) -> "PrimalDualPoint":
        y = np.asarray(y, float)
        if y.size != p.nz + p.M * p.nbar:
            raise DimensionError(f"flat vector of size {y.size} does not match the problem")
        X, U = p.split(y[: p.nz])
        mu = y[p.nz :].reshape(p.M, p.K, p.n)
        return cls(X.copy(), U.copy(), mu.copy())

    def primal(self, p: gm.GameProblem) -> np.ndarray:
        return p.join(self.X, self.U)


@dataclass
class AlState:
    lam: np.ndarray
    rho: np.ndarray
    gamma_pen: float = 10.0
    rho_max: float = RHO_MAX
    lam_max: float = LAM_MAX

    def __post_init__(self):
        if not self.gamma_pen > 1:
            raise ValueError("penalty growth rate must exceed 1")

    @classmethod
    def initial(cls, n_c: int, rho0: float = 1.0, gamma_pen: float = 10.0, rho_max=RHO_MAX, lam_max=LAM_MAX):
        return cls(np.zeros(n_c), np.full(n_c, float(rho0)), gamma_pen, rho_max, lam_max)

    def copy(self) -> "AlState":
        return replace(self, lam=self.lam.copy(), rho=self.rho.copy())


def initial_point(p: gm.GameProblem, U=None) -> PrimalDualPoint:
    """Rollout of the given controls (zero by default) with zero dynamics multipliers."""
    from .dynamics import rollout

    U = np.zeros((p.K, p.m)) if U is None else np.asarray(U, float)
    X = rollout(p.model, p.x0, U, p.dt)
    return PrimalDualPoint(X, U.copy(), np.zeros((p.M, p.K, p.n)))


# ---------------------------------------------------------------------------
# AL pieces


def penalty_activation(C, lam, rho, n_ci: int) -> np.ndarray:
    """Diagonal of I_rho: zero for strictly satisfied inequalities with zero multiplier."""
    C = np.asarray(C, float)
    w = np.array(rho, dtype=float, copy=True)
    inactive = (C < 0) & (np.asarray(lam) == 0)
    inactive[n_ci:] = False
    w[inactive] = 0.0
    return w


def dual_ascent(al: AlState, C, n_ci: int, rows=None) -> np.ndarray:
    """Multiplier update lam + rho*C, projected on [0, lam_max] for inequalities."""
    C = np.asarray(C, float)
    lam = al.lam + al.rho * C
    lam[:n_ci] = np.clip(lam[:n_ci], 0.0, al.lam_max)
    lam[n_ci:] = np.clip(lam[n_ci:], -al.lam_max, al.lam_max)
    if rows is not None:
        out = al.lam.copy()
        out[rows] = lam[rows]
        return out
    return lam


def penalty_schedule(al: AlState, rows=None) -> np.ndarray:
    rho = np.minimum(al.rho_max, al.gamma_pen * al.rho)
    if rows is not None:
        out = al.rho.copy()
        out[rows] = rho[rows]
        return out
    return rho


# ---------------------------------------------------------------------------
# layout of a (restricted) root-finding problem


class Layout:
    """Index bookkeeping for the root-finding system over a set of active players."""

    def __init__(self, p: gm.GameProblem, active: Optional[Sequence[int]] = None, U_fixed=None):
        self.p = p
        self.active = tuple(range(p.M)) if active is None else tuple(sorted(active))
        if not self.active:
            raise ValueError("at least one active player is required")
        self.frozen = tuple(nu for nu in range(p.M) if nu not in self.active)
        if self.frozen and U_fixed is None:
            raise ValueError("frozen players need fixed controls")
        self.U_fixed = None if U_fixed is None else np.array(U_fixed, dtype=float)
        Ma = len(self.active)
        K, n, m_p = p.K, p.n, p.m_p
        self.Ma = Ma
        self.n_primal = p.nbar + Ma * p.mbar_p
        self.size = self.n_primal + Ma * p.nbar
        self.block = p.nbar + p.mbar_p
        # primal indices into z (full primal) for each active player's (X, U^a)
        xi = np.arange(p.nbar)
        self.z_active = np.concatenate([xi] + [p.u_offset(a) + np.arange(p.mbar_p) for a in self.active])
        self.z_rows = {a: np.concatenate([xi, p.u_offset(a) + np.arange(p.mbar_p)]) for a in self.active}
        meta = p.constraint_meta
        if self.frozen:
            mask = np.zeros(meta.size, bool)
            for a in self.active:
                mask |= meta.involves(a)
            self.rows = np.flatnonzero(mask)
        else:
            self.rows = np.arange(meta.size)
        self.n_ci = meta.n_ci
        self.row_mask = np.zeros(meta.size, bool)
        self.row_mask[self.rows] = True

    # packing ----------------------------------------------------------------
    def pack(self, pt: PrimalDualPoint) -> np.ndarray:
        p = self.p
        parts = [pt.X.ravel()]
        for a in self.active:
            parts.append(pt.U[:, a * p.m_p : (a + 1) * p.m_p].ravel())
        for a in self.active:
            parts.append(pt.mu[a].ravel())
        return np.concatenate(parts)

    def unpack(self, y, base: Optional[PrimalDualPoint] = None) -> PrimalDualPoint:
        p = self.p
        K, n, m_p = p.K, p.n, p.m_p
        y = np.asarray(y, float)
        if y.size != self.size:
            raise DimensionError(f"vector of size {y.size}, layout expects {self.size}")
        X = y[: p.nbar].reshape(K, n).copy()
        if base is not None:
            U = base.U.copy()
            mu = base.mu.copy()
        else:
            U = np.zeros((K, p.m))
            mu = np.zeros((p.M, K, n))
        if self.frozen:
            for nu in self.frozen:
                U[:, nu * m_p : (nu + 1) * m_p] = self.U_fixed[:, nu * m_p : (nu + 1) * m_p]
        o = p.nbar
        for a in self.active:
            U[:, a * m_p : (a + 1) * m_p] = y[o : o + p.mbar_p].reshape(K, m_p)
            o += p.mbar_p
        for a in self.active:
            mu[a] = y[o : o + p.nbar].reshape(K, n)
            o += p.nbar
        return PrimalDualPoint(X, U, mu)

    def split(self, y):
        """(X, U, mu_active) views from a layout vector, with frozen controls filled in."""
        p = self.p
        K, n, m_p = p.K, p.n, p.m_p
        X = y[: p.nbar].reshape(K, n)
        U = np.empty((K, p.m)) if self.U_fixed is None else self.U_fixed.copy()
        o = p.nbar
        for a in self.active:
            U[:, a * m_p : (a + 1) * m_p] = y[o : o + p.mbar_p].reshape(K, m_p)
            o += p.mbar_p
        mu = y[o:].reshape(self.Ma, K, n)
        return X, U, mu

    def primal_mask(self) -> np.ndarray:
        """+1 on primal entries, -1 on dual entries (the regularization signature)."""
        s = np.ones(self.size)
        s[self.n_primal :] = -1.0
        return s

    # block bookkeeping for the residual vector
    def g_slice(self, ia: int) -> slice:
        return slice(ia * self.block, (ia + 1) * self.block)

    def d_slice(self) -> slice:
        return slice(self.Ma * self.block, self.Ma * self.block + self.p.nbar)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    X: np.ndarray
    U: np.ndarray
    mu: np.ndarray
    C: np.ndarray
    JC: sp.csr_matrix
    weights: np.ndarray  # I_rho diagonal restricted to layout rows
    D: np.ndarray
    Ap: np.ndarray
    Bp: np.ndarray
    G: np.ndarray


def _dynamics(p: gm.GameProblem, X, U):
    """Defects D (K, n) and per-player Jacobians Ap (K, M, n_p, n_p), Bp (K, M, n_p, m_p)."""
    K, M, n_p, m_p = p.K, p.M, p.n_p, p.m_p
    prev = np.vstack([p.x0[None], X[:-1]])
    xs = prev.reshape(K * M, n_p)
    us = U.reshape(K * M, m_p)
    xn, A, B = rk4_player_jac(p.model, xs, us, p.dt)
    D = X - xn.reshape(K, p.n)
    return D, A.reshape(K, M, n_p, n_p), B.reshape(K, M, n_p, m_p)


def dynamics_defects(p: gm.GameProblem, X, U) -> np.ndarray:
    K, M, n_p, m_p = p.K, p.M, p.n_p, p.m_p
    prev = np.vstack([p.x0[None], X[:-1]])
    xn = rk4_player(p.model, prev.reshape(K * M, n_p), U.reshape(K * M, m_p), p.dt)
    return X - xn.reshape(K, p.n)


def _dyn_transpose(p: gm.GameProblem, Ap, Bp, mu):
    """(dD/dX)^T mu (K, n) and (dD/dU)^T mu (K, M, m_p) for one multiplier trajectory mu (K, n)."""
    K, M, n_p = p.K, p.M, p.n_p
    mu_b = mu.reshape(K, M, n_p)
    gx = mu.copy()
    # D_{k+1} depends on X[k] through -A_{k+1}
    gx[:-1] -= np.einsum("kmij,kmi->kmj", Ap[1:], mu_b[1:]).reshape(K - 1, p.n)
    gu = -np.einsum("kmij,kmi->kmj", Bp, mu_b)
    return gx, gu


def evaluate(lay: Layout, y, al: AlState, jacobian_only_data: bool = False) -> Evaluation:
    p = lay.p
    X, U, mu = lay.split(y)
    C = gm._constraint_values(p, X, U)
    JC = gm.constraint_jacobian(p, X, U)
    rows = lay.rows
    w = np.zeros(C.size)
    if rows.size:
        w_all = penalty_activation(C, al.lam, al.rho, p.constraint_meta.n_ci)
        w[rows] = w_all[rows]
    mult = np.zeros(C.size)
    mult[rows] = al.lam[rows] + w[rows] * C[rows]
    cterm = JC.T @ mult if C.size else np.zeros(p.nz)
    D, Ap, Bp = _dynamics(p, X, U)
    G = np.empty(lay.size)
    nb = p.nbar
    for ia, a in enumerate(lay.active):
        gcost = gm.cost_gradient_full(p, a, X, U)
        gx, gu = _dyn_transpose(p, Ap, Bp, mu[ia])
        o = p.u_offset(a)
        blk = G[lay.g_slice(ia)]
        blk[:nb] = gcost[:nb] + gx.ravel() + cterm[:nb]
        blk[nb:] = gcost[o : o + p.mbar_p] + gu[:, a].ravel() + cterm[o : o + p.mbar_p]
    G[lay.d_slice()] = D.ravel()
    return Evaluation(X, U, mu, C, JC, w, D, Ap, Bp, G)


def residual(lay: Layout, y, al: AlState) -> np.ndarray:
    return evaluate(lay, y, al).G


def _dynamics_jacobian(p: gm.GameProblem, Ap, Bp) -> sp.csr_matrix:
    """dD/dz, shape (nbar, nz)."""
    K, M, n, n_p, m_p = p.K, p.M, p.n, p.n_p, p.m_p
    rows = [np.arange(p.nbar)]
    cols = [np.arange(p.nbar)]
    vals = [np.ones(p.nbar)]
    kk, mm, ii, jj = np.meshgrid(np.arange(1, K), np.arange(M), np.arange(n_p), np.arange(n_p), indexing="ij")
    rows.append((kk * n + mm * n_p + ii).ravel())
    cols.append(((kk - 1) * n + mm * n_p + jj).ravel())
    vals.append(-Ap[1:].ravel())
    kk, mm, ii, jj = np.meshgrid(np.arange(K), np.arange(M), np.arange(n_p), np.arange(m_p), indexing="ij")
    rows.append((kk * n + mm * n_p + ii).ravel())
    cols.append((p.nbar + mm * p.mbar_p + kk * m_p + jj).ravel())
    vals.append(-Bp.ravel())
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(p.nbar, p.nz)
    )


def _dynamics_curvature(p: gm.GameProblem, X, U, mus) -> list:
    """For each multiplier trajectory in mus, d/dz [(dD/dz)^T mu] as a sparse nz x nz matrix.

    Per-player Jacobians are differentiated by central differences; linear models skip this.
    """
    from .dynamics import ModelKind

    if p.model.kind in (ModelKind.DOUBLE_INTEGRATOR_2D, ModelKind.DOUBLE_INTEGRATOR_3D):
        return [None] * len(mus)
    K, M, n, n_p, m_p = p.K, p.M, p.n, p.n_p, p.m_p
    nzp = n_p + m_p
    prev = np.vstack([p.x0[None], X[:-1]]).reshape(K * M, n_p)
    us = U.reshape(K * M, m_p)
    z = np.concatenate([prev, us], axis=1)
    step = 1e-6 if p.model.analytic_jacobians else 1e-4
    h = step * np.maximum(1.0, np.abs(z))
    Zp = np.repeat(z[None], nzp, axis=0)
    Zm = Zp.copy()
    idx = np.arange(nzp)
    Zp[idx, :, idx] += h.T
    Zm[idx, :, idx] -= h.T
    allz = np.concatenate([Zp, Zm]).reshape(-1, nzp)
    _, A, B = rk4_player_jac(p.model, allz[:, :n_p], allz[:, n_p:], p.dt)
    Jfull = np.concatenate([A, B], axis=2).reshape(2, nzp, K * M, n_p, nzp)
    dJ = (Jfull[0] - Jfull[1]) / (2.0 * h.T[:, :, None, None])  # (probe j, KM, i, col)
    # global column indices of (x_{k-1}, u_k) for each (k, player)
    kk, mm = np.meshgrid(np.arange(K), np.arange(M), indexing="ij")
    kk, mm = kk.ravel(), mm.ravel()
    xcols = (kk - 1)[:, None] * n + mm[:, None] * n_p + np.arange(n_p)[None]
    ucols = p.nbar + mm[:, None] * p.mbar_p + kk[:, None] * m_p + np.arange(m_p)[None]
    gcols = np.concatenate([xcols, ucols], axis=1)  # (KM, nzp)
    valid = np.concatenate([np.broadcast_to((kk > 0)[:, None], xcols.shape), np.ones_like(ucols, bool)], axis=1)
    out = []
    for mu in mus:
        mb = mu.reshape(K * M, n_p)
        # S[km, c, j] = - d/dz_j sum_i mu_i J_ic
        S = -np.einsum("jkic,ki->kcj", dJ, mb)
        S = 0.5 * (S + S.transpose(0, 2, 1))
        ok = valid[:, :, None] & valid[:, None, :]
        r = np.broadcast_to(gcols[:, :, None], S.shape)[ok]
        c = np.broadcast_to(gcols[:, None, :], S.shape)[ok]
        out.append(sp.csr_matrix((S[ok], (r, c)), shape=(p.nz, p.nz)))
    return out


def kkt_jacobian(lay: Layout, y, al: AlState, ev: Optional[Evaluation] = None) -> sp.csr_matrix:
    """Quasi-Newton Jacobian of the residual (constraint curvature dropped), sparse square."""
    p = lay.p
    ev = evaluate(lay, y, al) if ev is None else ev
    JC = ev.JC
    if JC.shape[0]:
        GN = (JC.T @ sp.diags(ev.weights) @ JC).tocsr()
    else:
        GN = sp.csr_matrix((p.nz, p.nz))
    JD = _dynamics_jacobian(p, ev.Ap, ev.Bp)
    curv = _dynamics_curvature(p, ev.X, ev.U, list(ev.mu))
    zc = lay.z_active
    blocks = []
    for ia, a in enumerate(lay.active):
        W = gm.cost_hessian_full(p, a, ev.X) + GN
        if curv[ia] is not None:
            W = W + curv[ia]
        rz = lay.z_rows[a]
        row = [W[rz][:, zc]]
        for ib in range(lay.Ma):
            row.append(JD[:, rz].T if ib == ia else None)
        blocks.append(row)
    blocks.append([JD[:, zc]] + [None] * lay.Ma)
    # bmat needs every block column to have a defined width
    H = sp.bmat(blocks, format="csr")
    if H.shape != (lay.size, lay.size):
        raise RuntimeError("assembled Jacobian has the wrong shape")
    return H


def player_lagrangian(lay: Layout, y, al: AlState, a: int, frozen_weights=None) -> float:
    """Scalar L^a = J^a + mu^a.D + lam.C + 1/2 C' I_rho C with I_rho optionally frozen."""
    p = lay.p
    X, U, mu = lay.split(y)
    ia = lay.active.index(a)
    C = gm._constraint_values(p, X, U)
    if frozen_weights is None:
        frozen_weights = np.zeros(C.size)
        w_all = penalty_activation(C, al.lam, al.rho, p.constraint_meta.n_ci)
        frozen_weights[lay.rows] = w_all[lay.rows]
    lam = np.zeros(C.size)
    lam[lay.rows] = al.lam[lay.rows]
    D = dynamics_defects(p, X, U)
    return (
        gm.player_cost(p, a, X, U)
        + float(np.sum(mu[ia] * D))
        + float(lam @ C)
        + 0.5 * float(C @ (frozen_weights * C))
    )


def player_al_gradient(lay: Layout, y, al: AlState, a: int) -> np.ndarray:
    """G^a, the gradient of player a's augmented Lagrangian over (X, U^a)."""
    ev = evaluate(lay, y, al)
    return ev.G[lay.g_slice(lay.active.index(a))].copy()
