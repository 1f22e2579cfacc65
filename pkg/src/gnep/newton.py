"""Regularized Newton root-finding on the stacked residual, wrapped in the AL outer loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import alcore as alc
from . import game as gm

log = logging.getLogger(__name__)

CONVERGED = "Converged"
MAX_ITERS = "MaxIters"
LINE_SEARCH_STALL = "LineSearchStall"

DENSE, SPARSE, STRUCTURED = "dense", "sparse", "structured"


class SingularKkt(RuntimeError):
    pass


class LineSearchStall(RuntimeError):
    pass


@dataclass
class SolverOptions:
    beta: float = 0.01
    tau: float = 0.5
    alpha_min: float = 1e-8
    inner_max_iters: int = 50
    outer_max_iters: int = 20
    reg: float = 1e-6
    refine_steps: int = 2
    tol_residual: float = 1e-2
    tol_constraint: float = 1e-3
    linear_solver: str = STRUCTURED
    rho0: float = 1.0
    gamma_pen: float = 10.0
    plateau_window: int = 5
    plateau_tol: float = 1e-10

    def __post_init__(self):
        if not 0 < self.beta < 0.5:
            raise ValueError("beta must lie in (0, 1/2)")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.tol_residual <= 0 or self.tol_constraint <= 0:
            raise ValueError("tolerances must be positive")
        if self.reg < 0:
            raise ValueError("regularization must be nonnegative")
        if self.linear_solver not in (DENSE, SPARSE, STRUCTURED):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class InnerReport:
    iters: int = 0
    status: str = MAX_ITERS
    residual: float = np.inf
    trace: list = field(default_factory=list)  # (residual, violation, alpha)
    linear_solves: int = 0


@dataclass
class SolveReport:
    status: str
    outer_iters: int
    inner_iters_total: int
    final_residual_l1: float
    max_constraint_violation: float
    trace: list = field(default_factory=list)
    dual_trace: list = field(default_factory=list)
    linear_solves: int = 0
    al: Optional[alc.AlState] = None

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def summary(self) -> dict:
        return {
            "status": self.status,
            "outer_iters": self.outer_iters,
            "inner_iters": self.inner_iters_total,
            "residual_l1": self.final_residual_l1,
            "max_violation": self.max_constraint_violation,
        }


# ---------------------------------------------------------------------------
# linear algebra


@dataclass
class BlockTridiagonal:
    """Square block-tridiagonal matrix: diag[k], lower[k] = A[k+1, k], upper[k] = A[k, k+1]."""

    diag: list
    lower: list
    upper: list

    @property
    def sizes(self):
        return [d.shape[0] for d in self.diag]

    def to_dense(self) -> np.ndarray:
        off = np.concatenate([[0], np.cumsum(self.sizes)])
        A = np.zeros((off[-1], off[-1]))
        for k, d in enumerate(self.diag):
            A[off[k] : off[k + 1], off[k] : off[k + 1]] = d
        for k, (lo, up) in enumerate(zip(self.lower, self.upper)):
            A[off[k + 1] : off[k + 2], off[k] : off[k + 1]] = lo
            A[off[k] : off[k + 1], off[k + 1] : off[k + 2]] = up
        return A


class BandBroken(ValueError):
    pass


def stage_blocks(A: sp.spmatrix, row_stage, col_stage) -> tuple:
    """Permute A by stage and cut it into a BlockTridiagonal; raises BandBroken otherwise."""
    row_stage = np.asarray(row_stage)
    col_stage = np.asarray(col_stage)
    rp = np.argsort(row_stage, kind="stable")
    cp = np.argsort(col_stage, kind="stable")
    coo = A.tocoo()
    if coo.nnz and np.abs(row_stage[coo.row] - col_stage[coo.col]).max() > 1:
        raise BandBroken("coupling beyond neighbouring stages")
    S = int(row_stage.max()) + 1
    rs = np.bincount(row_stage, minlength=S)
    cs = np.bincount(col_stage, minlength=S)
    if np.any(rs != cs):
        raise BandBroken("stage row and column counts differ")
    off = np.concatenate([[0], np.cumsum(rs)])
    # local position of every row / column inside its stage
    rloc = np.empty_like(row_stage)
    rloc[rp] = np.arange(rp.size) - off[row_stage[rp]]
    cloc = np.empty_like(col_stage)
    cloc[cp] = np.arange(cp.size) - off[col_stage[cp]]
    diag = [np.zeros((rs[k], rs[k])) for k in range(S)]
    lower = [np.zeros((rs[k + 1], rs[k])) for k in range(S - 1)]
    upper = [np.zeros((rs[k], rs[k + 1])) for k in range(S - 1)]
    rsk, csk = row_stage[coo.row], col_stage[coo.col]
    for target, sel_fn in ((diag, lambda: rsk == csk), (lower, lambda: rsk == csk + 1), (upper, lambda: rsk + 1 == csk)):
        sel = sel_fn()
        if not sel.any():
            continue
        kk = np.minimum(rsk[sel], csk[sel])
        rr, cc, vv = rloc[coo.row[sel]], cloc[coo.col[sel]], coo.data[sel]
        order = np.argsort(kk, kind="stable")
        kk, rr, cc, vv = kk[order], rr[order], cc[order], vv[order]
        bounds = np.searchsorted(kk, np.arange(len(target) + 1))
        for k in range(len(target)):
            a, b = bounds[k], bounds[k + 1]
            if a < b:
                np.add.at(target[k], (rr[a:b], cc[a:b]), vv[a:b])
    return BlockTridiagonal(diag, lower, upper), rp, cp


def block_factor(blocks: BlockTridiagonal):
    """Block LU of a BlockTridiagonal: forward elimination of the sub-diagonal blocks."""
    S = len(blocks.diag)
    facs, Ws = [], []
    for k in range(S):
        Dk = blocks.diag[k]
        if k > 0:
            Dk = Dk - blocks.lower[k - 1] @ Ws[k - 1]
        if not np.all(np.isfinite(Dk)):
            raise SingularKkt(f"non-finite Schur block at stage {k}")
        fac = sla.lu_factor(Dk, check_finite=False)
        if np.min(np.abs(np.diag(fac[0]))) <= 1e-14 * max(1.0, np.abs(Dk).max()):
            raise SingularKkt(f"stage {k} pivot block is singular")
        facs.append(fac)
        Ws.append(sla.lu_solve(fac, blocks.upper[k]) if k + 1 < S else None)
    return blocks, facs, Ws


def block_solve(factored, g) -> np.ndarray:
    blocks, facs, Ws = factored
    g = np.asarray(g, float)
    off = np.concatenate([[0], np.cumsum(blocks.sizes)])
    S = len(facs)
    z = []
    for k in range(S):
        gk = g[off[k] : off[k + 1]]
        if k > 0:
            gk = gk - blocks.lower[k - 1] @ z[k - 1]
        z.append(sla.lu_solve(facs[k], gk))
    x = np.empty_like(g)
    xk = z[-1]
    x[off[S - 1] : off[S]] = xk
    for k in range(S - 2, -1, -1):
        xk = z[k] - Ws[k] @ xk
        x[off[k] : off[k + 1]] = xk
    return x


def structured_solve(blocks: BlockTridiagonal, g) -> np.ndarray:
    """Solve blocks @ x = g by block elimination and back-substitution.

    This is the stage-wise recursion: cost is linear in the number of stages and
    cubic in the stage size.
    """
    return block_solve(block_factor(blocks), g)


def _factorize(A, solver, stages):
    """Return a function rhs -> A^{-1} rhs."""
    if solver == STRUCTURED and stages is not None:
        try:
            blocks, rp, cp = stage_blocks(A, *stages)
        except BandBroken:
            log.debug("stage band broken, falling back to a dense solve")
        else:
            fac = block_factor(blocks)

            def solve(rhs):
                xp = block_solve(fac, rhs[rp])
                x = np.empty_like(xp)
                x[cp] = xp
                return x

            return solve
        solver = DENSE
    if solver in (DENSE, STRUCTURED):
        Ad = A.toarray() if sp.issparse(A) else np.asarray(A)
        try:
            lu = sla.lu_factor(Ad, check_finite=True)
        except (ValueError, sla.LinAlgError) as exc:
            raise SingularKkt(str(exc)) from exc
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * max(1.0, np.abs(Ad).max()):
            raise SingularKkt("dense LU hit a zero pivot")
        return lambda rhs: sla.lu_solve(lu, rhs)
    try:
        lu = spla.splu(sp.csc_matrix(A))
    except RuntimeError as exc:
        raise SingularKkt(str(exc)) from exc
    return lu.solve


def newton_step(H, G, reg: float = 0.0, n_primal: Optional[int] = None, solver: str = SPARSE,
                refine_steps: int = 0, stages=None) -> np.ndarray:
    """Solve (H + reg*I_s) dy = -G, I_s = +1 on primal and -1 on dual entries.

    With refine_steps > 0 the regularized factorization is reused for iterative
    refinement against the unregularized H.
    """
    G = np.asarray(G, float)
    size = G.size
    if H.shape != (size, size):
        raise ValueError(f"H of shape {H.shape} does not match residual of size {size}")
    sig = np.ones(size)
    if n_primal is not None:
        sig[n_primal:] = -1.0
    if solver == STRUCTURED and stages is not None:
        # pair the j-th row and j-th column of every stage so the shift stays inside the band
        rows = np.argsort(np.asarray(stages[0]), kind="stable")
        cols = np.argsort(np.asarray(stages[1]), kind="stable")
        shift = sp.csr_matrix((reg * sig[cols], (rows, cols)), shape=(size, size))
    else:
        shift = sp.diags(reg * sig)
    A = (sp.csr_matrix(H) + shift).tocsr() if sp.issparse(H) else np.asarray(H) + shift.toarray()
    solve = _factorize(A, solver, stages)
    dy = solve(-G)
    if not np.all(np.isfinite(dy)):
        raise SingularKkt("non-finite Newton step")
    for _ in range(refine_steps):
        r = -G - H @ dy
        corr = solve(r)
        if not np.all(np.isfinite(corr)):
            break
        dy = dy + corr
    return dy


def regularized_step(H, G, opts: SolverOptions, lay: alc.Layout) -> np.ndarray:
    """newton_step with the regularization escalated x10 up to 1e-2 on singularity."""
    reg = opts.reg
    stages = stage_index(lay) if opts.linear_solver == STRUCTURED else None
    while True:
        try:
            return newton_step(H, G, reg, lay.n_primal, opts.linear_solver, opts.refine_steps, stages)
        except SingularKkt:
            if reg >= 1e-2:
                raise
            reg = max(10.0 * reg, 1e-8)


def stage_index(lay: alc.Layout):
    """Stage of every residual row and every decision entry of a layout."""
    p = lay.p
    K, n, m_p = p.K, p.n, p.m_p
    xs = np.repeat(np.arange(K), n)
    us = np.repeat(np.arange(K), m_p)
    cols = np.concatenate([xs] + [us] * lay.Ma + [xs] * lay.Ma)
    rows = np.concatenate([np.concatenate([xs, us])] * lay.Ma + [xs])
    return rows, cols


# ---------------------------------------------------------------------------
# Newton iterations


def _violation(lay: alc.Layout, C) -> float:
    if not lay.rows.size:
        return 0.0
    rows = lay.rows
    ineq = rows[rows < lay.n_ci]
    eq = rows[rows >= lay.n_ci]
    v = 0.0
    if ineq.size:
        v = max(v, float(np.maximum(0.0, C[ineq]).max()))
    if eq.size:
        v = max(v, float(np.abs(C[eq]).max()))
    return v


def line_search(lay: alc.Layout, y, al: alc.AlState, G, dy, opts: SolverOptions):
    """Backtracking on the l1 norm of the residual; returns (alpha, y_new, evaluation)."""
    r0 = float(np.abs(G).sum())
    if not r0 > 0:
        raise LineSearchStall("residual already zero")
    alpha = 1.0
    while alpha >= opts.alpha_min:
        yt = y + alpha * dy
        ev = alc.evaluate(lay, yt, al)
        r = float(np.abs(ev.G).sum())
        if np.isfinite(r) and r < (1.0 - alpha * opts.beta) * r0:
            return alpha, yt, ev
        alpha *= opts.tau
    raise LineSearchStall("no acceptable step length")


def inner_solve(lay: alc.Layout, y, al: alc.AlState, opts: SolverOptions):
    """Newton's method on G(y) = 0 for fixed multipliers and penalties."""
    rep = InnerReport()
    y = np.array(y, dtype=float)
    ev = alc.evaluate(lay, y, al)
    r = float(np.abs(ev.G).sum())
    rep.residual = r
    history = [r]
    if r <= opts.tol_residual:
        rep.status = CONVERGED
        return y, ev, rep
    for _ in range(opts.inner_max_iters):
        H = alc.kkt_jacobian(lay, y, al, ev)
        try:
            dy = regularized_step(H, ev.G, opts, lay)
            rep.linear_solves += 1 + opts.refine_steps
            alpha, y, ev = line_search(lay, y, al, ev.G, dy, opts)
        except (SingularKkt, LineSearchStall) as exc:
            log.debug("inner solve stopped: %s", exc)
            rep.status = LINE_SEARCH_STALL
            return y, ev, rep
        r = float(np.abs(ev.G).sum())
        rep.iters += 1
        rep.trace.append((r, _violation(lay, ev.C), alpha))
        rep.residual = r
        history.append(r)
        if r <= opts.tol_residual:
            rep.status = CONVERGED
            return y, ev, rep
        w = opts.plateau_window
        if len(history) > w and history[-w - 1] - r < opts.plateau_tol:
            rep.status = LINE_SEARCH_STALL
            return y, ev, rep
    rep.status = MAX_ITERS
    return y, ev, rep


def solve_layout(lay: alc.Layout, init: alc.PrimalDualPoint, opts: SolverOptions, al: Optional[alc.AlState] = None):
    """ALGAMES outer loop on an arbitrary (possibly restricted) layout."""
    p = lay.p
    al = alc.AlState.initial(p.constraint_meta.size, opts.rho0, opts.gamma_pen) if al is None else al.copy()
    y = lay.pack(init)
    trace, dual_trace = [], []
    inner_total = 0
    solves = 0
    status = MAX_ITERS
    res, viol = np.inf, np.inf
    last_inner = None
    outer = 0
    for outer in range(1, opts.outer_max_iters + 1):
        y, ev, inner = inner_solve(lay, y, al, opts)
        last_inner = inner
        inner_total += inner.iters
        solves += inner.linear_solves
        trace.extend(inner.trace)
        res = float(np.abs(ev.G).sum())
        viol = _violation(lay, ev.C)
        if res <= opts.tol_residual and viol <= opts.tol_constraint:
            status = CONVERGED
            dual_trace.append({"C": ev.C.copy(), "rho": al.rho.copy(), "lam": al.lam.copy(), "final": True})
            break
        new_lam = alc.dual_ascent(al, ev.C, lay.n_ci, lay.rows)
        dual_trace.append({"C": ev.C.copy(), "rho": al.rho.copy(), "lam": al.lam.copy(), "final": False})
        al.lam = new_lam
        al.rho = alc.penalty_schedule(al, lay.rows)
    if status != CONVERGED and last_inner is not None and last_inner.status == LINE_SEARCH_STALL:
        status = LINE_SEARCH_STALL
    point = lay.unpack(y, init)
    rep = SolveReport(status, outer, inner_total, res, viol, trace, dual_trace, solves, al)
    return point, rep


def solve(p: gm.GameProblem, init: Optional[alc.PrimalDualPoint] = None, opts: Optional[SolverOptions] = None,
          al: Optional[alc.AlState] = None):
    """Solve the full game; initial guess defaults to the zero-control rollout with mu = 0."""
    opts = SolverOptions() if opts is None else opts
    init = alc.initial_point(p) if init is None else init
    return solve_layout(alc.Layout(p), init, opts, al)
