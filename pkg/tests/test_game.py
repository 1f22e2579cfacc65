import numpy as np
import pytest
from conftest import central_diff, rel_err, small_game
from hypothesis import given, settings
from hypothesis import strategies as st

from gnep import game as gm
from gnep.dynamics import DimensionError, ModelKind, ModelSpec


def _z(p, rng):
    X = rng.normal(size=(p.K, p.n)) * 3
    U = rng.normal(size=(p.K, p.m))
    return p.join(X, U)


def test_cost_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        p = small_game(rng)
        z = _z(p, rng)
        for nu in range(p.M):
            g = gm.cost_gradient_full(p, nu, *p.split(z))
            fd = central_diff(lambda v: gm.player_cost(p, nu, *p.split(v)), z)[0]
            worst = max(worst, rel_err(g, fd))
    assert worst <= 1e-5


def test_cost_hessians_match_finite_differences():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        p = small_game(rng)
        z = _z(p, rng)
        for nu in range(p.M):
            H = gm.cost_hessian_full(p, nu, p.split(z)[0]).toarray()
            fd = central_diff(lambda v: gm.cost_gradient_full(p, nu, *p.split(v)), z)
            worst = max(worst, rel_err(H, fd))
    assert worst <= 1e-5


def test_constraint_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        p = small_game(rng)
        z = _z(p, rng)
        J = gm.constraint_jacobian(p, *p.split(z)).toarray()
        fd = central_diff(lambda v: gm.eval_constraints(p, *p.split(v))[0], z)
        worst = max(worst, rel_err(J, fd))
    assert worst <= 1e-5


def test_player_gradient_is_restricted_full_gradient():
    rng = np.random.default_rng(3)
    p = small_game(rng)
    X, U = p.split(_z(p, rng))
    for nu in range(p.M):
        full = gm.cost_gradient_full(p, nu, X, U)
        own = gm.player_cost_gradient(p, nu, X, U)
        idx = np.r_[np.arange(p.nbar), p.u_offset(nu) + np.arange(p.mbar_p)]
        assert np.allclose(own, full[idx])


def test_constraint_meta_layout():
    p = small_game(np.random.default_rng(4))
    meta = p.constraint_meta
    K, M = p.K, p.M
    n_coll = K * M * (M - 1) // 2
    n_bound = K * M * 2
    n_ctrl = K * M * 2 * p.m_p
    assert meta.n_ci == n_coll + n_bound + n_ctrl
    assert meta.n_ce == 1
    assert np.all(meta.kind[:n_coll] == gm.COLLISION)
    assert np.all(meta.p2[:n_coll] >= 0)
    assert np.all(meta.p2[n_coll:] == -1)
    C, _ = gm.eval_constraints(p, *p.split(np.zeros(p.nz)))
    assert C.size == meta.size


def test_coincident_players_violate_collision():
    p = small_game(np.random.default_rng(5), prox=False, equalities=False)
    X = np.zeros((p.K, p.n))
    C, meta = gm.eval_constraints(p, X, np.zeros((p.K, p.m)))
    coll = C[meta.kind == gm.COLLISION]
    assert np.allclose(coll, (2 * p.constraints.radius) ** 2)


def test_separated_players_satisfy_collision():
    p = small_game(np.random.default_rng(6), prox=False, equalities=False)
    X = np.zeros((p.K, p.n))
    for nu in range(p.M):
        X[:, nu * p.n_p] = 10.0 * nu
    C, meta = gm.eval_constraints(p, X, np.zeros((p.K, p.m)))
    assert np.all(C[meta.kind == gm.COLLISION] < 0)


def test_violation_measure():
    p = small_game(np.random.default_rng(7))
    meta = p.constraint_meta
    C = -np.ones(meta.size)
    C[meta.n_ci] = -0.25  # equality row counts with its absolute value
    assert gm.constraint_violation(p, C) == 0.25
    C[0] = 0.5
    assert gm.constraint_violation(p, C) == 0.5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_split_join_roundtrip(seed):
    rng = np.random.default_rng(seed)
    p = small_game(rng)
    z = rng.normal(size=p.nz)
    assert np.array_equal(p.join(*p.split(z)), z)


def test_objective_validation():
    model = ModelSpec(ModelKind.UNICYCLE)
    with pytest.raises(ValueError):
        gm.PlayerObjective(-np.eye(4), np.eye(2), np.eye(4), np.zeros(4))
    with pytest.raises(ValueError):
        gm.PlayerObjective(np.eye(4), np.zeros((2, 2)), np.eye(4), np.zeros(4))
    ob = gm.quadratic_objective(model, 1, 0, np.zeros(4), np.ones(4), np.ones(2))
    with pytest.raises(DimensionError):
        gm.GameProblem(model, 1, 5, 0.1, np.zeros(3), [ob])
    with pytest.raises(ValueError):
        gm.ConstraintSet(radius=0.0)
    with pytest.raises(ValueError):
        gm.ConstraintSet(radius=1.0, boundaries=(((0, 0), (0, 0)),))


def test_proximity_cost_is_zero_outside_radius():
    rng = np.random.default_rng(8)
    p = small_game(rng)
    X = np.zeros((p.K, p.n))
    for nu in range(p.M):
        X[:, nu * p.n_p] = 100.0 * nu
    U = np.zeros((p.K, p.m))
    q = p.replace(objectives=tuple(
        gm.PlayerObjective(o.Q, o.R, o.Qf, o.xf) for o in p.objectives
    ))
    for nu in range(p.M):
        assert gm.player_cost(p, nu, X, U) == pytest.approx(gm.player_cost(q, nu, X, U))
