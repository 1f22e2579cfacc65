import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnep.dynamics import (
    DimensionError,
    ModelKind,
    ModelSpec,
    continuous,
    linearize,
    rk4_player,
    rk4_player_jac,
    rollout,
    step,
    wrap_heading,
)

KINDS = list(ModelKind)


def _random_state(model, rng):
    x = rng.normal(size=model.state_dim)
    if model.heading_index is not None:
        x[model.velocity_index] = rng.uniform(0.5, 12.0)
    if model.kind == ModelKind.QUADROTOR:
        x[3:6] *= 0.3  # moderate attitudes
    return x


def _random_control(model, rng):
    u = rng.normal(size=model.control_dim)
    if model.kind == ModelKind.BICYCLE:
        u[0] *= 0.3
    if model.kind == ModelKind.QUADROTOR:
        u[1:] *= 1e-2
    return u


def _complex_step_jac(model, x, u, dt):
    """Jacobian of the RK4 step by the complex-step method (independent of the analytic code)."""
    n, m = x.size, u.size
    z = np.concatenate([x, u]).astype(complex)
    J = np.zeros((n, n + m))
    h = 1e-30
    for j in range(n + m):
        zc = z.copy()
        zc[j] += 1j * h
        J[:, j] = rk4_player(model, zc[None, :n], zc[None, n:], dt)[0].imag / h
    return J[:, :n], J[:, n:]


@pytest.mark.parametrize("kind", KINDS)
def test_rk4_jacobians_match_complex_step(kind):
    model = ModelSpec(kind)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        x = _random_state(model, rng)
        u = _random_control(model, rng)
        _, A, B = rk4_player_jac(model, x[None], u[None], 0.1)
        Ac, Bc = _complex_step_jac(model, x, u, 0.1)
        scale = max(1.0, np.abs(Ac).max(), np.abs(Bc).max())
        worst = max(worst, np.abs(A[0] - Ac).max() / scale, np.abs(B[0] - Bc).max() / scale)
    assert worst <= 1e-5


@pytest.mark.parametrize("kind", KINDS)
def test_zero_dt_is_rejected(kind):
    model = ModelSpec(kind)
    with pytest.raises(ValueError):
        step(model, np.zeros(model.state_dim), np.zeros(model.control_dim), 0.0)


def test_dimension_mismatch():
    model = ModelSpec(ModelKind.UNICYCLE)
    with pytest.raises(DimensionError):
        step(model, np.zeros(5), np.zeros(2), 0.1)
    with pytest.raises(DimensionError):
        step(model, np.zeros(8), np.zeros(2), 0.1)


def test_nonpositive_parameter_rejected():
    with pytest.raises(ValueError):
        ModelSpec(ModelKind.BICYCLE, {"wheelbase": 0.0})
    with pytest.raises(ValueError):
        ModelSpec(ModelKind.QUADROTOR, {"mass": -1.0})


def test_unicycle_straight_line():
    model = ModelSpec(ModelKind.UNICYCLE)
    x = step(model, np.array([0.0, 0.0, 0.0, 2.0]), np.zeros(2), 0.5)
    assert np.allclose(x, [1.0, 0.0, 0.0, 2.0], atol=1e-12)


def test_double_integrator_is_exact():
    model = ModelSpec(ModelKind.DOUBLE_INTEGRATOR_2D)
    x0 = np.array([1.0, -2.0, 0.5, 0.25])
    u = np.array([0.3, -0.7])
    dt = 0.4
    x = step(model, x0, u, dt)
    expect = np.r_[x0[:2] + dt * x0[2:] + 0.5 * dt**2 * u, x0[2:] + dt * u]
    assert np.allclose(x, expect, atol=1e-14)


def test_quadrotor_hover_is_an_equilibrium():
    model = ModelSpec(ModelKind.QUADROTOR)
    x = np.zeros(12)
    x[2] = 1.5
    # thrust is an offset from hover
    assert np.allclose(step(model, x, np.zeros(4), 0.1), x, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(M=st.integers(1, 4), seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(KINDS))
def test_joint_step_is_blockwise(M, seed, kind):
    model = ModelSpec(kind)
    rng = np.random.default_rng(seed)
    xs = [_random_state(model, rng) for _ in range(M)]
    us = [_random_control(model, rng) for _ in range(M)]
    joint = step(model, np.concatenate(xs), np.concatenate(us), 0.05)
    single = np.concatenate([step(model, x, u, 0.05) for x, u in zip(xs, us)])
    assert np.array_equal(joint, single)
    A, B = linearize(model, np.concatenate(xs), np.concatenate(us), 0.05)
    n, m = model.state_dim, model.control_dim
    mask_a = np.kron(np.eye(M), np.ones((n, n))) == 0
    mask_b = np.kron(np.eye(M), np.ones((n, m))) == 0
    assert np.all(A[mask_a] == 0) and np.all(B[mask_b] == 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), K=st.integers(1, 12))
def test_rollout_matches_repeated_step(seed, K):
    model = ModelSpec(ModelKind.UNICYCLE)
    rng = np.random.default_rng(seed)
    x0 = np.concatenate([_random_state(model, rng) for _ in range(2)])
    U = rng.normal(size=(K, 4))
    X = rollout(model, x0, U, 0.1)
    x = x0
    for k in range(K):
        x = step(model, x, U[k], 0.1)
        assert np.array_equal(X[k], x)


@settings(max_examples=50, deadline=None)
@given(theta=st.floats(-50, 50))
def test_wrap_heading_range(theta):
    model = ModelSpec(ModelKind.UNICYCLE)
    x = wrap_heading(model, np.array([0.0, 0.0, theta, 1.0]))
    assert -np.pi < x[2] <= np.pi
    assert np.isclose(np.cos(x[2]), np.cos(theta)) and np.isclose(np.sin(x[2]), np.sin(theta))


def test_continuous_batch_shapes():
    model = ModelSpec(ModelKind.DOUBLE_INTEGRATOR_3D)
    f = continuous(model, np.zeros((5, 6)), np.ones((5, 3)))
    assert f.shape == (5, 6)
    assert np.allclose(f[:, 3:], 1.0)
