"""Vehicle models, RK4 discretization and their Jacobians.

Every model acts on one player's state; the joint system stacks M copies of the
same model, so joint Jacobians are block diagonal. All per-player kernels are
vectorized over a leading batch axis (time knots, finite-difference probes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class ModelKind(str, Enum):
    UNICYCLE = "unicycle"
    BICYCLE = "bicycle"
    DOUBLE_INTEGRATOR_2D = "double_integrator_2d"
    DOUBLE_INTEGRATOR_3D = "double_integrator_3d"
    QUADROTOR = "quadrotor"


# (state dim, control dim, position indices)
_DIMS = {
    ModelKind.UNICYCLE: (4, 2, (0, 1)),
    ModelKind.BICYCLE: (4, 2, (0, 1)),
    ModelKind.DOUBLE_INTEGRATOR_2D: (4, 2, (0, 1)),
    ModelKind.DOUBLE_INTEGRATOR_3D: (6, 3, (0, 1, 2)),
    ModelKind.QUADROTOR: (12, 4, (0, 1, 2)),
}

_DEFAULT_PARAMS = {
    ModelKind.UNICYCLE: {},
    ModelKind.BICYCLE: {"wheelbase": 2.5},
    ModelKind.DOUBLE_INTEGRATOR_2D: {},
    ModelKind.DOUBLE_INTEGRATOR_3D: {},
    ModelKind.QUADROTOR: {"mass": 0.5, "ixx": 2.3e-3, "iyy": 2.3e-3, "izz": 4.0e-3, "gravity": 9.81},
}

GRAVITY = 9.81


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        merged = dict(_DEFAULT_PARAMS[kind])
        merged.update(self.params or {})
        for key, val in merged.items():
            if not val > 0:
                raise ValueError(f"model parameter {key} must be strictly positive, got {val}")
        object.__setattr__(self, "params", merged)

    @property
    def state_dim(self) -> int:
        return _DIMS[self.kind][0]

    @property
    def control_dim(self) -> int:
        return _DIMS[self.kind][1]

    @property
    def position_indices(self) -> tuple:
        return _DIMS[self.kind][2]

    @property
    def planar(self) -> bool:
        return len(self.position_indices) == 2

    @property
    def heading_index(self):
        if self.kind in (ModelKind.UNICYCLE, ModelKind.BICYCLE):
            return 2
        return None

    @property
    def velocity_index(self):
        """Index of the scalar speed, for models that carry one."""
        if self.kind in (ModelKind.UNICYCLE, ModelKind.BICYCLE):
            return 3
        return None

    @property
    def analytic_jacobians(self) -> bool:
        return self.kind != ModelKind.QUADROTOR


# ---------------------------------------------------------------------------
# continuous-time vector fields, batched: x (B, n), u (B, m)


def _unicycle(x, u, params, jac):
    th, v = x[:, 2], x[:, 3]
    c, s = np.cos(th), np.sin(th)
    f = np.stack([v * c, v * s, u[:, 0], u[:, 1]], axis=1)
    if not jac:
        return f
    B = x.shape[0]
    fx = np.zeros((B, 4, 4))
    fx[:, 0, 2] = -v * s
    fx[:, 0, 3] = c
    fx[:, 1, 2] = v * c
    fx[:, 1, 3] = s
    fu = np.zeros((B, 4, 2))
    fu[:, 2, 0] = 1.0
    fu[:, 3, 1] = 1.0
    return f, fx, fu


def _bicycle(x, u, params, jac):
    L = params["wheelbase"]
    th, v = x[:, 2], x[:, 3]
    delta = u[:, 0]
    c, s = np.cos(th), np.sin(th)
    t = np.tan(delta)
    f = np.stack([v * c, v * s, v * t / L, u[:, 1]], axis=1)
    if not jac:
        return f
    B = x.shape[0]
    fx = np.zeros((B, 4, 4))
    fx[:, 0, 2] = -v * s
    fx[:, 0, 3] = c
    fx[:, 1, 2] = v * c
    fx[:, 1, 3] = s
    fx[:, 2, 3] = t / L
    fu = np.zeros((B, 4, 2))
    fu[:, 2, 0] = v / (L * np.cos(delta) ** 2)
    fu[:, 3, 1] = 1.0
    return f, fx, fu


def _double_integrator(dim):
    def field_(x, u, params, jac):
        f = np.concatenate([x[:, dim:], u], axis=1)
        if not jac:
            return f
        B = x.shape[0]
        fx = np.zeros((B, 2 * dim, 2 * dim))
        fu = np.zeros((B, 2 * dim, dim))
        idx = np.arange(dim)
        fx[:, idx, dim + idx] = 1.0
        fu[:, dim + idx, idx] = 1.0
        return f, fx, fu

    return field_


def _quadrotor(x, u, params, jac):
    # state: position, roll/pitch/yaw, linear velocity, body rates
    # control: thrust offset from hover, body torques
    if jac:
        raise NotImplementedError("quadrotor Jacobians are finite-differenced")
    m, g = params["mass"], params["gravity"]
    inertia = np.array([params["ixx"], params["iyy"], params["izz"]])
    phi, theta, psi = x[:, 3], x[:, 4], x[:, 5]
    vel = x[:, 6:9]
    omega = x[:, 9:12]
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cps, sps = np.cos(psi), np.sin(psi)
    thrust = m * g + u[:, 0]
    # third column of R = Rz(psi) Ry(theta) Rx(phi)
    zb = np.stack([cps * sth * cph + sps * sph, sps * sth * cph - cps * sph, cth * cph], axis=1)
    acc = thrust[:, None] * zb / m
    acc[:, 2] -= g
    p, q, r = omega[:, 0], omega[:, 1], omega[:, 2]
    tth = np.tan(theta)
    euler_rates = np.stack(
        [p + (q * sph + r * cph) * tth, q * cph - r * sph, (q * sph + r * cph) / cth], axis=1
    )
    Jw = omega * inertia
    domega = (u[:, 1:4] - np.cross(omega, Jw)) / inertia
    return np.concatenate([vel, euler_rates, acc, domega], axis=1)


_FIELDS = {
    ModelKind.UNICYCLE: _unicycle,
    ModelKind.BICYCLE: _bicycle,
    ModelKind.DOUBLE_INTEGRATOR_2D: _double_integrator(2),
    ModelKind.DOUBLE_INTEGRATOR_3D: _double_integrator(3),
    ModelKind.QUADROTOR: _quadrotor,
}


def continuous(model: ModelSpec, x, u):
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    return _FIELDS[model.kind](x, u, model.params, False)


# ---------------------------------------------------------------------------
# per-player RK4 step and sensitivities, batched


def rk4_player(model: ModelSpec, x, u, dt):
    """One RK4 step of a single player's model; x (B, n), u (B, m)."""
    fld = _FIELDS[model.kind]
    p = model.params
    k1 = fld(x, u, p, False)
    k2 = fld(x + 0.5 * dt * k1, u, p, False)
    k3 = fld(x + 0.5 * dt * k2, u, p, False)
    k4 = fld(x + dt * k3, u, p, False)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_player_jac(model: ModelSpec, x, u, dt):
    """Return (x_next, A, B) for a batch of single-player states."""
    if not model.analytic_jacobians:
        return _fd_player_jac(model, x, u, dt)
    fld = _FIELDS[model.kind]
    p = model.params
    n = x.shape[1]
    eye = np.eye(n)[None]
    k1, a1, b1 = fld(x, u, p, True)
    dk1x, dk1u = a1, b1
    k2, a2, b2 = fld(x + 0.5 * dt * k1, u, p, True)
    dk2x = a2 @ (eye + 0.5 * dt * dk1x)
    dk2u = a2 @ (0.5 * dt * dk1u) + b2
    k3, a3, b3 = fld(x + 0.5 * dt * k2, u, p, True)
    dk3x = a3 @ (eye + 0.5 * dt * dk2x)
    dk3u = a3 @ (0.5 * dt * dk2u) + b3
    k4, a4, b4 = fld(x + dt * k3, u, p, True)
    dk4x = a4 @ (eye + dt * dk3x)
    dk4u = a4 @ (dt * dk3u) + b4
    xn = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    A = eye + dt / 6.0 * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    B = dt / 6.0 * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return xn, A, B


def _fd_player_jac(model, x, u, dt):
    n, m = x.shape[1], u.shape[1]
    z = np.concatenate([x, u], axis=1)
    h = 1e-6 * np.maximum(1.0, np.abs(z))
    cols = []
    for j in range(n + m):
        zp = z.copy()
        zm = z.copy()
        zp[:, j] += h[:, j]
        zm[:, j] -= h[:, j]
        fp = rk4_player(model, zp[:, :n], zp[:, n:], dt)
        fm = rk4_player(model, zm[:, :n], zm[:, n:], dt)
        cols.append((fp - fm) / (2.0 * h[:, j : j + 1]))
    J = np.stack(cols, axis=2)
    return rk4_player(model, x, u, dt), J[:, :, :n], J[:, :, n:]


# ---------------------------------------------------------------------------
# joint-state API


def _split(model: ModelSpec, x, u):
    n, m = model.state_dim, model.control_dim
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim != 1 or u.ndim != 1 or x.size % n or u.size % m or x.size // n != u.size // m:
        raise DimensionError(f"state of size {x.size} and control of size {u.size} do not fit {model.kind.value}")
    M = x.size // n
    return x.reshape(M, n), u.reshape(M, m), M


def player_count(model: ModelSpec, x) -> int:
    n = model.state_dim
    if np.size(x) % n:
        raise DimensionError(f"state of size {np.size(x)} is not a multiple of {n}")
    return np.size(x) // n


def step(model: ModelSpec, x, u, dt: float) -> np.ndarray:
    """Advance the joint state one RK4 step of length dt."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    xs, us, _ = _split(model, x, u)
    return rk4_player(model, xs, us, dt).ravel()


def linearize(model: ModelSpec, x, u, dt: float):
    """Joint (A, B) of the discrete step; block diagonal across players."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    xs, us, M = _split(model, x, u)
    _, Ap, Bp = rk4_player_jac(model, xs, us, dt)
    n, m = model.state_dim, model.control_dim
    A = np.zeros((M * n, M * n))
    B = np.zeros((M * n, M * m))
    for i in range(M):
        A[i * n : (i + 1) * n, i * n : (i + 1) * n] = Ap[i]
        B[i * n : (i + 1) * n, i * m : (i + 1) * m] = Bp[i]
    return A, B


def rollout(model: ModelSpec, x0, U, dt: float) -> np.ndarray:
    """States x_2..x_N obtained by applying the N-1 controls in U from x0."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    x = np.asarray(x0, dtype=float)
    out = np.empty((U.shape[0], x.size))
    for k in range(U.shape[0]):
        x = step(model, x, U[k], dt)
        out[k] = x
    return out


def wrap_heading(model: ModelSpec, x) -> np.ndarray:
    """Copy of a joint state (or trajectory) with headings mapped into (-pi, pi]."""
    x = np.array(x, dtype=float)
    h = model.heading_index
    if h is None:
        return x
    n = model.state_dim
    view = x.reshape(-1, n)
    view[:, h] = np.pi - np.mod(np.pi - view[:, h], 2.0 * np.pi)
    return x


def player_slices(model: ModelSpec, M: int):
    n, m = model.state_dim, model.control_dim
    return [slice(i * n, (i + 1) * n) for i in range(M)], [slice(i * m, (i + 1) * m) for i in range(M)]
