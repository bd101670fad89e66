"""Quadrotor rigid-body model: rotor mixing, linear drag, RK4 integration.

State layout used by every kernel in the package (13 entries)::

    [px, py, pz, qw, qx, qy, qz, vx, vy, vz, wx, wy, wz]

Position and velocity live in the world frame, body rates in the body frame.
``R(q)`` maps body vectors into the world frame.  The rotation matrix is the
homogeneous quadratic form in ``q`` so the model and its Jacobians stay
consistent off the unit sphere.

Model parameters are packed into a flat float array for the numba kernels
(see :meth:`QuadParams.as_array`)::

    [m, Jx, Jy, Jz, l, c_tau, dx, dy, dz, gx, gy, gz]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

SQRT1_2 = 1.0 / math.sqrt(2.0)
NX = 13


class InvalidStateError(ValueError):
    """Raised when a state contains non-finite entries."""


class SimulationDivergedError(RuntimeError):
    """Raised when integration produces a non-finite state."""


@dataclass(frozen=True)
class QuadParams:
    mass: float = 0.75
    inertia: tuple[float, float, float] = (2.5e-3, 2.1e-3, 4.3e-3)
    arm_length: float = 0.15
    torque_constant: float = 0.022
    drag: tuple[float, float, float] = (0.3, 0.3, 0.15)
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    thrust_min: float = 0.0
    thrust_max: float = 8.0
    body_rate_max: tuple[float, float, float] = (12.0, 12.0, 6.0)

    def __post_init__(self):
        object.__setattr__(self, "inertia", tuple(float(v) for v in self.inertia))
        object.__setattr__(self, "drag", tuple(float(v) for v in self.drag))
        object.__setattr__(self, "gravity", tuple(float(v) for v in self.gravity))
        object.__setattr__(self, "body_rate_max", tuple(float(v) for v in self.body_rate_max))
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if len(self.inertia) != 3 or min(self.inertia) <= 0:
            raise ValueError("inertia diagonal entries must be positive")
        if not self.arm_length > 0:
            raise ValueError("arm_length must be positive")
        if not self.torque_constant > 0:
            raise ValueError("torque_constant must be positive")
        if len(self.drag) != 3 or min(self.drag) < 0:
            raise ValueError("drag coefficients must be non-negative")
        if not 0 <= self.thrust_min < self.thrust_max:
            raise ValueError("thrust bounds must satisfy 0 <= thrust_min < thrust_max")
        if len(self.body_rate_max) != 3 or min(self.body_rate_max) <= 0:
            raise ValueError("body_rate_max entries must be positive")

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust that balances gravity."""
        return self.mass * float(np.linalg.norm(self.gravity)) / 4.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.mass, *self.inertia, self.arm_length, self.torque_constant, *self.drag, *self.gravity],
            dtype=np.float64,
        )

    def replace(self, **changes) -> "QuadParams":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return QuadParams(**values)


@dataclass(frozen=True)
class QuadState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    body_rates: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.attitude, self.velocity, self.body_rates]).astype(np.float64)

    @classmethod
    def from_array(cls, x) -> "QuadState":
        x = np.asarray(x, dtype=np.float64)
        return cls(x[0:3].copy(), x[3:7].copy(), x[7:10].copy(), x[10:13].copy())


@dataclass(frozen=True)
class Wrench:
    thrust: float
    torque: np.ndarray


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def rot_apply(qw, qx, qy, qz, a0, a1, a2, out):
    """out = R(q) a."""
    s = qw * qw - (qx * qx + qy * qy + qz * qz)
    ua = qx * a0 + qy * a1 + qz * a2
    # u x a
    c0 = qy * a2 - qz * a1
    c1 = qz * a0 - qx * a2
    c2 = qx * a1 - qy * a0
    out[0] = s * a0 + 2.0 * ua * qx + 2.0 * qw * c0
    out[1] = s * a1 + 2.0 * ua * qy + 2.0 * qw * c1
    out[2] = s * a2 + 2.0 * ua * qz + 2.0 * qw * c2


@njit(cache=True)
def rot_apply_jac(qw, qx, qy, qz, a, out):
    """out (3x4) = d(R(q) a)/dq for fixed a."""
    ux, uy, uz = qx, qy, qz
    a0, a1, a2 = a[0], a[1], a[2]
    ua = ux * a0 + uy * a1 + uz * a2
    # d/dw = 2 w a + 2 u x a
    out[0, 0] = 2.0 * qw * a0 + 2.0 * (uy * a2 - uz * a1)
    out[1, 0] = 2.0 * qw * a1 + 2.0 * (uz * a0 - ux * a2)
    out[2, 0] = 2.0 * qw * a2 + 2.0 * (ux * a1 - uy * a0)
    # d/du = -2 a u^T + 2 (u.a) I + 2 u a^T - 2 w [a]x
    u = (ux, uy, uz)
    av = (a0, a1, a2)
    for i in range(3):
        for j in range(3):
            val = -2.0 * av[i] * u[j] + 2.0 * u[i] * av[j]
            if i == j:
                val += 2.0 * ua
            out[i, 1 + j] = val
    # -2 w [a]x, [a]x = [[0,-a2,a1],[a2,0,-a0],[-a1,a0,0]]
    out[0, 2] += 2.0 * qw * a2
    out[0, 3] -= 2.0 * qw * a1
    out[1, 1] -= 2.0 * qw * a2
    out[1, 3] += 2.0 * qw * a0
    out[2, 1] += 2.0 * qw * a1
    out[2, 2] -= 2.0 * qw * a0


@njit(cache=True)
def mix(f, model, out):
    """Collective thrust and body torques from single-rotor thrusts.

    out = [f_T, tau_x, tau_y, tau_z].
    """
    k = model[4] * SQRT1_2
    ct = model[5]
    out[0] = f[0] + f[1] + f[2] + f[3]
    out[1] = k * (f[0] + f[1] - f[2] - f[3])
    out[2] = k * (-f[0] + f[1] + f[2] - f[3])
    out[3] = ct * (f[0] - f[1] + f[2] - f[3])


@njit(cache=True)
def deriv(x, f, model, drag_scale, out):
    """Continuous-time state derivative for single-rotor thrust input f."""
    m = model[0]
    jx, jy, jz = model[1], model[2], model[3]
    k = model[4] * SQRT1_2
    ct = model[5]
    qw, qx, qy, qz = x[3], x[4], x[5], x[6]
    vx, vy, vz = x[7], x[8], x[9]
    wx, wy, wz = x[10], x[11], x[12]
    ft = f[0] + f[1] + f[2] + f[3]
    tx = k * (f[0] + f[1] - f[2] - f[3])
    ty = k * (-f[0] + f[1] + f[2] - f[3])
    tz = ct * (f[0] - f[1] + f[2] - f[3])

    out[0] = vx
    out[1] = vy
    out[2] = vz

    tmp = np.empty(3)
    # thrust direction R e3
    rot_apply(qw, qx, qy, qz, 0.0, 0.0, 1.0, tmp)
    ax = model[9] + tmp[0] * ft / m
    ay = model[10] + tmp[1] * ft / m
    az = model[11] + tmp[2] * ft / m
    # drag: R D R^T v
    rot_apply(qw, -qx, -qy, -qz, vx, vy, vz, tmp)
    b0 = model[6] * drag_scale * tmp[0]
    b1 = model[7] * drag_scale * tmp[1]
    b2 = model[8] * drag_scale * tmp[2]
    rot_apply(qw, qx, qy, qz, b0, b1, b2, tmp)
    out[7] = ax - tmp[0]
    out[8] = ay - tmp[1]
    out[9] = az - tmp[2]

    out[3] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[4] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[5] = 0.5 * (qw * wy + qz * wx - qx * wz)
    out[6] = 0.5 * (qw * wz + qx * wy - qy * wx)

    hx, hy, hz = jx * wx, jy * wy, jz * wz
    out[10] = (tx - (wy * hz - wz * hy)) / jx
    out[11] = (ty - (wz * hx - wx * hz)) / jy
    out[12] = (tz - (wx * hy - wy * hx)) / jz


@njit(cache=True)
def deriv_jac(x, f, model, drag_scale, A, B):
    """Jacobians A = d xdot / dx (13x13) and B = d xdot / df (13x4)."""
    m = model[0]
    jx, jy, jz = model[1], model[2], model[3]
    k = model[4] * SQRT1_2
    ct = model[5]
    d0, d1, d2 = model[6] * drag_scale, model[7] * drag_scale, model[8] * drag_scale
    qw, qx, qy, qz = x[3], x[4], x[5], x[6]
    wx, wy, wz = x[10], x[11], x[12]
    ft = f[0] + f[1] + f[2] + f[3]
    A[:, :] = 0.0
    B[:, :] = 0.0
    A[0, 7] = 1.0
    A[1, 8] = 1.0
    A[2, 9] = 1.0

    e3 = np.zeros(3)
    e3[2] = 1.0
    jq = np.empty((3, 4))
    rot_apply_jac(qw, qx, qy, qz, e3, jq)
    for i in range(3):
        for j in range(4):
            A[7 + i, 3 + j] = jq[i, j] * ft / m

    # drag term -R D R^T v
    v = x[7:10]
    rtv = np.empty(3)
    rot_apply(qw, -qx, -qy, -qz, v[0], v[1], v[2], rtv)
    c = np.empty(3)
    c[0] = d0 * rtv[0]
    c[1] = d1 * rtv[1]
    c[2] = d2 * rtv[2]
    # d(R c)/dq with c fixed
    rot_apply_jac(qw, qx, qy, qz, c, jq)
    # R D d(R^T v)/dq
    jt = np.empty((3, 4))
    rot_apply_jac(qw, -qx, -qy, -qz, v, jt)
    for i in range(3):
        jt[i, 1] = -jt[i, 1]
        jt[i, 2] = -jt[i, 2]
        jt[i, 3] = -jt[i, 3]
    R = np.empty((3, 3))
    col = np.empty(3)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        rot_apply(qw, qx, qy, qz, e[0], e[1], e[2], col)
        R[0, j] = col[0]
        R[1, j] = col[1]
        R[2, j] = col[2]
    dd = (d0, d1, d2)
    for i in range(3):
        for j in range(4):
            acc = jq[i, j]
            for l in range(3):
                acc += R[i, l] * dd[l] * jt[l, j]
            A[7 + i, 3 + j] -= acc
    # d/dv: -R D R^T
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for l in range(3):
                acc += R[i, l] * dd[l] * R[j, l]
            A[7 + i, 7 + j] = -acc

    # quaternion kinematics
    A[3, 4] = -0.5 * wx
    A[3, 5] = -0.5 * wy
    A[3, 6] = -0.5 * wz
    A[4, 3] = 0.5 * wx
    A[4, 5] = 0.5 * wz
    A[4, 6] = -0.5 * wy
    A[5, 3] = 0.5 * wy
    A[5, 4] = -0.5 * wz
    A[5, 6] = 0.5 * wx
    A[6, 3] = 0.5 * wz
    A[6, 4] = 0.5 * wy
    A[6, 5] = -0.5 * wx
    A[3, 10] = -0.5 * qx
    A[3, 11] = -0.5 * qy
    A[3, 12] = -0.5 * qz
    A[4, 10] = 0.5 * qw
    A[4, 11] = -0.5 * qz
    A[4, 12] = 0.5 * qy
    A[5, 10] = 0.5 * qz
    A[5, 11] = 0.5 * qw
    A[5, 12] = -0.5 * qx
    A[6, 10] = -0.5 * qy
    A[6, 11] = 0.5 * qx
    A[6, 12] = 0.5 * qw

    # rotational dynamics: J^-1 (-[w]x J + [J w]x)
    hx, hy, hz = jx * wx, jy * wy, jz * wz
    A[10, 11] = -(jz - jy) * wz / jx
    A[10, 12] = -(jz - jy) * wy / jx
    A[11, 10] = -(jx - jz) * wz / jy
    A[11, 12] = -(jx - jz) * wx / jy
    A[12, 10] = -(jy - jx) * wy / jz
    A[12, 11] = -(jy - jx) * wx / jz

    rot_apply(qw, qx, qy, qz, 0.0, 0.0, 1.0, col)
    for i in range(4):
        B[7, i] = col[0] / m
        B[8, i] = col[1] / m
        B[9, i] = col[2] / m
    B[10, 0] = k / jx
    B[10, 1] = k / jx
    B[10, 2] = -k / jx
    B[10, 3] = -k / jx
    B[11, 0] = -k / jy
    B[11, 1] = k / jy
    B[11, 2] = k / jy
    B[11, 3] = -k / jy
    B[12, 0] = ct / jz
    B[12, 1] = -ct / jz
    B[12, 2] = ct / jz
    B[12, 3] = -ct / jz


@njit(cache=True)
def rk4(x, f, model, drag_scale, dt, out):
    """One classical RK4 step with the thrusts held constant."""
    k1 = np.empty(NX)
    k2 = np.empty(NX)
    k3 = np.empty(NX)
    k4 = np.empty(NX)
    xt = np.empty(NX)
    deriv(x, f, model, drag_scale, k1)
    for i in range(NX):
        xt[i] = x[i] + 0.5 * dt * k1[i]
    deriv(xt, f, model, drag_scale, k2)
    for i in range(NX):
        xt[i] = x[i] + 0.5 * dt * k2[i]
    deriv(xt, f, model, drag_scale, k3)
    for i in range(NX):
        xt[i] = x[i] + dt * k3[i]
    deriv(xt, f, model, drag_scale, k4)
    for i in range(NX):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def _sparse_amul(A, M, out):
    """out = A @ M exploiting the fixed sparsity of the continuous Jacobian."""
    nc = M.shape[1]
    for c in range(nc):
        for i in range(3):
            out[i, c] = M[7 + i, c]
        for i in range(3, 7):
            acc = 0.0
            for j in range(3, 7):
                acc += A[i, j] * M[j, c]
            for j in range(10, 13):
                acc += A[i, j] * M[j, c]
            out[i, c] = acc
        for i in range(7, 10):
            acc = 0.0
            for j in range(3, 10):
                acc += A[i, j] * M[j, c]
            out[i, c] = acc
        for i in range(10, 13):
            acc = 0.0
            for j in range(10, 13):
                acc += A[i, j] * M[j, c]
            out[i, c] = acc


@njit(cache=True)
def rk4_jac(x, f, model, dt, out, Ad, Bd):
    """RK4 step plus its exact Jacobians w.r.t. the state and the thrusts.

    Works on the stacked sensitivity K = [dk/dx | dk/df] (13 x 17).
    """
    k1 = np.empty(NX)
    k2 = np.empty(NX)
    k3 = np.empty(NX)
    k4 = np.empty(NX)
    xt = np.empty(NX)
    A = np.empty((NX, NX))
    B = np.empty((NX, 4))
    K = np.empty((NX, NX + 4))
    Kn = np.empty((NX, NX + 4))
    acc = np.empty((NX, NX + 4))

    deriv(x, f, model, 1.0, k1)
    deriv_jac(x, f, model, 1.0, A, B)
    K[:, :NX] = A
    K[:, NX:] = B
    acc[:, :] = K

    for i in range(NX):
        xt[i] = x[i] + 0.5 * dt * k1[i]
    deriv(xt, f, model, 1.0, k2)
    deriv_jac(xt, f, model, 1.0, A, B)
    _sparse_amul(A, K, Kn)
    for i in range(NX):
        for j in range(NX + 4):
            base = A[i, j] if j < NX else B[i, j - NX]
            K[i, j] = base + 0.5 * dt * Kn[i, j]
            acc[i, j] += 2.0 * K[i, j]

    for i in range(NX):
        xt[i] = x[i] + 0.5 * dt * k2[i]
    deriv(xt, f, model, 1.0, k3)
    deriv_jac(xt, f, model, 1.0, A, B)
    _sparse_amul(A, K, Kn)
    for i in range(NX):
        for j in range(NX + 4):
            base = A[i, j] if j < NX else B[i, j - NX]
            K[i, j] = base + 0.5 * dt * Kn[i, j]
            acc[i, j] += 2.0 * K[i, j]

    for i in range(NX):
        xt[i] = x[i] + dt * k3[i]
    deriv(xt, f, model, 1.0, k4)
    deriv_jac(xt, f, model, 1.0, A, B)
    _sparse_amul(A, K, Kn)
    for i in range(NX):
        for j in range(NX + 4):
            base = A[i, j] if j < NX else B[i, j - NX]
            acc[i, j] += base + dt * Kn[i, j]

    for i in range(NX):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for j in range(NX):
            Ad[i, j] = dt / 6.0 * acc[i, j]
        Ad[i, i] += 1.0
        for j in range(4):
            Bd[i, j] = dt / 6.0 * acc[i, NX + j]


@njit(cache=True)
def normalize_quat(x):
    n = math.sqrt(x[3] * x[3] + x[4] * x[4] + x[5] * x[5] + x[6] * x[6])
    for i in range(3, 7):
        x[i] /= n


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _as_state_array(x) -> np.ndarray:
    if isinstance(x, QuadState):
        return x.as_array()
    return np.asarray(x, dtype=np.float64)


def mix_rotor_thrusts(f, params: QuadParams) -> Wrench:
    """Map single-rotor thrusts to collective thrust and body torques."""
    f = np.asarray(f, dtype=np.float64)
    out = np.empty(4)
    mix(f, params.as_array(), out)
    return Wrench(float(out[0]), out[1:4].copy())


def state_derivative(x, w: Wrench, params: QuadParams) -> np.ndarray:
    """Time derivative of the 13-entry state under a given wrench.

    Returns the flat derivative vector in the package state layout.
    """
    xa = _as_state_array(x)
    if not np.all(np.isfinite(xa)):
        raise InvalidStateError("state contains non-finite entries")
    if abs(np.linalg.norm(xa[3:7]) - 1.0) > 1e-6:
        raise InvalidStateError("attitude quaternion is not unit length")
    # invert the mixer so the kernel (which consumes rotor thrusts) can be reused
    f = wrench_to_thrusts(w, params)
    out = np.empty(NX)
    deriv(xa, f, params.as_array(), 1.0, out)
    return out


def mixer_matrix(params: QuadParams) -> np.ndarray:
    k = params.arm_length * SQRT1_2
    c = params.torque_constant
    return np.array(
        [
            [1.0, 1.0, 1.0, 1.0],
            [k, k, -k, -k],
            [-k, k, k, -k],
            [c, -c, c, -c],
        ]
    )


def wrench_to_thrusts(w: Wrench, params: QuadParams) -> np.ndarray:
    rhs = np.array([w.thrust, *np.asarray(w.torque, dtype=np.float64)])
    return np.linalg.solve(mixer_matrix(params), rhs)


def clamp_inputs(f, params: QuadParams) -> np.ndarray:
    return np.clip(np.asarray(f, dtype=np.float64), params.thrust_min, params.thrust_max)


def integrate_step(x, f, dt: float, params: QuadParams, drag_scale: float = 1.0):
    """Advance the state by ``dt`` with RK4 and renormalize the attitude.

    Returns the same type that was passed in (``QuadState`` or array).
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return x
    xa = _as_state_array(x)
    out = np.empty(NX)
    rk4(xa, np.asarray(f, dtype=np.float64), params.as_array(), drag_scale, dt, out)
    if not np.all(np.isfinite(out)):
        raise SimulationDivergedError("integration produced a non-finite state")
    normalize_quat(out)
    if isinstance(x, QuadState):
        return QuadState.from_array(out)
    return out


def hover_state(position=(0.0, 0.0, 0.0)) -> QuadState:
    return QuadState(position=np.asarray(position, dtype=np.float64))
