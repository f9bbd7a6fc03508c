"""Strapdown INS mechanization in NED and the 15-state error model.

Error-state ordering (fixed, every matrix in the package uses it)::

    [dtheta(3), db_g(3), dV(3), db_a(3), dPos(3)]

``dtheta`` is the body-frame attitude error, the other components are additive
(true minus estimate).
"""

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import NonMonotonicTime, NonPsdInput
from .geometry import quat_to_rot

ATT = slice(0, 3)
BG = slice(3, 6)
VEL = slice(6, 9)
BA = slice(9, 12)
POS = slice(12, 15)
N_STATE = 15
N_NOISE = 12

EARTH_RATE = 7.292115e-5  # rad/s
GRAVITY = 9.81  # m/s^2
MAX_DT = 0.1


@dataclass
class NavState:
    """Nominal INS state: attitude (C_b^n as a quaternion), biases, velocity, position."""

    q_n_b: np.ndarray
    b_g: np.ndarray
    V_n: np.ndarray
    b_a: np.ndarray
    Pos_n: np.ndarray

    def __post_init__(self):
        for name in ("q_n_b", "b_g", "V_n", "b_a", "Pos_n"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))

    def copy(self):
        return NavState(self.q_n_b.copy(), self.b_g.copy(), self.V_n.copy(),
                        self.b_a.copy(), self.Pos_n.copy())

    @property
    def C_b_n(self):
        return quat_to_rot(self.q_n_b)


@dataclass(frozen=True)
class ImuSample:
    t: float
    w_m: np.ndarray
    a_m: np.ndarray


def earth_rate_ned(latitude_deg):
    lat = np.radians(latitude_deg)
    return EARTH_RATE * np.array([np.cos(lat), 0.0, -np.sin(lat)])


@dataclass
class NoiseConfig:
    """Process noise and planet model for the mechanization.

    ``Q_IMU`` is the 12x12 power spectral density of
    ``[n_g, n_wg, n_a, n_wa]`` (gyro white noise, gyro bias walk, accel white
    noise, accel bias walk).
    """

    Q_IMU: np.ndarray = field(default_factory=lambda: np.zeros((N_NOISE, N_NOISE)))
    w_G: np.ndarray = field(default_factory=lambda: earth_rate_ned(45.0))
    g_n: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, GRAVITY]))

    def __post_init__(self):
        self.Q_IMU = np.array(self.Q_IMU, dtype=float)
        self.w_G = np.array(self.w_G, dtype=float)
        self.g_n = np.array(self.g_n, dtype=float)
        if self.Q_IMU.shape != (N_NOISE, N_NOISE):
            raise ValueError("Q_IMU must be 12x12")
        if not np.allclose(self.Q_IMU, self.Q_IMU.T):
            raise NonPsdInput("Q_IMU is not symmetric")
        if np.linalg.eigvalsh(self.Q_IMU).min() < -1e-12 * max(np.trace(self.Q_IMU), 1.0):
            raise NonPsdInput("Q_IMU is not positive semi-definite")

    @classmethod
    def from_densities(cls, gyro_noise, gyro_walk, accel_noise, accel_walk,
                       w_G=None, g_n=None):
        """Build ``Q_IMU`` from per-axis noise densities (1-sigma, continuous time).

        Units: rad/s/sqrt(Hz), rad/s^2/sqrt(Hz), m/s^2/sqrt(Hz), m/s^3/sqrt(Hz).
        """
        q = np.repeat([gyro_noise ** 2, gyro_walk ** 2, accel_noise ** 2, accel_walk ** 2], 3)
        kwargs = {"Q_IMU": np.diag(q)}
        if w_G is not None:
            kwargs["w_G"] = w_G
        if g_n is not None:
            kwargs["g_n"] = g_n
        return cls(**kwargs)

    def without_planet_rate(self):
        return replace(self, w_G=np.zeros(3))


DEFAULT_NOISE = NoiseConfig()


@njit(cache=True)
def _rot(q):
    # rotation matrix of q / |q|; RK4 stages sit slightly off the unit sphere
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    x, y, z, w = q[0] / n, q[1] / n, q[2] / n, q[3] / n
    R = np.empty((3, 3))
    R[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[0, 1] = 2.0 * (x * y - w * z)
    R[0, 2] = 2.0 * (x * z + w * y)
    R[1, 0] = 2.0 * (x * y + w * z)
    R[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[1, 2] = 2.0 * (y * z - w * x)
    R[2, 0] = 2.0 * (x * z - w * y)
    R[2, 1] = 2.0 * (y * z + w * x)
    R[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


@njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


@njit(cache=True)
def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@njit(cache=True)
def _derivative(q, v, p, w_c, a_c, w_G, g_n):
    C = _rot(q)
    w = w_c - C.T @ w_G
    # q_dot = 0.5 * q (x) [w, 0]
    q_dot = 0.5 * np.array([
        q[3] * w[0] + q[1] * w[2] - q[2] * w[1],
        q[3] * w[1] - q[0] * w[2] + q[2] * w[0],
        q[3] * w[2] + q[0] * w[1] - q[1] * w[0],
        -q[0] * w[0] - q[1] * w[1] - q[2] * w[2],
    ])
    v_dot = C @ a_c + g_n - 2.0 * _cross(w_G, v) - _cross(w_G, _cross(w_G, p))
    return q_dot, v_dot, v


@njit(cache=True)
def _nominal_step(q0, v0, p0, w_c, a_c, dt, w_G, g_n):
    k1q, k1v, k1p = _derivative(q0, v0, p0, w_c, a_c, w_G, g_n)
    h2 = 0.5 * dt
    k2q, k2v, k2p = _derivative(q0 + h2 * k1q, v0 + h2 * k1v, p0 + h2 * k1p, w_c, a_c, w_G, g_n)
    k3q, k3v, k3p = _derivative(q0 + h2 * k2q, v0 + h2 * k2v, p0 + h2 * k2p, w_c, a_c, w_G, g_n)
    k4q, k4v, k4p = _derivative(q0 + dt * k3q, v0 + dt * k3v, p0 + dt * k3p, w_c, a_c, w_G, g_n)
    h6 = dt / 6.0
    q = q0 + h6 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    v = v0 + h6 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    p = p0 + h6 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    return q / np.sqrt(np.sum(q * q)), v, p


def propagate_nominal(state, imu, dt, cfg=DEFAULT_NOISE):
    """One RK4 step of the nominal strapdown equations.

    The IMU sample is held constant over ``[imu.t, imu.t + dt]``. Biases are
    carried unchanged and the quaternion is renormalized at the end of the step.
    """
    if not dt > 0:
        raise NonMonotonicTime(f"dt must be positive, got {dt!r}")
    if dt > MAX_DT:
        raise ValueError(f"dt = {dt} exceeds the {MAX_DT} s integration limit")
    w_c = np.asarray(imu.w_m, dtype=float) - state.b_g
    a_c = np.asarray(imu.a_m, dtype=float) - state.b_a
    q, v, p = _nominal_step(state.q_n_b, state.V_n, state.Pos_n, w_c, a_c, float(dt),
                            cfg.w_G, cfg.g_n)
    return NavState(q, state.b_g, v, state.b_a, p)


@njit(cache=True)
def _error_matrices(q, w_c, a_c, w_G):
    C = _rot(q)
    w_hat = w_c - C.T @ w_G
    WG = _skew(w_G)
    F = np.zeros((N_STATE, N_STATE))
    G = np.zeros((N_STATE, N_NOISE))
    F[0:3, 0:3] = -_skew(w_hat)
    F[6:9, 0:3] = -C @ _skew(a_c)
    F[6:9, 6:9] = -2.0 * WG
    F[6:9, 9:12] = -C
    F[6:9, 12:15] = -WG @ WG
    G[6:9, 6:9] = -C
    for i in range(3):
        F[i, 3 + i] = -1.0
        F[12 + i, 6 + i] = 1.0
        G[i, i] = -1.0
        G[3 + i, 3 + i] = 1.0
        G[9 + i, 9 + i] = 1.0
    return F, G


def error_dynamics(state, imu, cfg=DEFAULT_NOISE):
    """Continuous-time error model ``d(dX)/dt = F dX + G n_IMU``.

    Block layout (rows/cols in error-state order)::

        F[att, att] = -[w_hat x]     F[att, b_g] = -I
        F[vel, att] = -C [a_hat x]   F[vel, vel] = -2 [w_G x]
        F[vel, b_a] = -C             F[vel, pos] = -[w_G x]^2
        F[pos, vel] = I
        G = blockdiag(-I, I, -C, I) over [n_g, n_wg, n_a, n_wa]
    """
    w_c = np.asarray(imu.w_m, dtype=float) - state.b_g
    a_c = np.asarray(imu.a_m, dtype=float) - state.b_a
    return _error_matrices(state.q_n_b, w_c, a_c, cfg.w_G)


@njit(cache=True)
def rk4_transition_step(F, dt):
    """RK4 amplification matrix of ``dPhi/dt = F Phi`` over one step with constant F."""
    A = F * dt
    I = np.eye(F.shape[0])
    return I + A @ (I + A @ (I + A @ (I + A / 4.0) / 3.0) / 2.0)


@njit(cache=True)
def _lyapunov_step(P, F, Qc, dt):
    k1 = F @ P
    k1 = k1 + k1.T + Qc
    X = P + 0.5 * dt * k1
    k2 = F @ X
    k2 = k2 + k2.T + Qc
    X = P + 0.5 * dt * k2
    k3 = F @ X
    k3 = k3 + k3.T + Qc
    X = P + dt * k3
    k4 = F @ X
    k4 = k4 + k4.T + Qc
    out = P + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return 0.5 * (out + out.T)


@njit(cache=True)
def _filter_step(q, b_g, v, b_a, p, P, phi, w_m, a_m, dt, Q, w_G, g_n):
    """Nominal state, covariance and transition matrix over one IMU interval."""
    w_c = w_m - b_g
    a_c = a_m - b_a
    F, G = _error_matrices(q, w_c, a_c, w_G)
    q1, v1, p1 = _nominal_step(q, v, p, w_c, a_c, dt, w_G, g_n)
    P1 = _lyapunov_step(P, F, G @ Q @ G.T, dt)
    phi1 = rk4_transition_step(F, dt) @ phi
    return q1, v1, p1, P1, phi1


class SampledPath:
    """Piecewise-linear interpolation of a sampled matrix path ``F(t)``."""

    def __init__(self, times, mats):
        self.times = np.asarray(times, dtype=float)
        self.mats = np.asarray(mats, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise NonMonotonicTime("sample times must be strictly increasing")

    def __call__(self, t):
        i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        t0, t1 = self.times[i], self.times[i + 1]
        w = (t - t0) / (t1 - t0)
        return (1.0 - w) * self.mats[i] + w * self.mats[i + 1]


def propagate_phi(F_path, t_k, t_k1, dt=0.01):
    """State-transition matrix Phi(t_k1, t_k) by RK4 integration of dPhi/dt = F Phi.

    ``F_path`` is a callable ``t -> F`` (wrap samples with :class:`SampledPath`).
    """
    if not t_k1 > t_k:
        raise NonMonotonicTime("t_k1 must be after t_k")
    t = float(t_k)
    Phi = np.eye(np.asarray(F_path(t)).shape[0])
    while t < t_k1 - 1e-12:
        h = min(dt, t_k1 - t)
        Fa, Fm, Fb = F_path(t), F_path(t + 0.5 * h), F_path(t + h)
        k1 = Fa @ Phi
        k2 = Fm @ (Phi + 0.5 * h * k1)
        k3 = Fm @ (Phi + 0.5 * h * k2)
        k4 = Fb @ (Phi + h * k3)
        Phi = Phi + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
    return Phi


def check_psd(P, name="P"):
    P = np.asarray(P)
    tr = np.trace(P)
    lam = np.linalg.eigvalsh(0.5 * (P + P.T)).min()
    if lam < -1e-9 * max(abs(tr), np.finfo(float).tiny):
        raise NonPsdInput(f"{name} has eigenvalue {lam:.3e} (trace {tr:.3e})")


def propagate_covariance(P, F, G, cfg, dt, check=True):
    """One RK4 step of ``dP/dt = F P + P F^T + G Q G^T``, symmetrized on output."""
    if check:
        check_psd(P)
    P = np.ascontiguousarray(P, dtype=float)
    Qc = G @ cfg.Q_IMU @ G.T
    return _lyapunov_step(P, np.ascontiguousarray(F, dtype=float), Qc, float(dt))
