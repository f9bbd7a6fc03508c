"""Synthetic world: loop trajectory, IMU synthesis and pinhole feature triplets.

The reference trajectory is level flight at constant speed and altitude along a
rounded rectangle (straight legs joined by constant-rate 90 degree turns).  The
closed-form path defines the IMU signals; the truth used everywhere else is the
path obtained by integrating those error-free signals through the same
mechanization the filter uses, so an error-free IMU reproduces truth exactly.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleSpec, InsufficientOverlap
from .geometry import Los, quat_to_rot
from .ins import DEFAULT_NOISE, ImuSample, NavState, NoiseConfig, _nominal_step
from .trifocal import DEFAULT_PIXEL_COV, FeatureTriplet

logger = logging.getLogger(__name__)

DEG = np.pi / 180.0
DEG_PER_HOUR = DEG / 3600.0
MILLI_G = 9.81e-3

# camera x along body y (right wing), camera y along body -x, optical axis down
DOWNWARD_CAMERA = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class TrajectorySpec:
    speed: float = 10.0  # m/s
    altitude: float = 300.0  # m above the ground plane
    long_leg: float = 200.0  # m
    short_leg: float = 100.0  # m
    turn_duration: float = 5.0  # s per 90 degree turn
    heading_deg: float = 0.0  # heading of the first leg
    turn_right: bool = True
    start_north: float = 0.0
    start_east: float = 0.0
    duration: float = 200.0  # s
    rate_hz: float = 100.0
    revisit_times: tuple = (90.0, 160.0)
    gate: float = 120.0  # m, allowed horizontal distance from the start at revisits

    @property
    def dt(self):
        return 1.0 / self.rate_hz

    @property
    def n_samples(self):
        return int(round(self.duration * self.rate_hz)) + 1

    @property
    def period(self):
        return 2.0 * (self.long_leg + self.short_leg) / self.speed + 4.0 * self.turn_duration


def _on_grid(x, rate):
    n = x * rate
    return abs(n - round(n)) < 1e-9 * max(1.0, abs(n))


def _check_spec(spec):
    problems = []
    for name in ("speed", "altitude", "turn_duration", "duration", "rate_hz"):
        if not getattr(spec, name) > 0:
            problems.append(f"{name} must be positive")
    for name in ("long_leg", "short_leg"):
        if getattr(spec, name) < 0:
            problems.append(f"{name} must be non-negative")
    if problems:
        raise InfeasibleSpec("; ".join(problems))
    for name, value in (("long leg time", spec.long_leg / spec.speed),
                        ("short leg time", spec.short_leg / spec.speed),
                        ("turn_duration", spec.turn_duration),
                        ("duration", spec.duration)):
        if not _on_grid(value, spec.rate_hz):
            raise InfeasibleSpec(f"{name} {value} s is not a multiple of the IMU period")
    for t in spec.revisit_times:
        if not 0 <= t <= spec.duration:
            raise InfeasibleSpec(f"revisit time {t} outside [0, {spec.duration}]")


class LoopPath:
    """Closed-form kinematics of the rounded-rectangle loop (navigation frame)."""

    def __init__(self, spec):
        _check_spec(spec)
        self.spec = spec
        v = spec.speed
        sign = 1.0 if spec.turn_right else -1.0
        turn_rate = sign * 0.5 * np.pi / spec.turn_duration
        legs = [spec.long_leg / v, spec.turn_duration, spec.short_leg / v, spec.turn_duration]
        rates = [0.0, turn_rate, 0.0, turn_rate]

        starts, durs, yaw_rates, yaw0, pos0 = [], [], [], [], []
        t, psi = 0.0, spec.heading_deg * DEG
        p = np.array([spec.start_north, spec.start_east])
        i = 0
        while t < spec.duration + 1e-9:
            d, r = legs[i % 4], rates[i % 4]
            i += 1
            if d == 0:
                continue
            starts.append(t)
            durs.append(d)
            yaw_rates.append(r)
            yaw0.append(psi)
            pos0.append(p.copy())
            p = self._advance(p, psi, r, d)
            psi += r * d
            t += d
        self.starts = np.array(starts)
        self.durs = np.array(durs)
        self.yaw_rates = np.array(yaw_rates)
        self.yaw0 = np.array(yaw0)
        self.pos0 = np.array(pos0)

        for t_rev in spec.revisit_times:
            gap = np.linalg.norm(self.position(t_rev)[:2] - self.position(0.0)[:2])
            if gap > spec.gate:
                raise InfeasibleSpec(f"loop misses its start by {gap:.1f} m at t = {t_rev} s "
                                     f"(gate {spec.gate} m)")

    def _advance(self, p, psi, rate, tau):
        """Horizontal position after ``tau`` seconds from ``p`` (arrays broadcast)."""
        v = self.spec.speed
        p, psi, rate, tau = (np.asarray(x, dtype=float) for x in (p, psi, rate, tau))
        turning = rate != 0.0
        safe = np.where(turning, rate, 1.0)
        psi1 = psi + rate * tau
        dn = np.where(turning, (np.sin(psi1) - np.sin(psi)) / safe, tau * np.cos(psi))
        de = np.where(turning, (np.cos(psi) - np.cos(psi1)) / safe, tau * np.sin(psi))
        return p + v * np.stack([dn, de], axis=-1)

    def _segment(self, t):
        i = np.searchsorted(self.starts, t, side="right") - 1
        return np.clip(i, 0, len(self.starts) - 1)

    # all accessors take a scalar or an array of times

    def yaw_rate(self, t):
        return self.yaw_rates[self._segment(t)]

    def yaw(self, t):
        i = self._segment(t)
        return self.yaw0[i] + self.yaw_rates[i] * (t - self.starts[i])

    def position(self, t):
        i = self._segment(t)
        ne = self._advance(self.pos0[i], self.yaw0[i], self.yaw_rates[i], t - self.starts[i])
        down = np.full(np.shape(t) + (1,), -self.spec.altitude)
        return np.concatenate([ne, down], axis=-1)

    def velocity(self, t):
        psi = self.yaw(t)
        return self.spec.speed * np.stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)], axis=-1)

    def acceleration(self, t):
        psi = self.yaw(t)
        r = np.asarray(self.yaw_rate(t))[..., None]
        return self.spec.speed * r * np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], axis=-1)

    def attitude(self, t):
        """Level attitude with the body x axis along the velocity (quaternion of C_b^n)."""
        half = 0.5 * self.yaw(t)
        z = np.zeros_like(half)
        return np.stack([z, z, np.sin(half), np.cos(half)], axis=-1)


@dataclass
class Truth:
    """Realized truth at the IMU rate plus the error-free IMU signals that produce it.

    ``w_b[k]`` and ``f_b[k]`` act over ``[t[k], t[k+1]]``.
    """

    t: np.ndarray
    q: np.ndarray
    V: np.ndarray
    P: np.ndarray
    w_b: np.ndarray
    f_b: np.ndarray
    dt: float
    path: LoopPath = None

    def __len__(self):
        return len(self.t)

    def index(self, t):
        k = int(round(t / self.dt))
        if not 0 <= k < len(self.t) or abs(self.t[k] - t) > 1e-6:
            raise ValueError(f"t = {t} is not a truth sample time")
        return k

    def nav(self, k):
        return NavState(self.q[k], np.zeros(3), self.V[k], np.zeros(3), self.P[k])

    def C_b_n(self, k):
        return quat_to_rot(self.q[k])


def ideal_imu(path, t, cfg=DEFAULT_NOISE):
    """Gyro and accelerometer outputs of the closed-form path at times ``t`` (array)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    psi = path.yaw(t)
    c, s = np.cos(psi), np.sin(psi)
    V, P = path.velocity(t), path.position(t)
    w_G = np.broadcast_to(cfg.w_G, V.shape)
    f_n = (path.acceleration(t) - cfg.g_n + 2.0 * np.cross(w_G, V)
           + np.cross(w_G, np.cross(w_G, P)))

    def to_body(x):  # C_n^b for a level attitude with yaw psi
        return np.stack([c * x[:, 0] + s * x[:, 1], -s * x[:, 0] + c * x[:, 1], x[:, 2]], axis=-1)

    w_b = to_body(w_G)
    w_b[:, 2] += path.yaw_rate(t)
    return w_b, to_body(f_n)


def generate_trajectory(spec=None, cfg=DEFAULT_NOISE):
    """Truth sampled at the IMU rate; ``len == duration * rate + 1``."""
    spec = spec or TrajectorySpec()
    path = LoopPath(spec)
    n, dt = spec.n_samples, spec.dt
    t = np.arange(n) * dt
    # signals are evaluated mid-step; segment boundaries sit on the grid
    w_b, f_b = ideal_imu(path, t[:-1] + 0.5 * dt, cfg)

    q = np.empty((n, 4))
    V = np.empty((n, 3))
    P = np.empty((n, 3))
    q[0], V[0], P[0] = path.attitude(0.0), path.velocity(0.0), path.position(0.0)
    for k in range(n - 1):
        q[k + 1], V[k + 1], P[k + 1] = _nominal_step(q[k], V[k], P[k], w_b[k], f_b[k], dt,
                                                     cfg.w_G, cfg.g_n)
    return Truth(t, q, V, P, w_b, f_b, dt, path)


@dataclass
class SensorErrorSpec:
    """Initial 1-sigma navigation errors and IMU error model.

    Angles in degrees, gyro drift in deg/hr, accelerometer bias in milli-g.
    Noise densities: gyro rad/s/sqrt(Hz), gyro bias walk rad/s^2/sqrt(Hz),
    accel m/s^2/sqrt(Hz), accel bias walk m/s^3/sqrt(Hz).
    """

    sigma_pos: tuple = (10.0, 10.0, 10.0)
    sigma_vel: tuple = (1.0, 1.0, 1.0)
    sigma_att_deg: tuple = (1.0, 1.0, 1.0)
    sigma_gyro_bias_dph: tuple = (10.0, 10.0, 10.0)
    sigma_accel_bias_mg: tuple = (10.0, 10.0, 10.0)
    gyro_noise: float = 3e-5
    gyro_walk: float = 1e-6
    accel_noise: float = 2e-3
    accel_walk: float = 1e-5

    def sigmas(self):
        """Initial 1-sigma vector in error-state order."""
        return np.concatenate([
            np.asarray(self.sigma_att_deg, float) * DEG,
            np.asarray(self.sigma_gyro_bias_dph, float) * DEG_PER_HOUR,
            np.asarray(self.sigma_vel, float),
            np.asarray(self.sigma_accel_bias_mg, float) * MILLI_G,
            np.asarray(self.sigma_pos, float),
        ])

    def initial_covariance(self):
        return np.diag(self.sigmas() ** 2)

    def noise_config(self, w_G=None, g_n=None):
        return NoiseConfig.from_densities(self.gyro_noise, self.gyro_walk, self.accel_noise,
                                          self.accel_walk, w_G=w_G, g_n=g_n)

    @classmethod
    def noiseless(cls):
        return cls((0.0,) * 3, (0.0,) * 3, (0.0,) * 3, (0.0,) * 3, (0.0,) * 3, 0.0, 0.0, 0.0, 0.0)


@dataclass
class ImuStream:
    t: np.ndarray
    w_m: np.ndarray
    a_m: np.ndarray
    b_g: np.ndarray  # true biases at every truth sample
    b_a: np.ndarray
    dt: float

    def __len__(self):
        return len(self.t)

    def sample(self, k):
        return ImuSample(self.t[k], self.w_m[k], self.a_m[k])


def synthesize_imu(truth, errors, seed=None):
    """Corrupt the error-free IMU signals with random-walk biases and white noise.

    Initial biases are drawn from the 1-sigma drift values; white noise of
    density ``q`` has per-sample standard deviation ``q / sqrt(dt)``.
    """
    rng = np.random.default_rng(seed)
    dt = truth.dt
    n = len(truth.t) - 1
    sig = errors.sigmas()
    b_g0 = rng.standard_normal(3) * sig[3:6]
    b_a0 = rng.standard_normal(3) * sig[9:12]
    steps = rng.standard_normal((n, 4, 3))
    sq = np.sqrt(dt)

    b_g = np.empty((n + 1, 3))
    b_a = np.empty((n + 1, 3))
    b_g[0], b_a[0] = b_g0, b_a0
    b_g[1:] = b_g0 + np.cumsum(errors.gyro_walk * sq * steps[:, 1], axis=0)
    b_a[1:] = b_a0 + np.cumsum(errors.accel_walk * sq * steps[:, 3], axis=0)

    w_m = truth.w_b + b_g[:-1] + errors.gyro_noise / sq * steps[:, 0]
    a_m = truth.f_b + b_a[:-1] + errors.accel_noise / sq * steps[:, 2]
    return ImuStream(truth.t[:-1].copy(), w_m, a_m, b_g, b_a, dt)


@dataclass
class CameraModel:
    focal: float = 1570.0  # pixels
    width: int = 1024
    height: int = 768
    principal_point: tuple = None
    pixel_cov: np.ndarray = field(default_factory=lambda: DEFAULT_PIXEL_COV.copy())
    C_c_b: np.ndarray = field(default_factory=lambda: DOWNWARD_CAMERA.copy())

    def __post_init__(self):
        if self.principal_point is None:
            self.principal_point = (0.5 * self.width, 0.5 * self.height)
        self.principal_point = tuple(float(c) for c in self.principal_point)
        self.pixel_cov = np.array(self.pixel_cov, dtype=float)
        self.C_c_b = np.array(self.C_c_b, dtype=float)
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if np.linalg.eigvalsh(0.5 * (self.pixel_cov + self.pixel_cov.T)).min() < 0:
            raise ValueError("pixel covariance must be positive semi-definite")

    def project(self, landmark, Pos_n, C_b_n):
        """Pixel coordinates of a navigation-frame point, or None if not in the image."""
        p_c = (C_b_n @ self.C_c_b).T @ (np.asarray(landmark, float) - Pos_n)
        if p_c[2] <= 0:
            return None
        cu, cv = self.principal_point
        u = cu + self.focal * p_c[0] / p_c[2]
        v = cv + self.focal * p_c[1] / p_c[2]
        if 0.0 <= u <= self.width and 0.0 <= v <= self.height:
            return np.array([u, v])
        return None

    def los(self, uv, frame):
        cu, cv = self.principal_point
        return Los.from_normalized((uv[0] - cu) / self.focal, (uv[1] - cv) / self.focal,
                                   self.focal, frame)

    def ground_footprint(self, Pos_n, C_b_n, ground_down=0.0):
        """Corners of the image footprint on the horizontal plane ``z = ground_down``."""
        C = C_b_n @ self.C_c_b
        cu, cv = self.principal_point
        corners = []
        for u, v in ((0, 0), (self.width, 0), (self.width, self.height), (0, self.height)):
            ray = C @ np.array([u - cu, v - cv, self.focal])
            if ray[2] <= 0:
                raise InsufficientOverlap("camera does not see the ground")
            s = (ground_down - Pos_n[2]) / ray[2]
            corners.append(Pos_n + s * ray)
        return np.array(corners)


def generate_features(truth, cam, t1, t2, t3, n, seed=None, ground_down=0.0, pixel_noise=True):
    """``n`` landmark triplets seen at the three truth times, with pixel noise.

    Landmarks are drawn uniformly on the ground plane over the footprint of
    the first view and kept when all three views see them.
    """
    rng = np.random.default_rng(seed)
    ks = [truth.index(t) for t in (t1, t2, t3)]
    poses = [(truth.P[k], truth.C_b_n(k)) for k in ks]
    corners = cam.ground_footprint(*poses[0], ground_down=ground_down)
    lo = corners[:, :2].min(axis=0)
    hi = corners[:, :2].max(axis=0)
    noise_chol = None
    if pixel_noise:
        R2 = cam.pixel_cov[:2, :2]
        lam, V = np.linalg.eigh(R2)
        noise_chol = V * np.sqrt(np.clip(lam, 0.0, None))

    out = []
    attempts = 0
    while len(out) < n:
        if attempts >= 10 * n:
            raise InsufficientOverlap(f"only {len(out)} of {n} landmarks visible in all three "
                                      f"views after {attempts} attempts")
        attempts += 1
        ne = lo + (hi - lo) * rng.random(2)
        landmark = np.array([ne[0], ne[1], ground_down])
        pix = [cam.project(landmark, *pose) for pose in poses]
        if any(p is None for p in pix):
            continue
        if noise_chol is not None:
            pix = [p + noise_chol @ rng.standard_normal(2) for p in pix]
        out.append(FeatureTriplet(cam.los(pix[0], "c1"), cam.los(pix[1], "c2"),
                                  cam.los(pix[2], "c3"), feature_id=len(out)))
    return out
