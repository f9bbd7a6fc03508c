"""Implicit extended Kalman filter driven by three-view constraints.

The filter state is the current INS solution and its 15x15 covariance.  Poses
at the first two image times are stored as snapshots and enter the update only
as random parameters through their covariances (P1, P2 and P21 = Phi(t2, t1) P1).
They are never corrected.  Their covariance with the current state is either
neglected or tracked through propagation and updates (a consider-parameter,
or Schmidt, treatment of the snapshots).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve
from scipy.stats import chi2

from .errors import NonMonotonicTime, NonPsdResult, SingularPz
from .geometry import apply_error_rotation, quat_to_rot
from .ins import ATT, BA, BG, DEFAULT_NOISE, MAX_DT, N_STATE, POS, VEL, _filter_step
from .trifocal import CAMERA_BASIS, DEFAULT_PIXEL_COV, TRIFOCAL, TriplePose, stack_measurements

logger = logging.getLogger(__name__)

GATE_PROBABILITY = 0.999
PZ_RCOND = 1e-12
MAX_CONDITION = 1e14
CLAMP_LIMIT = 1e-6
CROSS_MODES = ("auto", "neglect", "tracked")


class UpdateMode(Enum):
    SEQUENTIAL = "sequential"
    LOOP = "loop"


@dataclass
class FilterState:
    nav: object
    P: np.ndarray
    t: float = 0.0
    # Phi(t, t_anchor); the anchor is the last snapshot or tracked update
    phi: np.ndarray = field(default_factory=lambda: np.eye(N_STATE))
    updates_since_snapshot: int = 0
    stats: dict = field(default_factory=lambda: {"updates": 0, "clamped": 0,
                                                 "gated": 0, "dropped": 0})
    # snapshot time -> B with Cov(dX(t), dX(snapshot)) = phi @ B
    cross: dict = field(default_factory=dict)

    def copy(self):
        return FilterState(self.nav.copy(), self.P.copy(), self.t, self.phi.copy(),
                           self.updates_since_snapshot, dict(self.stats),
                           {k: v.copy() for k, v in self.cross.items()})

    def cross_covariance(self, t_snap):
        """Cov(dX(t), dX(t_snap)), or None when it is not being tracked."""
        B = self.cross.get(t_snap)
        return None if B is None else self.phi @ B


@dataclass(frozen=True)
class PoseSnapshot:
    t: float
    nav: object
    P: np.ndarray
    phi_prev: np.ndarray  # Phi(t, t_anchor) when the snapshot was taken
    cross: dict = field(default_factory=dict)  # earlier snapshot time -> Cov(dX(t), dX(t_s))

    @property
    def Pos_n(self):
        return self.nav.Pos_n

    @property
    def C_b_n(self):
        return quat_to_rot(self.nav.q_n_b)


@dataclass(frozen=True)
class SnapshotPair:
    snap1: PoseSnapshot
    snap2: PoseSnapshot
    P21: np.ndarray
    phi21: np.ndarray

    @classmethod
    def from_snapshots(cls, snap1, snap2, between=()):
        """Pair two snapshots; ``between`` lists any snapshots taken in between, in order.

        P21 is the tracked covariance when available, otherwise
        ``Phi(t2, t1) P1`` from the chained transition matrices.
        """
        if snap1.t in snap2.cross:
            return cls(snap1, snap2, snap2.cross[snap1.t].copy(), None)
        phi = np.eye(N_STATE)
        for s in (*between, snap2):
            phi = s.phi_prev @ phi
        return cls(snap1, snap2, phi @ snap1.P, phi)


@dataclass
class UpdateSettings:
    method: str = TRIFOCAL
    normalize: bool = True
    pixel_cov: np.ndarray = field(default_factory=lambda: DEFAULT_PIXEL_COV.copy())
    C_c_b: np.ndarray = field(default_factory=lambda: np.eye(3))
    gate_probability: float = GATE_PROBABILITY
    # "neglect": P31 = P32 = 0; "tracked": covariances carried through propagation and
    # updates; "auto": tracked for sequential triples, neglected for loop closures
    cross_covariance: str = "auto"
    iterations: int = 50  # 1 gives the single-linearization update
    tolerance: float = 1e-4  # on the correction change, in prior standard deviations
    basis: str = CAMERA_BASIS  # frame the four trifocal entries are read in


def propagate(fs, imu, dt, cfg=DEFAULT_NOISE):
    """Advance nominal state, covariance and the snapshot transition accumulator.

    Same integration as :func:`propagate_nominal` and
    :func:`propagate_covariance`, fused into one compiled step.
    """
    if not dt > 0:
        raise NonMonotonicTime(f"dt must be positive, got {dt!r}")
    if dt > MAX_DT:
        raise ValueError(f"dt = {dt} exceeds the {MAX_DT} s integration limit")
    n = fs.nav
    q, v, p, P, phi = _filter_step(n.q_n_b, n.b_g, n.V_n, n.b_a, n.Pos_n, fs.P, fs.phi,
                                   np.asarray(imu.w_m, dtype=float),
                                   np.asarray(imu.a_m, dtype=float), float(dt),
                                   cfg.Q_IMU, cfg.w_G, cfg.g_n)
    n.q_n_b, n.V_n, n.Pos_n = q, v, p
    fs.P, fs.phi = P, phi
    fs.t = fs.t + dt
    return fs


def prune_snapshots(fs, t_min):
    """Stop tracking covariances with snapshots taken before ``t_min``."""
    fs.cross = {t: B for t, B in fs.cross.items() if t >= t_min}


def take_snapshot(fs):
    """Store the current pose and covariance; restarts ``fs.phi`` at identity."""
    cross = {t: fs.phi @ B for t, B in fs.cross.items()}
    snap = PoseSnapshot(fs.t, fs.nav.copy(), fs.P.copy(), fs.phi.copy(),
                        {t: C.copy() for t, C in cross.items()})
    cross[fs.t] = fs.P.copy()
    fs.cross = cross
    fs.phi = np.eye(N_STATE)
    fs.updates_since_snapshot = 0
    return snap


def triple_pose(pair, fs, C_c_b=None):
    return TriplePose(
        np.stack([pair.snap1.Pos_n, pair.snap2.Pos_n, fs.nav.Pos_n]),
        np.stack([pair.snap1.C_b_n, pair.snap2.C_b_n, fs.nav.C_b_n]),
        np.eye(3) if C_c_b is None else C_c_b,
    )


def tracked_cross_terms(fs, pair):
    """``(P31, P32)`` from the tracked covariances, or None if either is unavailable."""
    P31 = fs.cross_covariance(pair.snap1.t)
    P32 = fs.cross_covariance(pair.snap2.t)
    if P31 is None or P32 is None:
        return None
    return P31, P32


def joint_prior(fs, pair, cross_terms=None):
    """45x45 covariance of the stacked errors ``[dX3, dX2, dX1]``."""
    P31, P32 = cross_terms if cross_terms is not None else (np.zeros((N_STATE, N_STATE)),) * 2
    return np.block([[fs.P, P32, P31],
                     [P32.T, pair.snap2.P, pair.P21],
                     [P31.T, pair.P21.T, pair.snap1.P]])


def _linearized(fs, pair, batch, cross_terms=None, offset=None):
    """Innovation, its covariance and the covariance of all three poses with it.

    ``offset`` is the correction already applied to the current state to reach
    the linearization point ``fs`` from the prior estimate (iterated updates).
    """
    H = np.hstack([batch.H3, batch.H2, batch.H1])
    Pj = joint_prior(fs, pair, cross_terms)
    dz = -batch.z
    if offset is not None:
        dz = dz + batch.H3 @ offset
    Psz = Pj @ H.T
    Pz = H @ Psz
    k = batch.rows_per_feature
    noise = batch.noise_blocks()
    for f in range(batch.n_features):
        Pz[f * k:(f + 1) * k, f * k:(f + 1) * k] += noise[f]
    return dz, 0.5 * (Pz + Pz.T), Psz


def innovation(fs, pair, batch, cross_terms=None):
    """Innovation, its covariance and the state/innovation cross covariance.

    The innovation is ``-z`` evaluated at the estimates: the true residual is
    zero and ``z(estimate) ~= -(H3 dX3 + H2 dX2 + H1 dX1) + D v`` for errors
    defined as truth minus estimate.  ``cross_terms = (P31, P32)``; neglected
    (zero) when None.
    """
    dz, Pz, Psz = _linearized(fs, pair, batch, cross_terms)
    return dz, Pz, Psz[:N_STATE]


def feature_rank(batch):
    """Independent first-order rows per feature (3 for the trifocal basis, else all)."""
    return 3 if batch.rows_per_feature == 4 else batch.rows_per_feature


def reduce_innovation(batch, dz, Pz, Pxz):
    """Project each feature's rows onto the dominant directions of its P_z block.

    The four basis trilinearities of one feature have only three independent
    first-order directions on consistent geometry.  The fourth carries no
    information (its predicted variance is zero to first order) but does pick
    up second-order noise, so it is removed before inversion and gating.
    Returns ``(dz, Pz, Pxz, Q)`` with ``Q`` the block-diagonal projector.
    """
    k = batch.rows_per_feature
    r = feature_rank(batch)
    if r == k:
        return dz, Pz, Pxz, None
    blocks = []
    for f in range(batch.n_features):
        sl = slice(f * k, (f + 1) * k)
        _, V = np.linalg.eigh(Pz[sl, sl])
        blocks.append(V[:, k - r:].T)
    Q = block_diag(*blocks)
    Pr = Q @ Pz @ Q.T
    return Q @ dz, 0.5 * (Pr + Pr.T), Pxz @ Q.T, Q


def _pz_factor(Pz):
    """Cholesky factor of the equilibrated innovation covariance.

    The condition number is judged after symmetric diagonal scaling, since
    residual rows of different features can differ in scale by orders of
    magnitude without any loss of information.
    """
    if not np.all(np.isfinite(Pz)):
        raise SingularPz("innovation covariance is not finite")
    d = np.diag(Pz)
    if np.any(d <= 0):
        raise SingularPz("innovation covariance has a non-positive diagonal entry")
    w = 1.0 / np.sqrt(d)
    Pe = Pz * w[:, None] * w[None, :]
    lam = np.linalg.eigvalsh(Pe)
    if lam[0] <= 0 or lam[-1] / lam[0] > MAX_CONDITION:
        cond = np.inf if lam[0] <= 0 else lam[-1] / lam[0]
        raise SingularPz(f"condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}")
    return cho_factor(Pe, lower=True), w


def _solve_right(A, factor):
    """``A @ inv(Pz)`` from the equilibrated factorization."""
    c, w = factor
    return cho_solve(c, (A * w[None, :]).T).T * w[None, :]


def correct_nav(nav, dx):
    out = nav.copy()
    out.q_n_b = apply_error_rotation(nav.q_n_b, dx[ATT])
    out.b_g = nav.b_g + dx[BG]
    out.V_n = nav.V_n + dx[VEL]
    out.b_a = nav.b_a + dx[BA]
    out.Pos_n = nav.Pos_n + dx[POS]
    return out


def _posterior(fs, nav, K, Pz, dropped, H3=None, pair=None, Psz=None):
    """Corrected state with ``P - K Pz K^T``.

    With ``pair`` and ``Psz`` (the covariance of the stacked ``[dX3, dX2, dX1]``
    with the innovation) the covariances with the two snapshots are updated
    exactly and those with any other snapshot through the current state only,
    ``(I - K H3) C``.  Without them the transition accumulator becomes
    ``(I - K H3) phi``, which applies the same factor to every tracked
    covariance and keeps the chained ``Phi P1`` of a later pair that straddles
    this update consistent with the corrected covariance.
    """
    P = fs.P - K @ Pz @ K.T
    P = 0.5 * (P + P.T)
    stats = dict(fs.stats)
    lam, V = np.linalg.eigh(P)
    if lam[0] < 0:
        negative = -lam[lam < 0].sum()
        if negative > CLAMP_LIMIT * max(np.trace(fs.P), np.finfo(float).tiny):
            raise NonPsdResult(f"posterior covariance lost {negative:.3e} to clamping")
        P = (V * np.clip(lam, 0.0, None)) @ V.T
        P = 0.5 * (P + P.T)
        stats["clamped"] += 1
    stats["updates"] += 1
    stats["dropped"] += dropped
    if pair is None or Psz is None:
        phi = fs.phi if H3 is None else (np.eye(N_STATE) - K @ H3) @ fs.phi
        return FilterState(nav, P, fs.t, phi.copy(), fs.updates_since_snapshot + 1, stats)
    A = np.eye(N_STATE) - K @ H3
    cross = {t: A @ fs.cross_covariance(t) for t in fs.cross}
    for t, rows in ((pair.snap2.t, slice(N_STATE, 2 * N_STATE)),
                    (pair.snap1.t, slice(2 * N_STATE, 3 * N_STATE))):
        cross[t] = fs.cross_covariance(t) - K @ Psz[rows].T
    return FilterState(nav, P, fs.t, np.eye(N_STATE), fs.updates_since_snapshot + 1, stats,
                       cross)


def _correction(fs, pair, batch, cross_terms=None, offset=None):
    """Correction of the current state, its gain, the reduced P_z, joint cross covariance and H3."""
    dz, Pz, Psz = _linearized(fs, pair, batch, cross_terms, offset)
    dz, Pz, Psz, Q = reduce_innovation(batch, dz, Pz, Psz)
    K = _solve_right(Psz[:N_STATE], _pz_factor(Pz))
    H3 = batch.H3 if Q is None else Q @ batch.H3
    return K @ dz, K, Pz, Psz, H3


def update(fs, pair, batch, mode=UpdateMode.LOOP, cross_terms=None):
    """Kalman correction of the current state; returns a new FilterState.

    Tracked snapshot covariances are updated when ``cross_terms`` is given.
    """
    dx, K, Pz, Psz, H3 = _correction(fs, pair, batch, cross_terms)
    logger.debug("%s update at t=%.2f with %d features", mode.value, fs.t, batch.n_features)
    return _posterior(fs, correct_nav(fs.nav, dx), K, Pz, batch.dropped, H3,
                      *((pair, Psz) if cross_terms is not None else ()))


def gate(fs, pair, batch, probability=GATE_PROBABILITY, cross_terms=None, offset=None):
    """Indices of features whose residual passes a chi-square test on its own P_z block.

    The test has as many degrees of freedom as the feature has independent rows.
    """
    dz, Pz, Psz = _linearized(fs, pair, batch, cross_terms, offset)
    dz, Pz, _, _ = reduce_innovation(batch, dz, Pz, Psz)
    r = feature_rank(batch)
    threshold = chi2.ppf(probability, r)
    keep = []
    for f in range(batch.n_features):
        sl = slice(f * r, (f + 1) * r)
        res = dz[sl]
        d2 = res @ np.linalg.pinv(Pz[sl, sl], rcond=PZ_RCOND, hermitian=True) @ res
        if d2 <= threshold:
            keep.append(f)
    return keep


def _iterate(fs, pair, triplets, settings, cross_terms):
    """Gate and correct, relinearizing the current state until the correction settles.

    Returns ``(offset, K, Pz, Psz, H3, batch, n_gated)``; ``batch`` is None when
    no feature survives stacking or gating.
    """
    scale = np.sqrt(np.diag(fs.P)) + np.finfo(float).tiny
    offset = np.zeros(N_STATE)
    n_gated = 0
    for it in range(settings.iterations):
        lin = FilterState(correct_nav(fs.nav, offset), fs.P, fs.t, fs.phi) if it else fs
        batch = stack_measurements(triplets, triple_pose(pair, lin, settings.C_c_b),
                                   settings.method, settings.normalize, settings.pixel_cov,
                                   settings.basis)
        if batch.n_features == 0:
            return offset, None, None, None, None, None, 0
        keep = gate(lin, pair, batch, settings.gate_probability, cross_terms, offset)
        n_gated = batch.n_features - len(keep)
        if not keep:
            return offset, None, None, None, None, None, n_gated
        if n_gated:
            batch = batch.subset(keep)
        dx, K, Pz, Psz, H3 = _correction(lin, pair, batch, cross_terms, offset)
        step = np.max(np.abs(dx - offset) / scale)
        offset = dx
        if step < settings.tolerance:
            break
    else:
        if settings.iterations > 1:
            logger.warning("update at t=%.2f stopped after %d iterations (last step %.2e sigma)",
                           fs.t, settings.iterations, step)
    return offset, K, Pz, Psz, H3, batch, n_gated


def process_epoch(fs, pair, triplets, mode=UpdateMode.LOOP, settings=None):
    """Gate the features of one image triple and update; empty epochs are propagation-only.

    With ``settings.iterations > 1`` the current state is relinearized at its
    corrected value (snapshots stay where they were stored) until the
    correction settles.  Gating is redone at every linearization and the
    covariance is that of the last one.
    """
    settings = settings or UpdateSettings()
    if settings.cross_covariance not in CROSS_MODES:
        raise ValueError(f"cross_covariance must be one of {CROSS_MODES}")
    triplets = list(triplets)
    if not triplets:
        return fs
    cross_terms = None
    track = settings.cross_covariance == "tracked" or (
        settings.cross_covariance == "auto" and mode is UpdateMode.SEQUENTIAL)
    if track:
        cross_terms = tracked_cross_terms(fs, pair)
        if cross_terms is None:
            logger.debug("snapshot covariances at t=%.2f not tracked; neglecting them", fs.t)

    offset, K, Pz, Psz, H3, batch, n_gated = _iterate(fs, pair, triplets, settings, cross_terms)
    if batch is None:
        stats = dict(fs.stats)
        stats["gated"] += n_gated
        fs.stats = stats
        return fs
    logger.debug("%s update at t=%.2f: %d features, %d gated",
                 mode.value, fs.t, batch.n_features, n_gated)
    out = _posterior(fs, correct_nav(fs.nav, offset), K, Pz, batch.dropped, H3,
                     *((pair, Psz) if cross_terms is not None else ()))
    out.stats["gated"] += n_gated
    return out
