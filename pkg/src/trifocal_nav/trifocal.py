"""Trifocal-tensor residuals and their analytic Jacobians.

Three views of one landmark give LOS vectors ``x, x', x''`` (camera frames
c1, c2, c3).  Rotated into the navigation frame they are written ``a, b, c``
below, and with ``T12 = Pos2 - Pos1``, ``T23 = Pos3 - Pos2`` the residual
matrix is::

    M = [b x] a T23^T [c x] - [b x] [(a x T12) x] [c x]
      = -(b x a)(c x T13)^T + (b x T12)(c x a)^T          (T13 = T12 + T23)

which vanishes for consistent geometry.  The filter uses the entries
``m11, m13, m31, m33``; the three-view constraint is the trace of ``M``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .errors import EmptyBatch, FrameMismatch, IndexOutOfRange
from .geometry import NAV, Los, skew, skew_batch
from .ins import ATT, N_STATE, POS

TRIFOCAL = "trifocal"
THREEVIEW = "threeview"
METHODS = (TRIFOCAL, THREEVIEW)

# (row, col) of m11, m13, m31, m33 (zero-based)
BASIS = ((0, 0), (0, 2), (2, 0), (2, 2))
_BASIS_ROWS = np.array([i for i, _ in BASIS])
_BASIS_COLS = np.array([j for _, j in BASIS])

NAV_BASIS = "nav"
CAMERA_BASIS = "camera"
BASES = (NAV_BASIS, CAMERA_BASIS)

DEGENERACY_RATIO = 1e-10
DEFAULT_PIXEL_COV = np.diag([1.0, 1.0, 0.0])


@dataclass(frozen=True)
class CameraTriplet:
    """Camera matrices ``[I|0], [A|a4], [B|b4]`` relative to the first camera."""

    A: np.ndarray
    a4: np.ndarray
    B: np.ndarray
    b4: np.ndarray


@dataclass(frozen=True)
class FeatureTriplet:
    x: Los
    x1: Los
    x2: Los
    feature_id: int = 0

    def __post_init__(self):
        for los, tag in ((self.x, "c1"), (self.x1, "c2"), (self.x2, "c3")):
            if los.frame != tag:
                raise FrameMismatch(f"expected LOS in {tag}, got {los.frame}")

    @classmethod
    def from_vectors(cls, x, x1, x2, feature_id=0):
        return cls(Los(x, "c1"), Los(x1, "c2"), Los(x2, "c3"), feature_id)

    def as_array(self):
        return np.stack([self.x.vec, self.x1.vec, self.x2.vec])


@dataclass(frozen=True)
class TriplePose:
    """Estimated (or true) poses at the three image times.

    ``C_b_n[k]`` is the body-to-navigation rotation at view ``k`` and
    ``C_c_b`` the fixed camera mounting.
    """

    Pos_n: np.ndarray  # (3, 3), one row per view
    C_b_n: np.ndarray  # (3, 3, 3)
    C_c_b: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "Pos_n", np.asarray(self.Pos_n, dtype=float).reshape(3, 3))
        object.__setattr__(self, "C_b_n", np.asarray(self.C_b_n, dtype=float).reshape(3, 3, 3))
        object.__setattr__(self, "C_c_b", np.asarray(self.C_c_b, dtype=float).reshape(3, 3))

    @property
    def C_c_to_n(self):
        return self.C_b_n @ self.C_c_b

    @property
    def T12(self):
        return self.Pos_n[1] - self.Pos_n[0]

    @property
    def T23(self):
        return self.Pos_n[2] - self.Pos_n[1]


@dataclass(frozen=True)
class TrifocalResidual:
    z1: np.ndarray
    M: np.ndarray


def camera_triplet(poses):
    """Relative camera matrices implied by three navigation-frame poses."""
    R1, R2, R3 = poses.C_c_to_n
    p1, p2, p3 = poses.Pos_n
    return CameraTriplet(A=R2.T @ R1, a4=R2.T @ (p2 - p1),
                         B=R3.T @ R1, b4=R3.T @ (p3 - p1))


def tensor_slices(cams):
    """``T_i = a_i b4^T - a4 b_i^T`` for i = 1..3 (columns of A and B)."""
    A, B = np.asarray(cams.A), np.asarray(cams.B)
    a4, b4 = np.asarray(cams.a4), np.asarray(cams.b4)
    return tuple(np.outer(A[:, i], b4) - np.outer(a4, B[:, i]) for i in range(3))


def residual_camera_frame(trip, cams):
    """Incidence relation ``[x' x](sum_i x_i T_i)[x'' x]`` in camera coordinates."""
    T = tensor_slices(cams)
    x = trip.x.vec
    middle = x[0] * T[0] + x[1] * T[1] + x[2] * T[2]
    return skew(trip.x1.vec) @ middle @ skew(trip.x2.vec)


def _vec(v):
    if isinstance(v, Los):
        if v.frame != NAV:
            raise FrameMismatch("navigation-frame LOS required")
        return v.vec
    return np.asarray(v, dtype=float)


def build_M(x_n, x1_n, x2_n, T12_n, T23_n):
    """Residual matrix from navigation-frame LOS vectors and baselines."""
    a, b, c = _vec(x_n), _vec(x1_n), _vec(x2_n)
    T12, T23 = np.asarray(T12_n, dtype=float), np.asarray(T23_n, dtype=float)
    Sb, Sc = skew(b), skew(c)
    return Sb @ np.outer(a, T23) @ Sc - Sb @ skew(np.cross(a, T12)) @ Sc


def m_entry(i, j, x_n, x1_n, x2_n, T12_n, T23_n):
    """Closed-form element ``m_ij`` (1-based indices) via the E_ij expansion."""
    if i not in (1, 2, 3) or j not in (1, 2, 3):
        raise IndexOutOfRange(f"m_{i}{j} is not an element of a 3x3 matrix")
    a, b, c = _vec(x_n), _vec(x1_n), _vec(x2_n)
    T12, T23 = np.asarray(T12_n, dtype=float), np.asarray(T23_n, dtype=float)
    E = np.zeros((3, 3))
    E[i - 1, j - 1] = 1.0
    ba = np.cross(b, a)
    return (-ba @ E @ np.cross(c, T23)
            - ba @ E @ np.cross(c, T12)
            + np.cross(b, T12) @ E @ np.cross(c, a))


def threeview_value(x_n, x1_n, x2_n, T12_n, T23_n):
    """Three-view constraint in the ``m11 + m22 + m33`` form.

    ``-(x' x x)^T (x'' x T23) + (x x T12)^T (x'' x x')``; zero when the two
    sides of the classical three-view relation agree.
    """
    a, b, c = _vec(x_n), _vec(x1_n), _vec(x2_n)
    return (-np.cross(b, a) @ np.cross(c, np.asarray(T23_n, dtype=float))
            + np.cross(a, np.asarray(T12_n, dtype=float)) @ np.cross(c, b))


def residual_trifocal(trip, poses):
    """Basis residual ``[m11, m13, m31, m33]`` at the given poses (unnormalized)."""
    a, b, c = (poses.C_c_to_n @ trip.as_array()[:, :, None])[:, :, 0]
    M = build_M(a, b, c, poses.T12, poses.T23)
    return TrifocalResidual(z1=M[_BASIS_ROWS, _BASIS_COLS].copy(), M=M)


def residual_threeview(trip, poses):
    """Scalar three-view residual (equal to ``trace(M)``) at the given poses."""
    a, b, c = (poses.C_c_to_n @ trip.as_array()[:, :, None])[:, :, 0]
    return float(threeview_value(a, b, c, poses.T12, poses.T23))


# -- vectorized evaluation -------------------------------------------------------

def _select(X, method):
    """Pick the residual rows out of an array indexed ``[f, i, j, ...]``."""
    if method == TRIFOCAL:
        return X[:, _BASIS_ROWS, _BASIS_COLS]
    if method == THREEVIEW:
        return (X[:, 0, 0] + X[:, 1, 1] + X[:, 2, 2])[:, None]
    raise ValueError(f"unknown method {method!r}")


def evaluate(los_cam, poses, method=TRIFOCAL, normalize=True, basis=NAV_BASIS):
    """Residuals and Jacobians for a batch of features.

    ``los_cam`` has shape ``(N, 3, 3)``: feature, view, component (camera frame).
    Returns ``z (N, k)``, ``H (3, N, k, 15)`` for views 1..3 and ``D (N, k, 9)``
    (derivatives with respect to the three camera-frame LOS vectors).
    Attitude columns follow the right-multiplicative body-frame error.

    ``basis`` selects where the four trifocal entries are read: ``"nav"``
    takes them from ``M`` itself, ``"camera"`` from ``C_n^c2 M C_c3^n``, the
    same matrix expressed in the second and third camera frames (image-axis
    lines), which does not change under a common rotation of all three poses.
    """
    if basis not in BASES:
        raise ValueError(f"unknown basis {basis!r}")
    los_cam = np.asarray(los_cam, dtype=float)
    n = los_cam.shape[0]
    C_cn = poses.C_c_to_n
    los_b = np.einsum("ij,fvj->fvi", poses.C_c_b, los_cam)
    los_n = np.einsum("vij,fvj->fvi", poses.C_b_n, los_b)
    a, b, c = los_n[:, 0], los_n[:, 1], los_n[:, 2]
    T12 = poses.T12
    T13 = poses.Pos_n[2] - poses.Pos_n[0]

    u = np.cross(b, a)
    w = np.cross(c, T13)
    r = np.cross(b, T12)
    s = np.cross(c, a)
    M = -np.einsum("fi,fj->fij", u, w) + np.einsum("fi,fj->fij", r, s)

    Sa, Sb, Sc = skew_batch(a), skew_batch(b), skew_batch(c)
    S12, S13 = skew(T12), skew(T13)
    dM_da = -np.einsum("fj,fik->fijk", w, Sb) + np.einsum("fi,fjk->fijk", r, Sc)
    dM_db = np.einsum("fj,fik->fijk", w, Sa) - np.einsum("fj,ik->fijk", s, S12)
    dM_dc = np.einsum("fi,jk->fijk", u, S13) - np.einsum("fi,fjk->fijk", r, Sa)
    dM_dT12 = np.einsum("fj,fik->fijk", s, Sb)
    dM_dT13 = -np.einsum("fi,fjk->fijk", u, Sc)

    camera = basis == CAMERA_BASIS and method == TRIFOCAL
    if camera:
        R2, R3 = C_cn[1], C_cn[2]
        M_nav = M
        M = np.einsum("pi,fpq,qj->fij", R2, M_nav, R3)
        dM_da, dM_db, dM_dc, dM_dT12, dM_dT13 = (
            np.einsum("pi,fpqk,qj->fijk", R2, X, R3)
            for X in (dM_da, dM_db, dM_dc, dM_dT12, dM_dT13))

    z = _select(M, method)
    dz_dlos = [_select(dM_da, method), _select(dM_db, method), _select(dM_dc, method)]
    dz_dT12 = _select(dM_dT12, method)
    dz_dT13 = _select(dM_dT13, method)

    if normalize:
        scale = np.prod(np.linalg.norm(los_cam, axis=2), axis=1)  # rotation invariant
    else:
        scale = np.ones(n)
    inv = (1.0 / scale)[:, None]
    z = z * inv
    inv3 = inv[:, :, None]

    dz_dT12 = dz_dT12 * inv3
    dz_dT13 = dz_dT13 * inv3
    base = 1.0
    if normalize:
        # z is homogeneous of degree one in (T12, T13) jointly, so an update
        # could shrink noisy residuals by shrinking the common scale.  Dividing
        # by |T12| removes that direction and keeps z linear in Pos3.
        base = np.sqrt(T12 @ T12)
        if base == 0.0:
            raise ValueError("first two camera centres coincide")
        z = z / base
        dz_dT12 = (dz_dT12 - z[:, :, None] * T12 / base) / base
        dz_dT13 = dz_dT13 / base
    inv3 = inv3 / base

    k = z.shape[1]
    H = np.zeros((3, n, k, N_STATE))
    dpos = (-(dz_dT12 + dz_dT13), dz_dT12, dz_dT13)
    D = np.zeros((n, k, 9))
    for v in range(3):
        # d(los_n)/d(dtheta_v) = -C_b_n[v] [los_b x]
        dlos_dtheta = -np.einsum("ij,fjk->fik", poses.C_b_n[v], skew_batch(los_b[:, v]))
        H[v, :, :, ATT] = np.einsum("fki,fij->fkj", dz_dlos[v], dlos_dtheta) * inv3
        H[v, :, :, POS] = dpos[v]
        Dv = np.einsum("fki,ij->fkj", dz_dlos[v], C_cn[v]) * inv3
        if normalize:
            x = los_cam[:, v]
            Dv = Dv - z[:, :, None] * (x / np.sum(x * x, axis=1)[:, None])[:, None, :]
        D[:, :, 3 * v:3 * v + 3] = Dv
    if camera:
        # the frame change itself rotates with the second and third attitudes
        g = np.einsum("pi,fpq,qj->fij", poses.C_b_n[1], M_nav, R3)  # column j: C_b2^T M R3 e_j
        h = np.einsum("pi,fqp,qj->fij", poses.C_b_n[2], M_nav, R2)  # column i: C_b3^T M^T R2 e_i
        Ci = poses.C_c_b[:, _BASIS_ROWS].T
        Cj = poses.C_c_b[:, _BASIS_COLS].T
        d2 = np.cross(Ci[None], np.moveaxis(g[:, :, _BASIS_COLS], 1, 2))
        d3 = np.cross(Cj[None], np.moveaxis(h[:, :, _BASIS_ROWS], 1, 2))
        H[1, :, :, ATT] += d2 * inv3
        H[2, :, :, ATT] += d3 * inv3
    return z, H, D


def jacobians(trip, poses, method=TRIFOCAL, normalize=True, basis=NAV_BASIS):
    """``H1, H2, H3`` (k x 15) and ``D`` (k x 9) for one feature."""
    _, H, D = evaluate(trip.as_array()[None], poses, method, normalize, basis)
    return H[0, 0], H[1, 0], H[2, 0], D[0]


@dataclass
class MeasurementBatch:
    """Stacked residuals of N accepted features.

    ``D`` is block-diagonal (each feature only depends on its own LOS vectors)
    and is stored per feature; the dense ``D`` and ``R_full`` are assembled on
    demand.
    """

    z: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    H3: np.ndarray
    D_blocks: np.ndarray  # (N, k, 9)
    pixel_cov: np.ndarray
    feature_ids: list
    method: str = TRIFOCAL
    dropped: int = 0

    @property
    def n_features(self):
        return self.D_blocks.shape[0]

    @property
    def rows_per_feature(self):
        return self.D_blocks.shape[1]

    @property
    def D(self):
        return block_diag(*self.D_blocks)

    @property
    def R_full(self):
        return block_diag(*([self.pixel_cov] * (3 * self.n_features)))

    def noise_blocks(self):
        """Per-feature ``D_f R D_f^T`` blocks, shape ``(N, k, k)``."""
        R9 = block_diag(self.pixel_cov, self.pixel_cov, self.pixel_cov)
        return np.einsum("fai,ij,fbj->fab", self.D_blocks, R9, self.D_blocks)

    def subset(self, keep):
        keep = np.asarray(keep, dtype=int)
        k = self.rows_per_feature
        rows = (keep[:, None] * k + np.arange(k)).ravel()
        return MeasurementBatch(self.z[rows], self.H1[rows], self.H2[rows], self.H3[rows],
                                self.D_blocks[keep], self.pixel_cov,
                                [self.feature_ids[i] for i in keep], self.method, self.dropped)


def stack_measurements(triplets, poses, method=TRIFOCAL, normalize=True,
                       pixel_cov=DEFAULT_PIXEL_COV, basis=NAV_BASIS):
    """Evaluate and stack residuals/Jacobians for all triplets, in input order.

    Features whose Jacobian is rank deficient (collinear camera centres,
    landmark on a baseline) are dropped and counted in ``batch.dropped``.
    """
    triplets = list(triplets)
    if not triplets:
        raise EmptyBatch("no feature triplets to stack")
    los = np.stack([t.as_array() for t in triplets])
    z, H, D = evaluate(los, poses, method, normalize, basis)
    n, k = z.shape

    J = np.concatenate([H[2], H[1], H[0], D], axis=2)
    sv = np.linalg.svd(J, compute_uv=False)
    need = min(k, 3) - 1
    ok = (sv[:, 0] > 0) & (sv[:, need] > DEGENERACY_RATIO * sv[:, 0])
    keep = np.flatnonzero(ok)
    ids = [t.feature_id for t in triplets]
    batch = MeasurementBatch(z.reshape(-1), H[0].reshape(-1, N_STATE), H[1].reshape(-1, N_STATE),
                             H[2].reshape(-1, N_STATE), D, np.asarray(pixel_cov, dtype=float),
                             ids, method)
    if len(keep) < n:
        batch = batch.subset(keep)
        batch.dropped = n - len(keep)
    return batch
