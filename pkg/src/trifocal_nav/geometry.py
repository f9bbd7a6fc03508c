"""Frame conventions and small rotation algebra.

Conventions used everywhere in the package:

* Quaternions are stored scalar-last, ``q = [x, y, z, w]``, and compose with
  the Hamilton product.
* ``quat_to_rot(q)`` returns the matrix that maps body-frame coordinates into
  the navigation frame (C_b^n) when ``q`` is a vehicle attitude.
* A small attitude error ``dtheta`` is applied on the right,
  ``q_true = q_est * [0.5 dtheta, 1]``, which is the body-frame error used by
  the error-state dynamics.
* Navigation frame is North-East-Down.
"""

from dataclasses import dataclass

import numpy as np

from .errors import FrameMismatch, NonUnitQuaternion

NAV = "n"
CAMERA_FRAMES = ("c1", "c2", "c3")

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def skew(v):
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v):
    """Stack of cross-product matrices for an ``(N, 3)`` array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_multiply(p, q):
    """Hamilton product ``p * q`` for scalar-last quaternions."""
    px, py, pz, pw = p
    qx, qy, qz, qw = q
    return np.array([
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
        pw * qw - px * qx - py * qy - pz * qz,
    ])


def quat_conjugate(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.append(np.sin(half) * axis, np.cos(half))


def quat_from_rotvec(rv):
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv)
    if angle < 1e-12:
        return quat_normalize(np.append(0.5 * rv, 1.0))
    return quat_from_axis_angle(rv / angle, angle)


def quat_to_rot(q):
    """Rotation matrix of a unit quaternion.

    Raises NonUnitQuaternion when ``| |q| - 1 | > 1e-9``.
    """
    q = np.asarray(q, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise NonUnitQuaternion(f"|q| = {np.linalg.norm(q)!r}")
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def rot_to_quat(R):
    """Inverse of :func:`quat_to_rot` (Shepperd's method), returned with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
                      0.25 * s, (R[1, 0] - R[0, 1]) / s])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def apply_error_rotation(q, dtheta):
    """Compose ``q`` with the small error quaternion ``[0.5 dtheta, 1]`` and renormalize."""
    dq = np.array([0.5 * dtheta[0], 0.5 * dtheta[1], 0.5 * dtheta[2], 1.0])
    return quat_normalize(quat_multiply(q, dq))


def attitude_error(q_true, q_est):
    """Small-angle vector ``dtheta`` with ``q_true ~= q_est * [0.5 dtheta, 1]``."""
    dq = quat_multiply(quat_conjugate(q_est), q_true)
    if dq[3] < 0:
        dq = -dq
    return 2.0 * dq[:3] / dq[3]


def rotation_angle(q1, q2):
    """Angle in radians of the relative rotation between two unit quaternions."""
    dq = quat_multiply(quat_conjugate(q1), q2)
    return 2.0 * np.arctan2(np.linalg.norm(dq[:3]), abs(dq[3]))


def is_rotation(R, tol=1e-12):
    R = np.asarray(R, dtype=float)
    return (np.abs(R.T @ R - np.eye(3)).max() <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class Los:
    """Line-of-sight vector ``[x, y, f]`` tagged with the frame it is expressed in."""

    vec: np.ndarray
    frame: str

    def __post_init__(self):
        vec = np.asarray(self.vec, dtype=float).reshape(3)
        if not np.all(np.isfinite(vec)):
            raise ValueError("LOS vector must be finite")
        if self.frame != NAV and self.frame not in CAMERA_FRAMES:
            raise FrameMismatch(f"unknown frame tag {self.frame!r}")
        object.__setattr__(self, "vec", vec)

    @classmethod
    def from_normalized(cls, u_norm, v_norm, focal, frame):
        return cls(np.array([u_norm * focal, v_norm * focal, focal]), frame)


def los_to_nav(x, C_c_to_n):
    """Express a camera-frame LOS in the navigation frame."""
    if x.frame == NAV:
        raise FrameMismatch("LOS is already expressed in the navigation frame")
    return Los(np.asarray(C_c_to_n) @ x.vec, NAV)
