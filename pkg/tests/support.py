"""Independent oracles shared by the tests.

Poses come from scipy's Rotation (not the package quaternion code) and LOS
vectors from a plain pinhole projection of a landmark, so consistent
triplets do not depend on any code under test.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from trifocal_nav.ins import N_STATE
from trifocal_nav.trifocal import FeatureTriplet, TriplePose, evaluate

FOCAL = 1570.0


def random_rotation(rng, max_angle=None):
    """Random rotation matrix; uniform over SO(3) or bounded in angle."""
    if max_angle is None:
        return Rotation.random(random_state=rng.integers(2 ** 31)).as_matrix()
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()


def random_poses(rng, spread=50.0, C_c_b=None):
    """Three camera poses looking roughly at a common region below them."""
    down = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    C_c_b = np.eye(3) if C_c_b is None else C_c_b
    # C_c_to_n = C_b_n C_c_b = down R, a perturbed nadir-looking camera
    C_b_n = np.stack([down @ random_rotation(rng, 0.3) @ C_c_b.T for _ in range(3)])
    Pos = np.stack([rng.uniform(-spread, spread, 3) * [1, 1, 0.2] + [0, 0, -300.0]
                    for _ in range(3)])
    return TriplePose(Pos, C_b_n, C_c_b)


def project(landmark, poses, view, focal=FOCAL):
    """Pinhole LOS ``[x, y, f]`` of a navigation-frame landmark in camera ``view``."""
    p_c = poses.C_c_to_n[view].T @ (landmark - poses.Pos_n[view])
    return focal * p_c / p_c[2]


def consistent_triplet(rng, poses, feature_id=0, focal=FOCAL):
    """Noise-free triplet of a landmark in front of all three cameras."""
    while True:
        landmark = np.array([*rng.uniform(-150, 150, 2), rng.uniform(-20, 20)])
        depths = [(poses.C_c_to_n[v].T @ (landmark - poses.Pos_n[v]))[2] for v in range(3)]
        if min(depths) > 50.0:
            break
    los = [project(landmark, poses, v, focal) for v in range(3)]
    return FeatureTriplet.from_vectors(*los, feature_id=feature_id), landmark


def random_triplet(rng, focal=FOCAL):
    """Triplet of unrelated LOS vectors (generally inconsistent)."""
    return FeatureTriplet.from_vectors(*[np.append(rng.uniform(-600, 600, 2), focal)
                                         for _ in range(3)])


def perturbed(poses, dx_views):
    """Poses with error-state perturbations ``dx_views[v]`` (15-vectors) applied.

    Uses the right-multiplicative attitude error ``C_true = C_est (I + [dtheta x])``
    written as a rotation (scipy rotvec) and ``Pos_true = Pos_est + dPos``.
    """
    C = np.stack([poses.C_b_n[v] @ Rotation.from_rotvec(dx_views[v][0:3]).as_matrix()
                  for v in range(3)])
    P = np.stack([poses.Pos_n[v] + dx_views[v][12:15] for v in range(3)])
    return TriplePose(P, C, poses.C_c_b)


def numeric_jacobians(trip, poses, method, normalize, basis, h=1e-6):
    """Central differences of z over pose error states and camera-frame LOS."""
    def z_at(p, los):
        return evaluate(los[None], p, method, normalize, basis)[0][0]

    los = trip.as_array()
    k = len(z_at(poses, los))
    H = np.zeros((3, k, N_STATE))
    steps = np.r_[np.full(3, h), np.zeros(9), np.full(3, h * 100)]
    for v in range(3):
        for i in (0, 1, 2, 12, 13, 14):
            dx = np.zeros((3, N_STATE))
            dx[v, i] = steps[i]
            H[v, :, i] = (z_at(perturbed(poses, dx), los)
                          - z_at(perturbed(poses, -dx), los)) / (2 * steps[i])
    D = np.zeros((k, 9))
    for j in range(9):
        d = np.zeros(9)
        d[j] = 1e-4
        D[:, j] = (z_at(poses, los + d.reshape(3, 3)) - z_at(poses, los - d.reshape(3, 3))) / 2e-4
    return H, D


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def report(criterion, ok, detail, informational=False):
    tag = "INFO" if informational else ("PASS" if ok else "FAIL")
    line = f"[{tag}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
