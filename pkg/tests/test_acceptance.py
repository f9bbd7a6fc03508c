"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``[PASS]``/``[FAIL]`` line (also collected in the
terminal summary).  The Monte-Carlo criteria share one 25-run experiment of
the reference loop scenario.
"""

import dataclasses
import time

import numpy as np
import pytest

from support import consistent_triplet, numeric_jacobians, random_poses, random_triplet, report
from trifocal_nav import cli
from trifocal_nav.config import ExperimentConfig, from_dict
from trifocal_nav.geometry import rot_to_quat
from trifocal_nav.experiment import build_scenario, feature_count_study, run_monte_carlo, run_single
from trifocal_nav.iekf import (FilterState, PoseSnapshot, SnapshotPair, UpdateMode, UpdateSettings,
                               process_epoch)
from trifocal_nav.ins import ATT, BA, N_STATE, POS, VEL, NavState
from trifocal_nav.sim import DOWNWARD_CAMERA
from trifocal_nav.trifocal import (CAMERA_BASIS, NAV_BASIS, THREEVIEW, TRIFOCAL, camera_triplet,
                                   jacobians, residual_camera_frame, residual_threeview,
                                   residual_trifocal)

N_CONFIGS = 1000
METHODS = ("trifocal", "threeview", "ins")


def translation_scale(trip, poses):
    los = trip.as_array()
    T = max(np.linalg.norm(poses.T12), np.linalg.norm(poses.T12 + poses.T23))
    return np.prod(np.linalg.norm(los, axis=1)) * T


def test_criterion_1_trifocal_nullity():
    rng = np.random.default_rng(101)
    cases = []
    for _ in range(N_CONFIGS):
        poses = random_poses(rng, C_c_b=DOWNWARD_CAMERA if rng.random() < 0.5 else None)
        cases.append((consistent_triplet(rng, poses)[0], poses))
    t0 = time.perf_counter()
    Ms = [residual_trifocal(trip, poses).M for trip, poses in cases]
    elapsed = time.perf_counter() - t0
    worst = max(np.abs(M).max() / translation_scale(trip, poses)
                for M, (trip, poses) in zip(Ms, cases))
    ok = report(1, worst < 1e-9 and elapsed < 1.0,
                f"max |M|/scale = {worst:.2e} (< 1e-9) over {N_CONFIGS} configs in {elapsed:.3f} s (< 1 s)")
    assert ok


def test_criterion_2_trace_identity():
    rng = np.random.default_rng(102)
    worst = 0.0
    for i in range(N_CONFIGS):
        poses = random_poses(rng)
        trip = consistent_triplet(rng, poses)[0] if i % 2 else random_triplet(rng)
        M = residual_trifocal(trip, poses).M
        tv = residual_threeview(trip, poses)
        # an exact triplet has trace 0: measure it against the size of its inputs instead
        ref = translation_scale(trip, poses) if i % 2 else abs(tv)
        worst = max(worst, abs(np.trace(M) - tv) / ref)
    ok = report(2, worst < 1e-12, f"max |trace(M) - threeview| relative = {worst:.2e} (< 1e-12)")
    assert ok


def test_criterion_3_camera_frame_equivalence():
    rng = np.random.default_rng(103)
    worst = 0.0
    for i in range(N_CONFIGS):
        poses = random_poses(rng, C_c_b=DOWNWARD_CAMERA if i % 2 else None)
        trip = random_triplet(rng) if i % 3 else consistent_triplet(rng, poses)[0]
        R = poses.C_c_to_n
        M_cam = residual_camera_frame(trip, camera_triplet(poses))
        M_nav = residual_trifocal(trip, poses).M
        # an exact triplet has M = 0: measure it against the size of its inputs instead
        ref = np.abs(M_nav).max() if i % 3 else translation_scale(trip, poses)
        worst = max(worst, np.abs(R[1] @ M_cam @ R[2].T - M_nav).max() / ref)
    ok = report(3, worst < 1e-10, f"max relative mismatch = {worst:.2e} (< 1e-10)")
    assert ok


def test_criterion_4_jacobians():
    rng = np.random.default_rng(104)
    configs = [(m, n, b) for m in (TRIFOCAL, THREEVIEW) for n in (True, False)
               for b in (NAV_BASIS, CAMERA_BASIS)]
    worst = 0.0
    for i in range(500):
        method, normalize, basis = configs[i % len(configs)]
        poses = random_poses(rng, C_c_b=DOWNWARD_CAMERA if rng.random() < 0.5 else None)
        trip = random_triplet(rng) if rng.random() < 0.5 else consistent_triplet(rng, poses)[0]
        H1, H2, H3, D = jacobians(trip, poses, method, normalize, basis)
        Hn, Dn = numeric_jacobians(trip, poses, method, normalize, basis)
        analytic = np.concatenate([H1, H2, H3, D], axis=1)
        numeric = np.concatenate([*Hn, Dn], axis=1)
        worst = max(worst, np.abs(analytic - numeric).max() / np.abs(analytic).max())
    ok = report(4, worst < 1e-5, f"max relative FD error = {worst:.2e} (< 1e-5) over 500 configs")
    assert ok


@pytest.fixture(scope="module")
def monte_carlo():
    cfg = from_dict({"runs": 25, "n_features": 40, "methods": list(METHODS)})
    t0 = time.perf_counter()
    mc = run_monte_carlo(cfg, keep_results=True)
    return mc, time.perf_counter() - t0


def _pos_sigma(mc, method, t):
    return mc.mean_sigma[method][mc.index(t), POS]


def test_criterion_5a_position_sigma_single_digit(monte_carlo):
    mc, elapsed = monte_carlo
    lines, ok = [], elapsed < 300
    for m in ("trifocal", "threeview"):
        for t in (90.0, 160.0):
            s = _pos_sigma(mc, m, t)
            ok &= bool(np.all(s < 10.0))
            lines.append(f"{m}@{t:g}s sigma=[{', '.join(f'{v:.1f}' for v in s)}]")
    ins = np.linalg.norm(mc.mean_sigma["ins"][:, POS], axis=1)
    grows = bool(np.all(np.diff(ins) > 0) and ins[-1] > 10 * ins[0])
    ok &= grows
    lines.append(f"INS sigma {ins[0]:.0f} -> {ins[mc.index(90.0)]:.0f} -> {ins[-1]:.0f} m "
                 f"({'growing' if grows else 'not growing'})")
    assert report("5a", ok, "; ".join(lines) + f"; runtime {elapsed:.0f} s (< 300 s)")


def test_criterion_5b_trifocal_not_worse_than_threeview(monte_carlo):
    mc, _ = monte_carlo
    ok, parts = True, []
    for t in (90.0, 160.0):
        i = mc.index(t)
        a, b = mc.pos_rmse["trifocal"][i], mc.pos_rmse["threeview"][i]
        ok &= bool(a <= b)
        parts.append(f"t={t:g}s trifocal {a:.1f} m vs threeview {b:.1f} m")
    assert report("5b", ok, "; ".join(parts))


def test_criterion_5c_velocity_and_accel_bias_sigma(monte_carlo):
    mc, _ = monte_carlo
    ok, parts = True, []
    for m in ("trifocal", "threeview"):
        for t in (90.0, 160.0):
            i = mc.index(t)
            for name, sl in (("vel", VEL), ("acc bias", BA)):
                red = mc.mean_sigma[m][i, sl] / mc.mean_sigma["ins"][i, sl]
                ok &= bool(np.all(red < 1.0))
                parts.append(f"{m}@{t:g} {name} ratio max {red.max():.2f}")
    assert report("5c", ok, "sigma/INS-only sigma < 1 in all axes: " + "; ".join(parts))


def test_criterion_6_feature_count_plateau():
    rows = dict(feature_count_study(ExperimentConfig(), counts=[5, 40, 80], runs=10))
    r5, r40, r80 = rows[5], rows[40], rows[80]
    plateau = abs(r80 - r40) <= 0.2 * r40
    steep = r5 >= 1.5 * r40
    assert report(6, plateau and steep,
                  f"RMSE N=5 {r5:.2f} m, N=40 {r40:.2f} m, N=80 {r80:.2f} m; "
                  f"|80-40|/40 = {abs(r80 - r40) / r40:.2f} (<= 0.2), 5/40 = {r5 / r40:.2f} (>= 1.5)")


def test_criterion_7_replay_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cli.cmd_simulate(cfg, tmp_path / "sim", export_dir=tmp_path / "bundle")
    cli.cmd_replay(tmp_path / "bundle", cfg, tmp_path / "rep")

    def load(p):
        rows = (p / "results.csv").read_text().splitlines()
        keys = [r.split(",")[:2] for r in rows[1:]]
        vals = np.array([[float(x) for x in r.split(",")[2:]] for r in rows[1:]])
        return rows[0], keys, vals

    h1, k1, v1 = load(tmp_path / "sim")
    h2, k2, v2 = load(tmp_path / "rep")
    same = h1 == h2 and k1 == k2 and v1.shape == v2.shape
    diff = float(np.abs(v1 - v2).max()) if same else float("inf")
    assert report(7, same and diff <= 1e-12,
                  f"{len(k1)} rows, max |simulate - replay| = {diff:.1e} (<= 1e-12)")


def test_criterion_8a_zero_noise_run():
    cfg = dataclasses.replace(ExperimentConfig(), simulate_errors=False)
    res = run_single(build_scenario(cfg), 0)
    worst = max(float(np.abs(e[:, POS]).max()) for e in res.err.values())
    att = max(float(np.abs(e[:, ATT]).max()) for e in res.err.values())
    assert report("8a", worst < 1e-6,
                  f"max position error {worst:.1e} m (< 1e-6), attitude {att:.1e} rad over 200 s")


def test_criterion_8b_nees_consistency(monte_carlo):
    mc, _ = monte_carlo
    lo, hi = mc.nees_envelope(0.99)
    parts, ok = [], True
    for m in ("trifocal", "threeview"):
        times, vals = mc.nees[m]
        frac = mc.nees_fraction_inside(m)
        ok &= frac >= 0.9
        means = ", ".join(f"{t:g}s: {v:.1f}" for t, v in zip(times, np.nanmean(vals, axis=1)))
        parts.append(f"{m} inside {frac:.0%} (mean NEES {means})")
    assert report("8b", ok, f"99% envelope [{lo:.1f}, {hi:.1f}]; " + "; ".join(parts)
                  + " (>= 90% required)")


def test_criterion_9_update_complexity():
    """Informational: wall time of one update against the feature count."""
    rng = np.random.default_rng(109)
    poses = random_poses(rng, spread=80.0)
    snaps = [PoseSnapshot(float(v), NavState(rot_to_quat(poses.C_b_n[v]), np.zeros(3), np.zeros(3),
                                             np.zeros(3), poses.Pos_n[v]),
                          np.eye(N_STATE), np.eye(N_STATE)) for v in (0, 1)]
    pair = SnapshotPair(snaps[0], snaps[1], np.zeros((N_STATE, N_STATE)), None)
    settings = UpdateSettings(pixel_cov=np.diag([1.0, 1.0, 0.0]), iterations=1,
                              gate_probability=1.0)
    times = {}
    for n in (40, 160):
        trips = [consistent_triplet(rng, poses, i)[0] for i in range(n)]
        best = np.inf
        for _ in range(5):
            fs = FilterState(NavState(rot_to_quat(poses.C_b_n[2]), np.zeros(3), np.zeros(3),
                                      np.zeros(3), poses.Pos_n[2]), np.eye(N_STATE), 2.0)
            t0 = time.perf_counter()
            process_epoch(fs, pair, trips, UpdateMode.LOOP, settings)
            best = min(best, time.perf_counter() - t0)
        times[n] = best
    ratio = times[160] / times[40]
    # soft check: reported, never fails the suite
    report(9, ratio >= 16, f"t(160)/t(40) = {ratio:.1f} (soft target >= 16; cubic scaling gives 64); "
           f"t(40) = {1e3 * times[40]:.2f} ms, t(160) = {1e3 * times[160]:.2f} ms",
           informational=True)
