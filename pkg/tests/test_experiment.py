import numpy as np
import pytest
from scipy.stats import chi2

from trifocal_nav.config import from_dict
from trifocal_nav.experiment import (aggregate, build_scenario, draw_run, run_filter,
                                     run_inputs, run_monte_carlo, run_single, schedule_times,
                                     update_settings)
from trifocal_nav.iekf import FilterState, UpdateMode, propagate
from trifocal_nav.ins import N_STATE, POS


def short_cfg(**over):
    data = {"trajectory": {"duration": 40.0, "revisit_times": []},
            "schedule": {"mode": "sequential", "loop_t3": [20.0], "seq_start": 5.0},
            "report_epochs": [20.0], "n_features": 20, "runs": 2}
    for k, v in over.items():
        if isinstance(v, dict):
            data.setdefault(k, {}).update(v)
        else:
            data[k] = v
    return from_dict(data)


def test_schedule_times():
    cfg = from_dict({})
    assert schedule_times(cfg) == [(5.0, 6.0, 90.0, UpdateMode.LOOP),
                                   (5.0, 6.0, 160.0, UpdateMode.LOOP)]
    seq = schedule_times(short_cfg())
    assert seq == [(5.0, 6.0, 15.0, UpdateMode.SEQUENTIAL), (15.0, 16.0, 25.0, UpdateMode.SEQUENTIAL),
                   (25.0, 26.0, 35.0, UpdateMode.SEQUENTIAL)]
    both = schedule_times(from_dict({"schedule": {"mode": "auto", "seq_end": 95.0}}))
    t3 = [x[2] for x in both]
    assert t3 == sorted(t3) and t3.count(90.0) == 1 and 160.0 in t3
    # at a shared t3 the loop update goes first
    auto = schedule_times(from_dict({"schedule": {"mode": "auto", "loop_t3": [85.0, 160.0]}}))
    at85 = [x for x in auto if x[2] == 85.0]
    assert [x[3] for x in at85] == [UpdateMode.LOOP, UpdateMode.SEQUENTIAL]


def test_ins_only_run_is_pure_propagation():
    cfg = short_cfg(methods=["ins"])
    sc = build_scenario(cfg)
    inputs = draw_run(sc, 0)
    n = 1000
    tracks = run_filter(inputs.imu.t[:n], inputs.imu.w_m, inputs.imu.a_m, 10.0, inputs.nav0,
                        inputs.P0, [], ["ins"], sc.noise, update_settings(cfg),
                        [0.0, 5.0, 10.0])
    fs = FilterState(inputs.nav0.copy(), inputs.P0.copy(), 0.0)
    for k in range(n):
        propagate(fs, inputs.imu.sample(k), inputs.imu.dt, sc.noise)
    tr = tracks["ins"]
    assert np.array_equal(tr.t, [0.0, 5.0, 10.0])
    assert np.allclose(tr.Pos[-1], fs.nav.Pos_n, rtol=0, atol=1e-9)
    assert np.abs(tr.P[-1] - fs.P).max() < 1e-12 * np.abs(fs.P).max()
    assert tr.update_times == []


def test_methods_share_the_state_until_the_first_update():
    sc = build_scenario(short_cfg())
    res = run_single(sc, 0, t_stop=20.0)
    i = int(np.flatnonzero(res.t < 15.0)[-1])
    assert np.array_equal(res.err["trifocal"][: i + 1], res.err["ins"][: i + 1])
    assert np.array_equal(res.err["threeview"][: i + 1], res.err["ins"][: i + 1])
    j = int(np.flatnonzero(res.t == 15.0)[0])
    assert not np.array_equal(res.err["trifocal"][j], res.err["ins"][j])
    assert res.stats["trifocal"]["updates"] == 1


def test_runs_are_deterministic_and_seed_dependent():
    sc = build_scenario(short_cfg())
    a = run_single(sc, 1, t_stop=20.0)
    b = run_single(sc, 1, t_stop=20.0)
    c = run_single(sc, 1, t_stop=20.0, seed=99)
    for m in a.err:
        assert np.array_equal(a.err[m], b.err[m]) and np.array_equal(a.sigma[m], b.sigma[m])
    assert not np.array_equal(a.err["ins"], c.err["ins"])


def test_feature_count_does_not_change_the_imu_draw():
    sc = build_scenario(short_cfg())
    a, b = draw_run(sc, 0, n_features=5), draw_run(sc, 0, n_features=40)
    assert np.array_equal(a.imu.w_m, b.imu.w_m) and np.array_equal(a.nav0.Pos_n, b.nav0.Pos_n)
    assert len(a.triples[0].features) == 5 and len(b.triples[0].features) == 40


def test_zero_noise_sequential_run_stays_exact():
    cfg = short_cfg(simulate_errors=False, filter={"cross_covariance": "tracked"})
    res = run_single(build_scenario(cfg), 0)
    for m, e in res.err.items():
        assert np.abs(e[:, POS]).max() < 1e-6, m
    assert res.stats["trifocal"]["updates"] == 3


@pytest.mark.parametrize("cross", ["auto", "tracked"])
def test_sequential_updates_are_consistent(cross):
    """Tracked cross-covariances keep the sequential filter's errors within its sigma."""
    cfg = short_cfg(filter={"cross_covariance": cross}, runs=4)
    mc = run_monte_carlo(cfg, methods=["trifocal"], keep_results=True)
    i = mc.index(35.0)
    pos_sig = np.sqrt(np.sum(mc.mean_sigma["trifocal"][i, POS] ** 2))
    assert mc.pos_rmse["trifocal"][i] < 3 * pos_sig
    for r in mc.results:
        assert r.stats["trifocal"]["updates"] == 3


def test_single_run_rmse_is_the_absolute_error():
    cfg = short_cfg(runs=1)
    sc = build_scenario(cfg)
    r = run_single(sc, 0, t_stop=20.0)
    mc = aggregate([r], list(r.err))
    for m in r.err:
        assert np.allclose(mc.rmse[m], np.abs(r.err[m]))
        assert np.allclose(mc.pos_rmse[m], np.linalg.norm(r.err[m][:, POS], axis=1))


def test_nees_envelope_and_fraction():
    cfg = short_cfg()
    sc = build_scenario(cfg)
    rs = [run_single(sc, k, t_stop=20.0) for k in range(2)]
    mc = aggregate(rs, ["trifocal", "ins"])
    lo, hi = mc.nees_envelope(0.99)
    assert np.isclose(lo, chi2.ppf(0.005, 2 * N_STATE) / 2)
    assert np.isclose(hi, chi2.ppf(0.995, 2 * N_STATE) / 2)
    times, vals = mc.nees["trifocal"]
    assert list(times) == [15.0] and vals.shape == (1, 2)
    assert 0.0 <= mc.nees_fraction_inside("trifocal") <= 1.0
    assert np.isnan(mc.nees_fraction_inside("ins"))


def test_run_inputs_with_no_features_matches_ins():
    cfg = short_cfg(n_features=0)
    sc = build_scenario(cfg)
    res = run_inputs(sc, draw_run(sc, 0), ["trifocal", "ins"], t_stop=20.0)
    assert np.array_equal(res.err["trifocal"], res.err["ins"])
