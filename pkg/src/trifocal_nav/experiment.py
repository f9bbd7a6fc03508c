"""Filter runs over IMU streams and image triples, Monte-Carlo statistics.

:func:`run_filter` is the single filter loop used by both the simulator and
the CSV replay path.  All requested methods share one filter state until the
first measurement update, then fork, so the INS-only and vision-aided results
of one run see exactly the same IMU noise.
"""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .config import ExperimentConfig
from .geometry import apply_error_rotation, attitude_error
from .iekf import (FilterState, SnapshotPair, UpdateMode, UpdateSettings, process_epoch,
                   propagate, prune_snapshots, take_snapshot)
from .ins import ATT, BA, BG, N_STATE, POS, VEL, ImuSample, NavState, earth_rate_ned, NoiseConfig
from .sim import generate_features, generate_trajectory, synthesize_imu

logger = logging.getLogger(__name__)

INS_ONLY = "ins"
TIME_TOL = 1e-9


@dataclass
class Triple:
    """One image triple: snapshot times, update time and its feature triplets."""

    triple_id: int
    t1: float
    t2: float
    t3: float
    features: list = field(default_factory=list)
    mode: UpdateMode = UpdateMode.LOOP


@dataclass
class Track:
    """Recorded filter output of one method."""

    t: list = field(default_factory=list)
    q: list = field(default_factory=list)
    b_g: list = field(default_factory=list)
    V: list = field(default_factory=list)
    b_a: list = field(default_factory=list)
    Pos: list = field(default_factory=list)
    P: list = field(default_factory=list)
    update_times: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def append(self, t, fs):
        n = fs.nav
        self.t.append(t)
        self.q.append(n.q_n_b.copy())
        self.b_g.append(n.b_g.copy())
        self.V.append(n.V_n.copy())
        self.b_a.append(n.b_a.copy())
        self.Pos.append(n.Pos_n.copy())
        self.P.append(fs.P.copy())

    def finish(self):
        for name in ("t", "q", "b_g", "V", "b_a", "Pos", "P"):
            setattr(self, name, np.asarray(getattr(self, name)))
        return self

    @property
    def sigma(self):
        return np.sqrt(np.clip(np.diagonal(self.P, axis1=1, axis2=2), 0.0, None))


class _Branch:
    def __init__(self, fs, methods, snaps=None, order=None):
        self.fs = fs
        self.methods = list(methods)
        self.snaps = dict(snaps or {})
        self.order = list(order or [])

    def fork(self, fs, methods):
        return _Branch(fs, methods, self.snaps, self.order)

    def prune(self, k_min):
        """Forget snapshots no pending triple refers to (nor lies between)."""
        drop = [k for k in self.order if k < k_min]
        if not drop:
            return
        self.order = [k for k in self.order if k >= k_min]
        self.snaps = {k: v for k, v in self.snaps.items() if k >= k_min}
        prune_snapshots(self.fs, k_min * 1e-6 - TIME_TOL)

    def pair(self, k1, k2):
        i1, i2 = self.order.index(k1), self.order.index(k2)
        between = [self.snaps[k] for k in self.order[i1 + 1:i2]]
        return SnapshotPair.from_snapshots(self.snaps[k1], self.snaps[k2], between)


def _key(t):
    return int(round(t * 1e6))


def run_filter(imu_t, w_m, a_m, t_end, nav0, P0, triples, methods, noise, settings,
               record_times, t0=None):
    """Run every method over one IMU stream.

    ``imu_t[k]`` starts the interval in which sample ``k`` is held; the last
    interval ends at ``t_end``.  Triples are processed at their ``t3``
    (updates before snapshots at equal times, recording last).  ``settings`` is
    an :class:`UpdateSettings` whose ``method`` is replaced per method.
    Returns ``{method: Track}``.
    """
    imu_t = np.asarray(imu_t, dtype=float)
    t0 = imu_t[0] if t0 is None else t0
    events = {}

    def event(t):
        return events.setdefault(_key(t), {"t": t, "updates": [], "snapshot": False,
                                           "record": False})

    for tr in triples:
        event(tr.t1)["snapshot"] = True
        event(tr.t2)["snapshot"] = True
        event(tr.t3)["updates"].append(tr)
    # earliest first-view key still needed after each update time
    first_needed, running = {}, None
    for k3 in sorted({_key(tr.t3) for tr in triples}, reverse=True):
        first_needed[k3] = running
        k1s = [_key(tr.t1) for tr in triples if _key(tr.t3) == k3]
        running = min(k1s + ([running] if running is not None else []))
    for t in record_times:
        event(t)["record"] = True
    for ev in events.values():
        if ev["t"] < t0 - TIME_TOL or ev["t"] > t_end + TIME_TOL:
            raise ValueError(f"event at t = {ev['t']} outside the IMU stream")
    event_keys = sorted(events)

    tracks = {m: Track() for m in methods}
    branches = [_Branch(FilterState(nav0.copy(), np.array(P0, dtype=float), t0), methods)]

    def handle(ev):
        nonlocal branches
        for tr in ev["updates"]:
            k1, k2 = _key(tr.t1), _key(tr.t2)
            new = []
            for br in branches:
                staying = [m for m in br.methods if m == INS_ONLY]
                for m in br.methods:
                    if m == INS_ONLY:
                        continue
                    pair = br.pair(k1, k2)
                    s = dataclasses.replace(settings, method=m)
                    fs = process_epoch(br.fs, pair, tr.features, tr.mode, s)
                    if fs is br.fs:
                        staying.append(m)
                    else:
                        tracks[m].update_times.append(ev["t"])
                        new.append(br.fork(fs, [m]))
                if staying:
                    br.methods = staying
                    new.append(br)
            branches = new
        if ev["updates"]:
            k_min = first_needed[_key(ev["t"])]
            for br in branches:
                br.prune(_key(ev["t"]) if k_min is None else min(k_min, _key(ev["t"])))
        if ev["snapshot"]:
            for br in branches:
                br.snaps[_key(ev["t"])] = take_snapshot(br.fs)
                br.order.append(_key(ev["t"]))
        if ev["record"]:
            for br in branches:
                for m in br.methods:
                    tracks[m].append(ev["t"], br.fs)

    ei = 0
    while ei < len(event_keys) and events[event_keys[ei]]["t"] <= t0 + TIME_TOL:
        handle(events[event_keys[ei]])
        ei += 1

    n = len(imu_t)
    for k in range(n):
        t_a = imu_t[k]
        t_b = imu_t[k + 1] if k + 1 < n else t_end
        if t_b <= t_a:
            continue
        imu = ImuSample(t_a, w_m[k], a_m[k])
        t_cur = t_a
        while True:
            if ei < len(event_keys) and events[event_keys[ei]]["t"] < t_b - TIME_TOL:
                t_next, ev = events[event_keys[ei]]["t"], events[event_keys[ei]]
            else:
                t_next, ev = t_b, None
            if t_next > t_cur:
                for br in branches:
                    propagate(br.fs, imu, t_next - t_cur, noise)
                t_cur = t_next
            if ev is None:
                break
            handle(ev)
            ei += 1
        while ei < len(event_keys) and events[event_keys[ei]]["t"] <= t_b + TIME_TOL:
            handle(events[event_keys[ei]])
            ei += 1

    for br in branches:
        for m in br.methods:
            tracks[m].stats = dict(br.fs.stats)
    return {m: tr.finish() for m, tr in tracks.items()}


def state_errors(track, q_true, b_g_true, V_true, b_a_true, Pos_true):
    """Truth minus estimate in error-state order for every recorded epoch."""
    n = len(track.t)
    err = np.empty((n, N_STATE))
    for i in range(n):
        err[i, ATT] = attitude_error(q_true[i], track.q[i])
    err[:, BG] = b_g_true - track.b_g
    err[:, VEL] = V_true - track.V
    err[:, BA] = b_a_true - track.b_a
    err[:, POS] = Pos_true - track.Pos
    return err


def nees(err, P):
    return float(err @ np.linalg.solve(P, err))


# -- simulation setup -------------------------------------------------------------

def noise_model(cfg):
    fc = cfg.filter
    w_G = earth_rate_ned(fc.latitude_deg) if fc.earth_rotation else np.zeros(3)
    return cfg.errors.noise_config(w_G=w_G, g_n=np.array([0.0, 0.0, fc.gravity]))


def update_settings(cfg):
    return UpdateSettings(normalize=cfg.filter.normalize, pixel_cov=cfg.camera.pixel_cov,
                          C_c_b=cfg.camera.C_c_b, gate_probability=cfg.filter.gate_probability,
                          cross_covariance=cfg.filter.cross_covariance,
                          iterations=cfg.filter.iterations, tolerance=cfg.filter.tolerance,
                          basis=cfg.filter.basis)


def schedule_times(cfg):
    """``[(t1, t2, t3, mode)]`` for the configured schedule, in update order."""
    sc, dur = cfg.schedule, cfg.trajectory.duration
    out = []
    if sc.mode in ("loop", "auto"):
        out += [(sc.loop_t1, sc.loop_t2, t3, UpdateMode.LOOP) for t3 in sc.loop_t3]
    if sc.mode in ("sequential", "auto"):
        end = dur if sc.seq_end is None else min(sc.seq_end, dur)
        i = 0
        while True:
            # integer arithmetic on the window index keeps times on the IMU grid
            t1 = round(sc.seq_start + i * sc.seq_dt13, 9)
            t3 = round(t1 + sc.seq_dt13, 9)
            if t3 > end + TIME_TOL:
                break
            out.append((t1, round(t1 + sc.seq_dt12, 9), t3, UpdateMode.SEQUENTIAL))
            i += 1
    out.sort(key=lambda x: (x[2], x[3] is UpdateMode.SEQUENTIAL))
    return out


@dataclass
class Scenario:
    """Pieces shared by every run of an experiment."""

    config: ExperimentConfig
    truth: object
    noise: NoiseConfig
    schedule: list
    record_times: np.ndarray


_TRUTH_CACHE = {}


def build_scenario(cfg):
    noise = noise_model(cfg)
    key = (repr(cfg.trajectory), noise.w_G.tobytes(), noise.g_n.tobytes())
    truth = _TRUTH_CACHE.get(key)
    if truth is None:
        truth = generate_trajectory(cfg.trajectory, noise)
        _TRUTH_CACHE.clear()
        _TRUTH_CACHE[key] = truth
    dur = cfg.trajectory.duration
    n_rec = int(np.floor(dur / cfg.record_interval + TIME_TOL)) + 1
    record_times = np.round(np.arange(n_rec) * cfg.record_interval, 9)
    return Scenario(cfg, truth, noise, schedule_times(cfg), record_times)


@dataclass
class RunInputs:
    run_index: int
    imu: object  # ImuStream
    nav0: NavState
    P0: np.ndarray
    triples: list


def perturb(nav, dx):
    """Estimate corresponding to truth ``nav`` and error ``dx`` (truth minus estimate)."""
    out = nav.copy()
    out.q_n_b = apply_error_rotation(nav.q_n_b, -dx[ATT])
    out.b_g = nav.b_g - dx[BG]
    out.V_n = nav.V_n - dx[VEL]
    out.b_a = nav.b_a - dx[BA]
    out.Pos_n = nav.Pos_n - dx[POS]
    return out


def draw_run(scenario, run_index, n_features=None, seed=None):
    """Random inputs of one Monte-Carlo run.

    Seeds derive from ``(seed, run_index)`` with separate streams for the
    initial error, the IMU and each triple's features, so changing the feature
    count leaves the IMU realization untouched.
    """
    cfg = scenario.config
    seed = cfg.seed if seed is None else seed
    n_features = cfg.n_features if n_features is None else n_features
    ss_init, ss_imu, ss_feat = np.random.SeedSequence([seed, run_index]).spawn(3)
    truth = scenario.truth
    P0 = cfg.errors.initial_covariance()

    if cfg.simulate_errors:
        errors = cfg.errors
        sig = errors.sigmas()
        dx0 = np.random.default_rng(ss_init).standard_normal(N_STATE) * sig
    else:
        errors = type(cfg.errors).noiseless()
        dx0 = np.zeros(N_STATE)
    imu = synthesize_imu(truth, errors, ss_imu)
    # biases are part of the initial error: the filter starts them at zero
    dx0[BG] = imu.b_g[0]
    dx0[BA] = imu.b_a[0]
    nav_true = truth.nav(0)
    nav_true.b_g, nav_true.b_a = imu.b_g[0].copy(), imu.b_a[0].copy()
    nav0 = perturb(nav_true, dx0)

    feat_seeds = ss_feat.spawn(len(scenario.schedule))
    triples = []
    for i, (t1, t2, t3, mode) in enumerate(scenario.schedule):
        feats = generate_features(truth, cfg.camera, t1, t2, t3, n_features, feat_seeds[i],
                                  pixel_noise=cfg.simulate_errors) if n_features else []
        triples.append(Triple(i, t1, t2, t3, feats, mode))
    return RunInputs(run_index, imu, nav0, P0, triples)


@dataclass
class RunResult:
    run_index: int
    t: np.ndarray
    err: dict  # method -> (n, 15) truth minus estimate
    sigma: dict  # method -> (n, 15)
    nees: dict  # method -> list of (t, nees) at update epochs
    tracks: dict = None
    stats: dict = None


def run_single(scenario, run_index=0, n_features=None, methods=None, t_stop=None, seed=None,
               keep_tracks=False):
    cfg = scenario.config
    methods = list(methods or cfg.methods)
    inputs = draw_run(scenario, run_index, n_features, seed)
    return run_inputs(scenario, inputs, methods, t_stop, keep_tracks)


def run_inputs(scenario, inputs, methods, t_stop=None, keep_tracks=False):
    truth = scenario.truth
    imu = inputs.imu
    t_end = truth.t[-1] if t_stop is None else t_stop
    n_imu = int(round(t_end / truth.dt))
    triples = [tr for tr in inputs.triples if tr.t3 <= t_end + TIME_TOL]
    record_times = scenario.record_times[scenario.record_times <= t_end + TIME_TOL]
    tracks = run_filter(imu.t[:n_imu], imu.w_m, imu.a_m, t_end, inputs.nav0, inputs.P0,
                        triples, methods, scenario.noise, update_settings(scenario.config),
                        record_times)
    return summarize_tracks(truth, imu, inputs.run_index, tracks, keep_tracks)


def truth_at(truth, imu, times):
    idx = np.array([truth.index(t) for t in times], dtype=int)
    return truth.q[idx], imu.b_g[idx], truth.V[idx], imu.b_a[idx], truth.P[idx]


def summarize_tracks(truth, imu, run_index, tracks, keep_tracks=False):
    err, sigma, nees_log, stats = {}, {}, {}, {}
    t = None
    for m, tr in tracks.items():
        t = tr.t
        e = state_errors(tr, *truth_at(truth, imu, tr.t))
        err[m] = e
        sigma[m] = tr.sigma
        log = []
        for tu in sorted(set(tr.update_times)):
            i = np.flatnonzero(np.abs(tr.t - tu) < TIME_TOL)
            if len(i):
                log.append((tu, nees(e[i[0]], tr.P[i[0]])))
        nees_log[m] = log
        stats[m] = tr.stats
    return RunResult(run_index, t, err, sigma, nees_log, tracks if keep_tracks else None, stats)


# -- Monte-Carlo ---------------------------------------------------------------------

@dataclass
class MonteCarloResult:
    t: np.ndarray
    runs: int
    rmse: dict  # method -> (n, 15)
    mean_sigma: dict  # method -> (n, 15)
    pos_rmse: dict  # method -> (n,) RMS of the 3-D position error
    nees: dict  # method -> (update times, (n_updates, runs) array)
    results: list = None

    def index(self, t):
        return int(np.argmin(np.abs(self.t - t)))

    def nees_envelope(self, confidence=0.99):
        dof = N_STATE * self.runs
        lo = chi2.ppf(0.5 * (1 - confidence), dof) / self.runs
        hi = chi2.ppf(0.5 * (1 + confidence), dof) / self.runs
        return lo, hi

    def nees_fraction_inside(self, method, confidence=0.99):
        times, values = self.nees[method]
        if len(times) == 0:
            return float("nan")
        lo, hi = self.nees_envelope(confidence)
        avg = values.mean(axis=1)
        return float(np.mean((avg >= lo) & (avg <= hi)))


def aggregate(results, methods):
    t = results[0].t
    R = len(results)
    rmse, msig, prmse, nees_tab = {}, {}, {}, {}
    for m in methods:
        E = np.stack([r.err[m] for r in results])
        S = np.stack([r.sigma[m] for r in results])
        rmse[m] = np.sqrt(np.mean(E ** 2, axis=0))
        msig[m] = S.mean(axis=0)
        prmse[m] = np.sqrt(np.mean(np.sum(E[:, :, POS] ** 2, axis=2), axis=0))
        times = sorted({tu for r in results for tu, _ in r.nees[m]})
        vals = np.full((len(times), R), np.nan)
        for j, r in enumerate(results):
            d = dict(r.nees[m])
            for i, tu in enumerate(times):
                vals[i, j] = d.get(tu, np.nan)
        nees_tab[m] = (np.array(times), vals)
    return MonteCarloResult(t, R, rmse, msig, prmse, nees_tab)


def run_monte_carlo(cfg, runs=None, seed=None, methods=None, keep_results=False):
    """Per-epoch RMSE and mean filter sigma across runs for each method."""
    runs = cfg.runs if runs is None else runs
    if runs < 1:
        raise ValueError("runs must be >= 1")
    scenario = build_scenario(cfg)
    methods = list(methods or cfg.methods)
    results = []
    for r in range(runs):
        try:
            results.append(run_single(scenario, r, methods=methods, seed=seed))
        except Exception:
            logger.error("Monte-Carlo run %d failed", r)
            raise
        logger.info("run %d/%d done", r + 1, runs)
    out = aggregate(results, methods)
    if keep_results:
        out.results = results
    return out


def feature_count_study(cfg, counts=None, runs=None, seed=None, method="trifocal", epoch=None):
    """3-D position RMSE right after the first loop update for each feature count.

    Returns a list of ``(count, rmse)`` rows in the order requested.
    """
    counts = list(cfg.feature_counts if counts is None else counts)
    if not counts:
        raise ValueError("counts must be non-empty")
    runs = cfg.runs if runs is None else runs
    scenario = build_scenario(cfg)
    epoch = scenario.schedule[0][2] if epoch is None else epoch
    rows = []
    for n in counts:
        sq = []
        for r in range(runs):
            res = run_single(scenario, r, n_features=n, methods=[method], t_stop=epoch, seed=seed)
            i = int(np.argmin(np.abs(res.t - epoch)))
            sq.append(np.sum(res.err[method][i, POS] ** 2))
        rows.append((n, float(np.sqrt(np.mean(sq)))))
        logger.info("N = %d: position RMSE %.3f m", n, rows[-1][1])
    return rows
