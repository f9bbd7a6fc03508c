"""Command-line surface: simulate, montecarlo, featurestudy and replay.

Every command writes ``config_effective.json`` and ``metadata.json`` next to
its CSV outputs.  Outputs are deterministic functions of the config, the seed
and the input files (metadata carries no wall-clock time).
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import files
from .config import ExperimentConfig, METHOD_NAMES, MODES, dumps, from_dict, load_config, to_dict
from .errors import NavError
from .experiment import (TIME_TOL, build_scenario, draw_run, feature_count_study, noise_model,
                         run_filter, run_inputs, run_monte_carlo, truth_at, update_settings)
from .ins import POS

logger = logging.getLogger(__name__)


def _prepare(out_dir, cfg, command, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_effective.json").write_text(dumps(cfg))
    meta = {"command": command, "version": files.artifact_version(), "seed": cfg.seed,
            "methods": list(cfg.methods),
            "seed_derivation": "numpy SeedSequence([seed, run_index]) spawned into "
                               "initial-error, IMU and per-triple feature streams"}
    meta.update(extra or {})
    files.write_json(out / "metadata.json", meta)
    return out


def _epoch_rows(t, err, sigma, methods, epochs):
    """Per requested epoch: position error (or RMSE) norm and position sigma norm."""
    rows = []
    for m in methods:
        for te in epochs:
            i = int(np.argmin(np.abs(t - te)))
            rows.append([m, float(t[i]), float(np.linalg.norm(err[m][i, POS])),
                         float(np.linalg.norm(sigma[m][i, POS]))])
    return rows


def _write_run_outputs(out, t, err, sigma, methods, epochs):
    files.write_results(out / "results.csv", t, err, sigma, methods)
    files.write_summary(out / "summary.csv", files.position_summary(t, err, methods))
    files.write_epoch_summary(out / "epoch_summary.csv", _epoch_rows(t, err, sigma, methods, epochs))


def cmd_simulate(cfg, out_dir, export_dir=None, run_index=0):
    """One simulated run: per-epoch errors and sigmas for every method.

    With ``export_dir`` the run's IMU stream, feature tracks, initial state and
    truth are also written as a replay bundle.
    """
    scenario = build_scenario(cfg)
    methods = list(cfg.methods)
    inputs = draw_run(scenario, run_index)
    res = run_inputs(scenario, inputs, methods)
    out = _prepare(out_dir, cfg, "simulate", {"run_index": run_index})
    _write_run_outputs(out, res.t, res.err, res.sigma, methods, cfg.report_epochs)
    if export_dir is not None:
        truth, imu = scenario.truth, inputs.imu
        t_end = float(truth.t[-1])
        n_imu = int(round(t_end / truth.dt))
        q, b_g, V, b_a, Pos = truth_at(truth, imu, scenario.record_times)
        files.write_bundle(export_dir, imu.t[:n_imu], imu.w_m[:n_imu], imu.a_m[:n_imu], t_end,
                           inputs.nav0, inputs.P0, inputs.triples,
                           files.truth_table(q, b_g, V, b_a, Pos, scenario.record_times))
        logger.info("replay bundle written to %s", export_dir)
    return res


def replay_bundle(bundle, cfg, methods=None):
    """Run the filter over a bundle; returns ``(t, err, sigma, tracks)``."""
    methods = list(methods or cfg.methods)
    span = bundle.t_end - bundle.t0
    n_rec = int(np.floor(span / cfg.record_interval + TIME_TOL)) + 1
    record_times = np.round(bundle.t0 + np.arange(n_rec) * cfg.record_interval, 9)
    tracks = run_filter(bundle.imu_t, bundle.w_m, bundle.a_m, bundle.t_end, bundle.nav0,
                        bundle.P0, bundle.triples, methods, noise_model(cfg), update_settings(cfg),
                        record_times)
    t = tracks[methods[0]].t
    err = {m: files.truth_errors(bundle, tr) for m, tr in tracks.items()}
    sigma = {m: tr.sigma for m, tr in tracks.items()}
    return t, err, sigma, tracks


def cmd_replay(bundle_dir, cfg, out_dir, mode="auto"):
    """Filter a recorded bundle.  Triples are labelled loop/sequential per ``mode``."""
    loop_gap = cfg.schedule.seq_dt13
    bundle = files.read_bundle(bundle_dir, mode=mode, loop_gap=loop_gap)
    methods = list(cfg.methods)
    t, err, sigma, _ = replay_bundle(bundle, cfg, methods)
    out = _prepare(out_dir, cfg, "replay", {"bundle": str(Path(bundle_dir)), "mode": mode,
                                            "triples": len(bundle.triples)})
    files.write_results(out / "results.csv", t, err, sigma, methods)
    if bundle.truth is not None:
        files.write_summary(out / "summary.csv", files.position_summary(t, err, methods))
    return t, err, sigma


def cmd_montecarlo(cfg, out_dir, runs=None):
    """RMSE and mean sigma across runs per epoch, plus NEES at every update."""
    runs = cfg.runs if runs is None else runs
    mc = run_monte_carlo(cfg, runs=runs)
    methods = list(cfg.methods)
    out = _prepare(out_dir, cfg, "montecarlo", {"runs": runs})
    _write_run_outputs(out, mc.t, mc.rmse, mc.mean_sigma, methods, cfg.report_epochs)
    lo, hi = mc.nees_envelope()
    rows = []
    for m in methods:
        times, vals = mc.nees[m]
        for tu, v in zip(times, vals):
            rows.append([m, float(tu), float(np.nanmean(v)), float(lo), float(hi)])
    files.write_csv(out / "nees.csv", ("method", "t_s", "mean_nees", "lower_99", "upper_99"), rows)
    return mc


def cmd_featurestudy(cfg, out_dir, runs=None, method="trifocal"):
    """Position RMSE right after the first loop update for each feature count."""
    runs = cfg.runs if runs is None else runs
    rows = feature_count_study(cfg, runs=runs, method=method)
    out = _prepare(out_dir, cfg, "featurestudy", {"runs": runs, "method": method,
                                                  "feature_counts": list(cfg.feature_counts)})
    files.write_csv(out / "featurestudy.csv", files.FEATURE_STUDY_COLUMNS,
                    [[n, float(r)] for n, r in rows])
    return rows


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = to_dict(cfg)
    if args.seed is not None:
        data["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        data["runs"] = args.runs
    if args.method:
        data["methods"] = list(dict.fromkeys(args.method))
    if args.mode and args.command != "replay":
        data["schedule"]["mode"] = args.mode
    return from_dict(data)


def build_parser():
    p = argparse.ArgumentParser(prog="trifocal-nav",
                                description="Trifocal-constraint vision-aided INS experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON experiment config (defaults otherwise)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--method", action="append", choices=METHOD_NAMES,
                        help="method to run; repeat for several (default: config methods)")
        sp.add_argument("--mode", choices=MODES,
                        help="update schedule; for replay, how triples are labelled")

    sp = sub.add_parser("simulate", help="one simulated run")
    common(sp)
    sp.add_argument("--export", type=Path, help="also write the run as a replay bundle here")
    sp = sub.add_parser("montecarlo", help="Monte-Carlo RMSE / sigma / NEES")
    common(sp)
    sp.add_argument("--runs", type=int, help="number of runs")
    sp = sub.add_parser("featurestudy", help="RMSE after the first loop update vs feature count")
    common(sp)
    sp.add_argument("--runs", type=int, help="runs per feature count")
    sp = sub.add_parser("replay", help="filter a recorded IMU + feature-track bundle")
    common(sp)
    sp.add_argument("--bundle", type=Path, required=True,
                    help="directory with imu.csv, features.csv, initial.json [, groundtruth.csv]")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "simulate":
            cmd_simulate(cfg, args.out, args.export)
        elif args.command == "montecarlo":
            cmd_montecarlo(cfg, args.out)
        elif args.command == "featurestudy":
            method = args.method[0] if args.method else "trifocal"
            cmd_featurestudy(cfg, args.out, method=method)
        else:
            cmd_replay(args.bundle, cfg, args.out, mode=args.mode or "auto")
    except (NavError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"outputs written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
