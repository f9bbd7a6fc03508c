"""CSV/JSON formats: result tables, run metadata and replay bundles.

Numbers are written with 17 significant digits so a float survives a
write/read cycle unchanged, which is what makes a replay of an exported
simulation reproduce the direct results exactly.

Error and sigma components, in order: position ``p`` (m), velocity ``v``
(m/s), attitude ``r`` (rad), accelerometer bias ``a`` (m/s^2) and gyro bias
``b`` (rad/s), each with ``x, y, z`` axes of the navigation (NED) or body frame.
"""

import csv
import json
import logging
import subprocess
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .errors import SchemaError, TimestampError
from .experiment import INS_ONLY, TIME_TOL, Triple, UpdateMode
from .geometry import Los, attitude_error
from .ins import ATT, BA, BG, N_STATE, POS, VEL, NavState
from .trifocal import FeatureTriplet

logger = logging.getLogger(__name__)

COMPONENTS = ("px", "py", "pz", "vx", "vy", "vz", "rx", "ry", "rz",
              "ax", "ay", "az", "bx", "by", "bz")
# error-state slice of each component group, in COMPONENTS order
_GROUPS = (POS, VEL, ATT, BA, BG)
_ORDER = np.concatenate([np.arange(N_STATE)[g] for g in _GROUPS])

IMU_COLUMNS = ("t_s", "wx", "wy", "wz", "ax", "ay", "az")
FEATURE_COLUMNS = ("triple_id", "feature_id", "view", "t_s", "u_norm", "v_norm", "focal_px")
TRUTH_COLUMNS = ("t_s", "px", "py", "pz", "qx", "qy", "qz", "qw")
TRUTH_OPTIONAL = ("vx", "vy", "vz", "ax", "ay", "az", "bx", "by", "bz")
RESULT_COLUMNS = (("t_s", "method") + tuple(f"err_{c}" for c in COMPONENTS)
                  + tuple(f"sig_{c}" for c in COMPONENTS))
SUMMARY_COLUMNS = ("method", "mean_pos_err_m", "max_pos_err_m", "end_pos_err_m")
EPOCH_SUMMARY_COLUMNS = ("method", "t_s", "pos_rmse_m", "pos_sigma_m")
FEATURE_STUDY_COLUMNS = ("n_features", "pos_rmse_m")


def fmt(x):
    return "%.17g" % x


def to_components(x):
    """Reorder error-state vectors (last axis) into COMPONENTS order."""
    return np.asarray(x)[..., _ORDER]


def from_components(x):
    out = np.empty_like(np.asarray(x, dtype=float))
    out[..., _ORDER] = x
    return out


def artifact_version():
    """Package version plus the git revision of the working tree when available."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "0+unknown"
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{version}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


# -- generic CSV helpers ----------------------------------------------------------

def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path, required, optional=()):
    """Rows of ``path`` as dicts of strings; the header must hold ``required``.

    Unknown columns are rejected so that a misspelled optional column is not
    silently ignored.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path.name}: empty file, expected header {list(required)}") from None
        missing = [c for c in required if c not in header]
        unknown = [c for c in header if c not in required and c not in optional]
        if missing or unknown or len(set(header)) != len(header):
            raise SchemaError(f"{path.name}: bad header {header}; required {list(required)}"
                              + (f", optional {list(optional)}" if optional else ""))
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise SchemaError(f"{path.name} line {line}: expected {len(header)} fields")
            rows.append(dict(zip(header, rec)))
    return header, rows


def _floats(rows, cols, path, allow_nan=False):
    try:
        out = np.array([[float(r[c]) for c in cols] for r in rows], dtype=float).reshape(-1, len(cols))
    except ValueError as exc:
        raise SchemaError(f"{Path(path).name}: non-numeric value ({exc})") from None
    if not allow_nan and not np.all(np.isfinite(out)):
        raise SchemaError(f"{Path(path).name}: non-finite value")
    return out


def _monotone(t, path, strict=True):
    d = np.diff(t)
    bad = np.flatnonzero(d <= 0) if strict else np.flatnonzero(d < 0)
    if len(bad):
        raise TimestampError(f"{Path(path).name}: timestamps not increasing at row {bad[0] + 3}")


# -- result tables -------------------------------------------------------------------

def result_rows(t, err, sigma, methods):
    """Rows ``t_s, method, err..., sig...`` for each epoch and method."""
    rows = []
    for i, ti in enumerate(t):
        for m in methods:
            rows.append([float(ti), m, *to_components(err[m][i]).tolist(),
                         *to_components(sigma[m][i]).tolist()])
    return rows


def write_results(path, t, err, sigma, methods):
    write_csv(path, RESULT_COLUMNS, result_rows(t, err, sigma, methods))


def read_results(path):
    _, rows = read_csv(path, RESULT_COLUMNS)
    return rows


def position_summary(t, err, methods):
    """Mean, max and final 3-D position error per method (NaN-free epochs only)."""
    rows = []
    for m in methods:
        e = np.linalg.norm(err[m][:, POS], axis=1)
        ok = np.isfinite(e)
        if not ok.any():
            rows.append([m, float("nan"), float("nan"), float("nan")])
            continue
        e = e[ok]
        rows.append([m, float(e.mean()), float(e.max()), float(e[-1])])
    return rows


def write_summary(path, rows):
    write_csv(path, SUMMARY_COLUMNS, rows)


def write_epoch_summary(path, rows):
    write_csv(path, EPOCH_SUMMARY_COLUMNS, rows)


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# -- replay bundles -------------------------------------------------------------------

@dataclass
class ReplayBundle:
    """Recorded IMU stream, feature tracks, optional truth and the filter start."""

    imu_t: np.ndarray
    w_m: np.ndarray
    a_m: np.ndarray
    t_end: float
    nav0: NavState
    P0: np.ndarray
    triples: list = field(default_factory=list)
    truth: dict = None  # column name -> array, "t_s" always present

    @property
    def t0(self):
        return float(self.imu_t[0])


def _ratio(num, den):
    """``r`` with ``r * den == num`` exactly when such a float exists near ``num / den``."""
    r = num / den
    for _ in range(4):
        p = r * den
        if p == num:
            return r
        r = np.nextafter(r, np.inf if p < num else -np.inf)
    return num / den


def write_bundle(directory, imu_t, w_m, a_m, t_end, nav0, P0, triples, truth=None):
    """Write ``imu.csv``, ``features.csv``, ``initial.json`` and optionally ``groundtruth.csv``.

    ``truth`` maps TRUTH_COLUMNS (and any of TRUTH_OPTIONAL) to arrays.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "imu.csv", IMU_COLUMNS,
              ([float(t), *w.tolist(), *a.tolist()] for t, w, a in zip(imu_t, w_m, a_m)))
    rows = []
    for tr in triples:
        for ft in tr.features:
            for view, los, t in ((1, ft.x, tr.t1), (2, ft.x1, tr.t2), (3, ft.x2, tr.t3)):
                f = float(los.vec[2])
                rows.append([tr.triple_id, ft.feature_id, view, float(t),
                             float(_ratio(los.vec[0], f)), float(_ratio(los.vec[1], f)), f])
    write_csv(d / "features.csv", FEATURE_COLUMNS, rows)
    write_json(d / "initial.json", {
        "t0": float(imu_t[0]), "t_end": float(t_end),
        "q_n_b": [float(v) for v in nav0.q_n_b], "b_g": [float(v) for v in nav0.b_g],
        "V_n": [float(v) for v in nav0.V_n], "b_a": [float(v) for v in nav0.b_a],
        "Pos_n": [float(v) for v in nav0.Pos_n],
        "P0": [[float(v) for v in row] for row in np.asarray(P0)],
    })
    if truth is not None:
        cols = list(TRUTH_COLUMNS) + [c for c in TRUTH_OPTIONAL if c in truth]
        data = np.column_stack([np.asarray(truth[c], dtype=float) for c in cols])
        write_csv(d / "groundtruth.csv", cols, (r.tolist() for r in data))


def _read_initial(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"initial.json: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    need = {"t0": (), "q_n_b": (4,), "b_g": (3,), "V_n": (3,), "b_a": (3,), "Pos_n": (3,),
            "P0": (N_STATE, N_STATE)}
    missing = [k for k in need if k not in data]
    unknown = [k for k in data if k not in need and k != "t_end"]
    if missing or unknown:
        raise SchemaError(f"initial.json: missing keys {missing}, unknown keys {unknown}")
    out = {}
    for k, shape in need.items():
        try:
            arr = np.asarray(data[k], dtype=float)
        except (TypeError, ValueError):
            raise SchemaError(f"initial.json: {k} must be numeric") from None
        if arr.shape != shape or not np.all(np.isfinite(arr)):
            raise SchemaError(f"initial.json: {k} must have shape {shape}")
        out[k] = arr
    out["t_end"] = data.get("t_end")
    return out


def _triples_from_rows(rows, path, mode, loop_gap):
    """Group feature rows by triple id; each triple needs views 1, 2 and 3 at fixed times."""
    if not rows:
        return []
    vals = _floats(rows, ("t_s", "u_norm", "v_norm", "focal_px"), path)
    groups = {}
    for r, (t, u, v, f) in zip(rows, vals):
        try:
            tid, fid, view = int(r["triple_id"]), int(r["feature_id"]), int(r["view"])
        except ValueError:
            raise SchemaError(f"{Path(path).name}: triple_id, feature_id and view must be integers") from None
        if view not in (1, 2, 3):
            raise SchemaError(f"{Path(path).name}: view must be 1, 2 or 3 (got {view})")
        if not f > 0:
            raise SchemaError(f"{Path(path).name}: focal_px must be positive")
        g = groups.setdefault(tid, {"times": {}, "features": {}})
        if g["times"].setdefault(view, t) != t:
            raise TimestampError(f"triple {tid}: view {view} has more than one timestamp")
        feat = g["features"].setdefault(fid, {})
        if view in feat:
            raise SchemaError(f"triple {tid}, feature {fid}: view {view} given twice")
        feat[view] = Los.from_normalized(u, v, f, f"c{view}")

    triples = []
    for tid, g in groups.items():
        if set(g["times"]) != {1, 2, 3}:
            raise SchemaError(f"triple {tid}: needs views 1, 2 and 3")
        t1, t2, t3 = (g["times"][v] for v in (1, 2, 3))
        if not t1 < t2 < t3:
            raise TimestampError(f"triple {tid}: view times must increase ({t1}, {t2}, {t3})")
        feats = []
        for fid, views in g["features"].items():
            if set(views) != {1, 2, 3}:
                raise SchemaError(f"triple {tid}, feature {fid}: needs views 1, 2 and 3")
            feats.append(FeatureTriplet(views[1], views[2], views[3], fid))
        if mode == "auto":
            m = UpdateMode.LOOP if t3 - t1 > loop_gap + TIME_TOL else UpdateMode.SEQUENTIAL
        else:
            m = UpdateMode(mode)
        triples.append(Triple(tid, t1, t2, t3, feats, m))
    triples.sort(key=lambda tr: (tr.t3, tr.triple_id))
    return triples


def read_bundle(directory, mode="auto", loop_gap=1.0):
    """Load a replay bundle.

    ``mode`` labels the triples ``loop``/``sequential``; ``auto`` calls a triple
    a loop closure when its first and last views are more than ``loop_gap``
    seconds apart.
    """
    d = Path(directory)
    for name in ("imu.csv", "features.csv", "initial.json"):
        if not (d / name).is_file():
            raise SchemaError(f"bundle {d}: missing {name}")
    _, imu_rows = read_csv(d / "imu.csv", IMU_COLUMNS)
    if not imu_rows:
        raise SchemaError("imu.csv: no samples")
    imu = _floats(imu_rows, IMU_COLUMNS, d / "imu.csv")
    _monotone(imu[:, 0], d / "imu.csv")

    init = _read_initial(d / "initial.json")
    t_end = init["t_end"]
    if t_end is None:
        dt = np.median(np.diff(imu[:, 0])) if len(imu) > 1 else 0.0
        t_end = float(imu[-1, 0] + dt)
    t_end = float(t_end)
    if t_end < imu[-1, 0]:
        raise TimestampError("initial.json: t_end precedes the last IMU sample")
    if abs(init["t0"] - imu[0, 0]) > TIME_TOL:
        raise TimestampError("initial.json: t0 differs from the first IMU timestamp")

    _, feat_rows = read_csv(d / "features.csv", FEATURE_COLUMNS)
    triples = _triples_from_rows(feat_rows, d / "features.csv", mode, loop_gap)
    for tr in triples:
        if tr.t1 < imu[0, 0] - TIME_TOL or tr.t3 > t_end + TIME_TOL:
            raise TimestampError(f"triple {tr.triple_id} lies outside the IMU stream")

    truth = None
    if (d / "groundtruth.csv").is_file():
        header, rows = read_csv(d / "groundtruth.csv", TRUTH_COLUMNS, TRUTH_OPTIONAL)
        cols = [c for c in header]
        vals = _floats(rows, cols, d / "groundtruth.csv")
        _monotone(vals[:, 0], d / "groundtruth.csv")
        truth = {c: vals[:, i] for i, c in enumerate(cols)}

    nav0 = NavState(init["q_n_b"], init["b_g"], init["V_n"], init["b_a"], init["Pos_n"])
    return ReplayBundle(imu[:, 0], imu[:, 1:4], imu[:, 4:7], t_end, nav0, init["P0"],
                        triples, truth)


def truth_errors(bundle, track):
    """Truth minus estimate at the recorded epochs; NaN where truth is unavailable."""
    n = len(track.t)
    err = np.full((n, N_STATE), np.nan)
    tr = bundle.truth
    if tr is None:
        return err
    idx = np.searchsorted(tr["t_s"], track.t - TIME_TOL)
    for i, (k, t) in enumerate(zip(idx, track.t)):
        if k >= len(tr["t_s"]) or abs(tr["t_s"][k] - t) > TIME_TOL:
            continue
        q = np.array([tr["qx"][k], tr["qy"][k], tr["qz"][k], tr["qw"][k]])
        err[i, ATT] = attitude_error(q, track.q[i])
        err[i, POS] = np.array([tr["px"][k], tr["py"][k], tr["pz"][k]]) - track.Pos[i]
        if "vx" in tr:
            err[i, VEL] = np.array([tr["vx"][k], tr["vy"][k], tr["vz"][k]]) - track.V[i]
        if "ax" in tr:
            err[i, BA] = np.array([tr["ax"][k], tr["ay"][k], tr["az"][k]]) - track.b_a[i]
        if "bx" in tr:
            err[i, BG] = np.array([tr["bx"][k], tr["by"][k], tr["bz"][k]]) - track.b_g[i]
    return err


def truth_table(q, b_g, V, b_a, Pos, t):
    """Ground-truth columns for :func:`write_bundle`."""
    q, V, Pos, b_g, b_a = (np.asarray(x, dtype=float) for x in (q, V, Pos, b_g, b_a))
    return {"t_s": np.asarray(t, dtype=float),
            "px": Pos[:, 0], "py": Pos[:, 1], "pz": Pos[:, 2],
            "qx": q[:, 0], "qy": q[:, 1], "qz": q[:, 2], "qw": q[:, 3],
            "vx": V[:, 0], "vy": V[:, 1], "vz": V[:, 2],
            "ax": b_a[:, 0], "ay": b_a[:, 1], "az": b_a[:, 2],
            "bx": b_g[:, 0], "by": b_g[:, 1], "bz": b_g[:, 2]}


__all__ = ["COMPONENTS", "ReplayBundle", "read_bundle", "write_bundle", "write_results",
           "read_results", "position_summary", "truth_errors", "truth_table", "INS_ONLY"]
