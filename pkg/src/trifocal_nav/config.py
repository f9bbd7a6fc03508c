"""Experiment configuration: dataclasses, JSON load/save and validation.

Every field has a default, so a file holding only ``{"seed": 7}`` describes
the reference loop scenario.  Unknown keys are rejected and all invalid values
are reported together.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .sim import CameraModel, SensorErrorSpec, TrajectorySpec
from .trifocal import BASES

MODES = ("sequential", "loop", "auto")
METHOD_NAMES = ("trifocal", "threeview", "ins")
CROSS_COVARIANCE = ("auto", "neglect", "tracked")


@dataclass
class ScheduleConfig:
    """When image triples are taken.

    ``loop``: snapshots pinned at ``loop_t1``/``loop_t2``, one update at each
    ``loop_t3``.  ``sequential``: back-to-back windows
    ``(t, t + seq_dt12, t + seq_dt13)`` starting at ``seq_start``, each window
    starting where the previous one updated.  ``auto``: both.
    """

    mode: str = "loop"
    loop_t1: float = 5.0
    loop_t2: float = 6.0
    loop_t3: tuple = (90.0, 160.0)
    seq_start: float = 5.0
    seq_dt12: float = 1.0
    seq_dt13: float = 10.0
    seq_end: float = None  # defaults to the trajectory duration


@dataclass
class FilterConfig:
    normalize: bool = True
    gate_probability: float = 0.999
    cross_covariance: str = "auto"  # current/snapshot covariances: tracked for sequential only
    iterations: int = 50  # relinearizations per update; 1 is the plain single-step update
    tolerance: float = 1e-4
    basis: str = "camera"  # frame the four trifocal entries are read in
    latitude_deg: float = 45.0
    earth_rotation: bool = True
    gravity: float = 9.81


@dataclass
class ExperimentConfig:
    seed: int = 0
    runs: int = 25
    n_features: int = 40
    methods: tuple = METHOD_NAMES
    record_interval: float = 1.0
    report_epochs: tuple = (90.0, 160.0)
    feature_counts: tuple = (5, 40, 80)
    simulate_errors: bool = True  # False: perfect IMU, exact pixels, zero initial error
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    camera: CameraModel = field(default_factory=CameraModel)
    errors: SensorErrorSpec = field(default_factory=SensorErrorSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)


_SECTIONS = {"trajectory": TrajectorySpec, "camera": CameraModel, "errors": SensorErrorSpec,
             "schedule": ScheduleConfig, "filter": FilterConfig}


def _plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = to_dict(value) if dataclasses.is_dataclass(value) else _plain(value)
    return out


def _line_of_key(text, key):
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def _build(cls, data, prefix, text, violations):
    if not isinstance(data, dict):
        violations.append(f"{prefix or 'config'}: expected an object")
        return cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in data if k not in names]
    if unknown:
        key = unknown[0]
        raise ParseError(f"unknown key {prefix + key!r}", line=_line_of_key(text, key),
                         field=prefix + key)
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS and cls is ExperimentConfig:
            kwargs[key] = _build(_SECTIONS[key], value, f"{key}.", text, violations)
        elif isinstance(value, list):
            kwargs[key] = value if key in ("pixel_cov", "C_c_b") else tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError):
        # let validate() describe the problem; keep the raw values for it
        obj = cls.__new__(cls)
        defaults = cls()
        for f in dataclasses.fields(cls):
            setattr(obj, f.name, kwargs.get(f.name, getattr(defaults, f.name)))
        return obj


def _positive(violations, name, value):
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
        violations.append(f"{name} must be a positive number (got {value!r})")


def _nonneg_seq(violations, name, value, n=3):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        violations.append(f"{name} must be numeric")
        return
    if arr.shape != (n,) or np.any(arr < 0) or not np.all(np.isfinite(arr)):
        violations.append(f"{name} must be {n} non-negative numbers (got {value!r})")


def validate(cfg):
    """Return the list of all problems with ``cfg`` (empty when valid)."""
    v = []
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or not 0 <= cfg.seed < 2 ** 64:
        v.append(f"seed must be an unsigned 64-bit integer (got {cfg.seed!r})")
    if not isinstance(cfg.runs, int) or cfg.runs < 1:
        v.append(f"runs must be an integer >= 1 (got {cfg.runs!r})")
    if not isinstance(cfg.n_features, int) or cfg.n_features < 0:
        v.append(f"n_features must be an integer >= 0 (got {cfg.n_features!r})")
    bad = [m for m in cfg.methods if m not in METHOD_NAMES]
    if bad or not cfg.methods:
        v.append(f"methods must be a non-empty subset of {METHOD_NAMES} (got {list(cfg.methods)})")
    _positive(v, "record_interval", cfg.record_interval)
    if not cfg.feature_counts or any(not isinstance(n, int) or n < 0 for n in cfg.feature_counts):
        v.append("feature_counts must be non-negative integers")

    tr = cfg.trajectory
    for name in ("speed", "altitude", "turn_duration", "duration", "rate_hz", "gate"):
        _positive(v, f"trajectory.{name}", getattr(tr, name))
    for name in ("long_leg", "short_leg"):
        if not isinstance(getattr(tr, name), (int, float)) or getattr(tr, name) < 0:
            v.append(f"trajectory.{name} must be non-negative")
    for t in cfg.report_epochs:
        if not isinstance(t, (int, float)) or not 0 <= t <= tr.duration:
            v.append(f"report_epochs entry {t!r} outside the trajectory")

    cam = cfg.camera
    _positive(v, "camera.focal", cam.focal)
    _positive(v, "camera.width", cam.width)
    _positive(v, "camera.height", cam.height)
    R = np.asarray(cam.pixel_cov, dtype=float)
    if R.shape != (3, 3) or not np.allclose(R, R.T) or np.linalg.eigvalsh(0.5 * (R + R.T)).min() < 0:
        v.append("camera.pixel_cov must be a symmetric PSD 3x3 matrix")
    C = np.asarray(cam.C_c_b, dtype=float)
    if C.shape != (3, 3) or not np.allclose(C.T @ C, np.eye(3), atol=1e-9) or np.linalg.det(C) < 0:
        v.append("camera.C_c_b must be a proper rotation matrix")

    er = cfg.errors
    for name in ("sigma_pos", "sigma_vel", "sigma_att_deg", "sigma_gyro_bias_dph",
                 "sigma_accel_bias_mg"):
        _nonneg_seq(v, f"errors.{name}", getattr(er, name))
    for name in ("gyro_noise", "gyro_walk", "accel_noise", "accel_walk"):
        val = getattr(er, name)
        if not isinstance(val, (int, float)) or val < 0:
            v.append(f"errors.{name} must be non-negative")

    sc = cfg.schedule
    if sc.mode not in MODES:
        v.append(f"schedule.mode must be one of {MODES} (got {sc.mode!r})")
    if not 0 <= sc.loop_t1 < sc.loop_t2:
        v.append("schedule.loop_t1 must be >= 0 and before loop_t2")
    if any(t <= sc.loop_t2 or t > tr.duration for t in sc.loop_t3):
        v.append("schedule.loop_t3 entries must lie after loop_t2 and within the trajectory")
    if not 0 < sc.seq_dt12 < sc.seq_dt13:
        v.append("schedule.seq_dt12 must be positive and smaller than seq_dt13")
    if sc.seq_start < 0:
        v.append("schedule.seq_start must be >= 0")

    fc = cfg.filter
    if not 0 < fc.gate_probability <= 1:
        v.append("filter.gate_probability must be in (0, 1]")
    if fc.cross_covariance not in CROSS_COVARIANCE:
        v.append(f"filter.cross_covariance must be one of {CROSS_COVARIANCE}")
    if not isinstance(fc.iterations, int) or fc.iterations < 1:
        v.append(f"filter.iterations must be an integer >= 1 (got {fc.iterations!r})")
    _positive(v, "filter.tolerance", fc.tolerance)
    if fc.basis not in BASES:
        v.append(f"filter.basis must be one of {BASES}")
    if not -90 <= fc.latitude_deg <= 90:
        v.append("filter.latitude_deg must be within [-90, 90]")
    _positive(v, "filter.gravity", fc.gravity)
    return v


def from_dict(data, text=""):
    violations = []
    cfg = _build(ExperimentConfig, data, "", text, violations)
    violations += validate(cfg)
    if violations:
        raise ValidationError(violations)
    return cfg


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    return from_dict(data, text)


def load_config(path):
    return loads(Path(path).read_text())


def dumps(cfg):
    return json.dumps(to_dict(cfg), indent=2, sort_keys=False) + "\n"


def save_config(cfg, path):
    Path(path).write_text(dumps(cfg))


def with_overrides(cfg, **changes):
    """Copy of ``cfg`` with top-level fields replaced (``None`` values ignored)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(cfg, **changes)
