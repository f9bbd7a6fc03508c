"""Export one simulated run as a CSV bundle, replay it and compare.

The replay path reads only imu.csv, features.csv and initial.json (plus
groundtruth.csv for the error columns), so the match shows that the bundle
carries everything the filter needs.
"""

import csv
import logging
import tempfile
from pathlib import Path

import numpy as np

from trifocal_nav import cli
from trifocal_nav.config import ExperimentConfig

logging.basicConfig(level=logging.WARNING)


def values(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in r[2:]] for r in rows])


cfg = ExperimentConfig()
with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    cli.cmd_simulate(cfg, tmp / "sim", export_dir=tmp / "bundle")
    for name in sorted(p.name for p in (tmp / "bundle").iterdir()):
        print(f"bundle file: {name} ({(tmp / 'bundle' / name).stat().st_size} bytes)")
    cli.cmd_replay(tmp / "bundle", cfg, tmp / "replay")
    a, b = values(tmp / "sim" / "results.csv"), values(tmp / "replay" / "results.csv")
    print(f"\n{a.shape[0]} result rows, max |simulate - replay| = {np.abs(a - b).max():.1e}")
    print((tmp / "replay" / "summary.csv").read_text())
