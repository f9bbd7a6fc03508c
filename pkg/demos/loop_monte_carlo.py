"""Loop-closure Monte Carlo on the reference scenario.

Runs the three methods over the 200 s loop with updates at t3 = 90 s and
160 s, then prints position RMSE, mean position sigma and NEES around each
update.  Usage: python demos/loop_monte_carlo.py [runs]
"""

import logging
import sys
import time

import numpy as np

from trifocal_nav.config import ExperimentConfig, with_overrides
from trifocal_nav.experiment import run_monte_carlo
from trifocal_nav.ins import POS

logging.basicConfig(level=logging.WARNING)

runs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
cfg = with_overrides(ExperimentConfig(), runs=runs)

t0 = time.perf_counter()
mc = run_monte_carlo(cfg)
print(f"{runs} runs in {time.perf_counter() - t0:.1f} s\n")

print(f"{'t [s]':>6} " + " ".join(f"{m + ' rmse/sig':>22}" for m in cfg.methods))
for t in (5.0, 60.0, 89.0, 90.0, 120.0, 159.0, 160.0, 200.0):
    i = mc.index(t)
    cells = []
    for m in cfg.methods:
        sig = np.linalg.norm(mc.mean_sigma[m][i, POS])
        cells.append(f"{mc.pos_rmse[m][i]:10.1f} /{sig:9.1f}")
    print(f"{t:6.0f} " + " ".join(f"{c:>22}" for c in cells))

lo, hi = mc.nees_envelope()
print(f"\nNEES (15-state, averaged over runs), 99% envelope [{lo:.1f}, {hi:.1f}]")
for m in ("trifocal", "threeview"):
    times, vals = mc.nees[m]
    print(f"  {m:9s} " + ", ".join(f"t={t:g}s: {v:.1f}" for t, v in zip(times, np.nanmean(vals, axis=1))))
