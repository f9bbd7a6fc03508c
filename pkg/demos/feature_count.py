"""Position RMSE right after the 90 s loop update against the number of features.

Usage: python demos/feature_count.py [runs]
"""

import logging
import sys

from trifocal_nav.config import ExperimentConfig
from trifocal_nav.experiment import feature_count_study

logging.basicConfig(level=logging.WARNING)

runs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
counts = [3, 5, 10, 20, 40, 80]
for method in ("trifocal", "threeview"):
    rows = feature_count_study(ExperimentConfig(), counts=counts, runs=runs, method=method)
    print(method)
    for n, rmse in rows:
        print(f"  N = {n:3d}: {rmse:7.2f} m")
