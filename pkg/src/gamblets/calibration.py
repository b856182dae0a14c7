"""Frozen calibration values shipped with the package.

Every entry is an empirical value measured once and frozen: the
localization constant C_a comes from a doubling search on a q=4 FEM
instance (see :func:`gamblets.fast.calibrate_C_a`), and the thresholds are
the cut-offs used by the qualitative checks.
"""

import json
from functools import lru_cache
from pathlib import Path

_PATH = Path(__file__).with_name("calibration.json")


@lru_cache(maxsize=1)
def load_calibration():
    return json.loads(_PATH.read_text())


def frozen_C_a(epsilon):
    """Calibrated C_a for ``epsilon``; falls back to the largest frozen value."""
    table = load_calibration()["C_a"]
    for key, val in table.items():
        if abs(float(key) - epsilon) <= 1e-12 * max(1.0, epsilon):
            return float(val)
    return max(float(v) for v in table.values())


def threshold(name):
    return load_calibration()["empirical_thresholds"][name]
