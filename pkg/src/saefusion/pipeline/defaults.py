"""Canonical defaults for the estimation pipeline."""

from __future__ import annotations

from typing import List

# Kriging
DEFAULT_NEIGHBORHOOD = 15
MAX_NEIGHBORHOOD = 64
DEFAULT_CV_CANDIDATES: List[int] = [5, 10, 15, 20, 25, 30]
DEFAULT_CV_FOLDS = 5
DEFAULT_BUFFER_KM = 10.0
DEFAULT_MAP_UNITS_PER_KM = 1000.0
DEFAULT_NODES_PER_REGION = 64
MAX_PAIR_NODES = 128
MIN_QUADRATURE_NODES = 4

# Variogram
DEFAULT_VARIOGRAM_BINS = 15
DEFAULT_NU_GRID: List[float] = [0.5, 1.0, 1.5, 2.5]
MAX_LAG_DIAGONAL_FRACTION = 1.0 / 3.0

# Geometry
DEFAULT_SNAP_TOLERANCE = 1e-6

# Model
DEFAULT_VAR_LOG_FLOOR = 1e-8
RHO_SHRINK = 1e-6
REML_STARTS = 5

# Simulation and bootstrap
DEFAULT_SIMULATED_POINTS = 1259
DEFAULT_BOOTSTRAP_REPLICATES = 1000
DEFAULT_LEVEL = 0.95
SUCCESS_THRESHOLD = 0.9
DEFAULT_DIAG_TRAJECTORIES = 100
JITTER_LEVELS: List[float] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6]

DEFAULT_MASTER_SEED = 20240607

__all__ = [
    "DEFAULT_NEIGHBORHOOD",
    "MAX_NEIGHBORHOOD",
    "DEFAULT_CV_CANDIDATES",
    "DEFAULT_CV_FOLDS",
    "DEFAULT_BUFFER_KM",
    "DEFAULT_MAP_UNITS_PER_KM",
    "DEFAULT_NODES_PER_REGION",
    "MAX_PAIR_NODES",
    "MIN_QUADRATURE_NODES",
    "DEFAULT_VARIOGRAM_BINS",
    "DEFAULT_NU_GRID",
    "MAX_LAG_DIAGONAL_FRACTION",
    "DEFAULT_SNAP_TOLERANCE",
    "DEFAULT_VAR_LOG_FLOOR",
    "RHO_SHRINK",
    "REML_STARTS",
    "DEFAULT_SIMULATED_POINTS",
    "DEFAULT_BOOTSTRAP_REPLICATES",
    "DEFAULT_LEVEL",
    "SUCCESS_THRESHOLD",
    "DEFAULT_DIAG_TRAJECTORIES",
    "JITTER_LEVELS",
    "DEFAULT_MASTER_SEED",
]
