"""Sparse-view surface reconstruction with 2D Gaussian disk splatting."""

import os

# the TBB layer shipped in this environment is too old for numba; fall back quietly
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
