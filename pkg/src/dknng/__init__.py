"""Distributed approximate k-nearest-neighbor graph construction."""

import os as _os
import warnings as _warnings

import numba as _numba

if "NUMBA_THREADING_LAYER" not in _os.environ:
    # rank threads launch parallel kernels concurrently
    _numba.config.THREADING_LAYER = "threadsafe"
# "threadsafe" probes TBB first; an outdated TBB only means falling back to OpenMP
_warnings.filterwarnings("ignore", message="The TBB threading layer", category=_numba.NumbaWarning)

from .core import Dataset, KnnGraph, Metric, NeighborEntry, UsageError, distance  # noqa: E402

__all__ = ["Dataset", "KnnGraph", "Metric", "NeighborEntry", "UsageError", "distance"]
__version__ = "0.1.0"
