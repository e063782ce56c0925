"""Hot numeric kernels.

The dynamic-alignment accumulation is the only pure-Python inner loop on
the evaluation path, so it gets a numba-jitted version. Set
``SCHEDLAB_NUMBA=0`` to force the pure-numpy fallback (same results);
``benchmarks/bench_kernels.py`` compares the two.
"""
from __future__ import annotations

import os

import numpy as np


def _dtw_cost_py(dist: np.ndarray) -> float:
    """Accumulated cost of the best monotone alignment through ``dist``
    with symmetric steps (diagonal, right, down)."""
    n, m = dist.shape
    acc = np.empty((n, m))
    acc[0, 0] = dist[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + dist[0, j]
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + dist[i, 0]
        for j in range(1, m):
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = dist[i, j] + best
    return float(acc[n - 1, m - 1])


dtw_cost_numpy = _dtw_cost_py

NUMBA_ENABLED = os.environ.get("SCHEDLAB_NUMBA", "1") != "0"
dtw_cost_numba = None
if NUMBA_ENABLED:
    try:
        from numba import njit
        dtw_cost_numba = njit(cache=True, nogil=True)(_dtw_cost_py)
    except ImportError:
        NUMBA_ENABLED = False

dtw_cost = dtw_cost_numba if NUMBA_ENABLED else dtw_cost_numpy
