"""Compare the numba-jitted alignment kernel against the pure-numpy
fallback on realistic distance-matrix sizes.

Run:  python benchmarks/bench_kernels.py [--sizes 8,16,32,64] [--repeats 50]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from schedlab._kernels import NUMBA_ENABLED, dtw_cost_numba, dtw_cost_numpy


def _time(fn, mats, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for d in mats:
            fn(d)
        best = min(best, time.perf_counter() - t0)
    return best / len(mats)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="4,8,16,32,64",
                    help="comma-separated square matrix sizes")
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--batch", type=int, default=50,
                    help="matrices per timed batch")
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    rng = np.random.default_rng(0)
    print(f"numba available: {NUMBA_ENABLED}")
    print(f"{'size':>6} {'numpy (us)':>12} {'numba (us)':>12} {'speedup':>9}")
    for n in sizes:
        mats = [np.abs(rng.normal(size=(n, n))) for _ in range(args.batch)]
        if dtw_cost_numba is not None:
            dtw_cost_numba(mats[0])  # compile outside the timed region
            for d in mats:
                a, b = dtw_cost_numpy(d), dtw_cost_numba(d)
                assert abs(a - b) < 1e-9 * max(1.0, abs(a)), "kernels disagree"
        t_np = _time(dtw_cost_numpy, mats, args.repeats)
        if dtw_cost_numba is not None:
            t_nb = _time(dtw_cost_numba, mats, args.repeats)
            print(f"{n:>6} {t_np * 1e6:>12.1f} {t_nb * 1e6:>12.1f} "
                  f"{t_np / t_nb:>8.1f}x")
        else:
            print(f"{n:>6} {t_np * 1e6:>12.1f} {'-':>12} {'-':>9}")


if __name__ == "__main__":
    main()
