"""Numba vs numpy timings for the hot loops: NMS, hysteresis, contour
extraction and directed Hausdorff on one 128x128 phantom slice.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is warmed up once (numba compiles on first call) and then timed
as the best of N runs. Outputs of the two backends are checked for equality
before timing.
"""
import argparse
import math
import sys
import time

import numpy as np

from eeunet import kernels
from eeunet.dataset import gen_phantom
from eeunet.edge import gaussian_smooth, grad_xy, magnitude_orientation


def best_of(fn, repeat):
    fn()
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def edge_inputs(image):
    lam, theta = magnitude_orientation(*grad_xy(gaussian_smooth(image, 3, 1.5)))
    thin = kernels.nms_numpy(lam, theta)
    nz = thin[thin > 0]
    high = float(np.percentile(nz, 75))
    return lam, theta, thin, 0.4 * high, high


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not kernels.NUMBA_AVAILABLE:
        print("numba is not importable (or EEUNET_DISABLE_NUMBA is set); nothing to compare")
        return 1

    sample = gen_phantom(0, 1)[0]
    lam, theta, thin, low, high = edge_inputs(sample.image)
    region = np.ascontiguousarray(sample.mask == 2)
    pts = np.argwhere(kernels.boundary_numpy(region)).astype(np.int64)
    other = np.argwhere(kernels.boundary_numpy(np.ascontiguousarray(sample.mask == 1))).astype(np.int64)

    cases = [
        ("nms 128x128", lambda: kernels.nms_numba(lam, theta), lambda: kernels.nms_numpy(lam, theta)),
        (
            "hysteresis 128x128",
            lambda: kernels.hysteresis_numba(thin, low, high),
            lambda: kernels.hysteresis_numpy(thin, low, high),
        ),
        ("boundary 128x128", lambda: kernels.boundary_numba(region), lambda: kernels.boundary_numpy(region)),
        (
            f"directed hausdorff {len(pts)}x{len(other)} pts",
            lambda: kernels.directed_hausdorff_numba(pts, other, 1.0, 1.0),
            lambda: kernels.directed_hausdorff_numpy(pts, other, 1.0, 1.0),
        ),
    ]
    print(f"{'kernel':<34}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fast, slow in cases:
        assert np.array_equal(np.asarray(fast()), np.asarray(slow())), name
        tf, ts = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<34}{tf * 1e3:>10.3f}{ts * 1e3:>10.3f}{ts / tf:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
