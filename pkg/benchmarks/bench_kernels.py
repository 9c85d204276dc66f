"""Time the compiled kernels against the NumPy/SciPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each row reports the median wall time per call for both backends on the
same inputs, and checks that the outputs agree.
"""

import argparse
import time

import numpy as np

from diffcount import kernels
from diffcount.groundtruth import KERNEL, render_density


def timed(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def cases(rng):
    h = w = 1024
    n = 5000
    rows = rng.integers(0, h, n).astype(np.int64)
    cols = rng.integers(0, w, n).astype(np.int64)
    yield "render_points 1024^2, 5000 pts", lambda k: k.render_points(rows, cols, KERNEL, h, w)

    pts = np.column_stack([cols, rows]).astype(np.float64)
    dmap = render_density(pts[:2000], h, w)
    yield "label_components 1024^2, 2000 blobs", lambda k: k.label_components(dmap, 0.0057)

    ref = rng.uniform(0, 1024, (3000, 2))
    cand = rng.uniform(0, 1024, (3000, 2))
    yield "rejection_radii 3000 pts", lambda k: k.rejection_radii(ref, 0.85, 4, 51.2, 1.0)
    radii = kernels.get_backend("python").rejection_radii(ref, 0.85, 4, 51.2, 1.0)
    yield "reject_candidates 3000 x 3000", lambda k: k.reject_candidates(ref, radii, cand)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-9, atol=1e-12)


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    py = kernels.get_backend("python")
    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}  agree")
    for name, call in cases(rng):
        tc, oc = timed(lambda: call(cy), args.repeat)
        tp, op = timed(lambda: call(py), args.repeat)
        print(f"{name:40s} {tc * 1e3:10.3f} {tp * 1e3:10.3f} {tp / tc:8.1f}x  {same(oc, op)}")


if __name__ == "__main__":
    main()
