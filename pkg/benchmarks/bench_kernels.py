"""Compare the compiled and pure-Python sector-overlap kernels.

    python3 benchmarks/bench_kernels.py [--n 60] [--repeat 3]

Times ``overlap_matrix`` on random poses with both backends, checks that
they agree, and prints one JSON line per backend.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import timeit

import numpy as np

from gcsa import geometry


def random_poses(n: int, rng: np.random.Generator, extent: float = 30.0) -> np.ndarray:
    p = np.zeros((n, 4))
    p[:, :2] = rng.uniform(0.0, extent, (n, 2))
    p[:, 3] = rng.uniform(-math.pi, math.pi, n)
    return p


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--n", type=int, default=60, help="poses per side (n x n pairs)")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    a, b = random_poses(args.n, rng), random_poses(args.n, rng)
    backends = ["python"] + (["cython"] if geometry._kernels is not None else [])
    results, times = {}, {}
    for name in backends:
        def run(name=name):
            return geometry.overlap_matrix(a, b, 8.0, math.pi / 2, backend=name)
        results[name] = run()
        times[name] = min(timeit.repeat(run, number=1, repeat=args.repeat))
        print(json.dumps({"backend": name, "pairs": args.n * args.n, "seconds": round(times[name], 4),
                          "pairs_per_second": round(args.n * args.n / times[name])}))
    if "cython" in results:
        diff = float(np.max(np.abs(results["cython"] - results["python"])))
        print(json.dumps({"max_abs_difference": diff, "speedup": round(times["python"] / times["cython"], 1)}))
        if diff > 1e-9:
            return 1
    else:
        print(json.dumps({"note": "compiled kernel not built; only the fallback was timed"}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
