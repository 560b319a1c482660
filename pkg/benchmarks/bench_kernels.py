"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from neggen import _kernels_py

try:
    from neggen import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    cost = rng.random((6, 6))
    big_cost = rng.random((60, 80))
    logits = rng.normal(0, 4, size=20000)
    targets = (rng.random(20000) < 0.2).astype(np.float64)
    xy = rng.uniform(0, 500, size=(200, 2))
    boxes = np.hstack([xy, xy + rng.uniform(1, 200, size=(200, 2))])
    return {
        "assign_rows 6x6": lambda m: m.assign_rows(cost),
        "assign_rows 60x80": lambda m: m.assign_rows(big_cost),
        "focal_terms 20k": lambda m: m.focal_terms(logits, targets, 0.25, 2.0),
        "coverage_matrix 200": lambda m: m.coverage_matrix(boxes),
    }


def best_of(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    impls = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels else [])
    print(f"{'kernel':<22}" + "".join(f"{name:>14}" for name, _ in impls) + ("     speedup" if _kernels else ""))
    for label, fn in cases(np.random.default_rng(args.seed)).items():
        times = [best_of(lambda m=mod: fn(m), args.repeat) for _, mod in impls]
        row = f"{label:<22}" + "".join(f"{t * 1e6:>12.1f}us" for t in times)
        if _kernels:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)
    if _kernels is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
