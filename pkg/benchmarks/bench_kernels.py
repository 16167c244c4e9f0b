"""Time the compiled and pure-Python kernel backends on training-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from gdslab import kernels
from gdslab.data import enumerate_pairs


def cases(rng):
    # one PK batch (P=32, K=4, E=16) and one clustering round (900 target samples)
    batch = rng.standard_normal((128, 16))
    batch /= np.linalg.norm(batch, axis=1, keepdims=True)
    pos, neg = enumerate_pairs(np.repeat(np.arange(32), 4))
    pairs = np.concatenate([pos, neg])
    ia, ib = pairs[:, 0], pairs[:, 1]
    d = 0.5 * np.linalg.norm(batch[ia] - batch[ib], axis=1)
    coef = rng.standard_normal(len(ia))
    pool = rng.standard_normal((900, 16))
    pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    eps = float(np.percentile(kernels.pairwise_half_distances(pool, pool), 1.0))
    return {
        "half_distances (8128 pairs)": lambda impl: kernels.half_distances(batch, ia, ib, impl=impl),
        "scatter_pair_grad (8128 pairs)": lambda impl: kernels.scatter_pair_grad(batch, ia, ib, d, coef, impl=impl),
        "pairwise_half_distances (900x900)": lambda impl: kernels.pairwise_half_distances(pool, pool, impl=impl),
        "dbscan_labels (900 points)": lambda impl: kernels.dbscan_labels(pool, eps, 4, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(sorted(backends))}")
    rng = np.random.default_rng(0)
    header = f"{'kernel':36s}" + "".join(f"{name:>12s}" for name in sorted(backends))
    if len(backends) > 1:
        header += f"{'speedup':>10s}"
    print(header)
    for label, fn in cases(rng).items():
        times = {}
        for name, impl in sorted(backends.items()):
            number = 3
            times[name] = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat)) / number
        row = f"{label:36s}" + "".join(f"{times[n] * 1e3:10.2f}ms" for n in sorted(backends))
        if "cython" in times:
            row += f"{times['python'] / times['cython']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
