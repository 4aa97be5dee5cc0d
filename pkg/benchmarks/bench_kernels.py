"""Compare the numba and numpy kernel backends on representative sizes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each kernel is called once per backend before timing so numba compilation
is excluded. Results from both backends are checked for equality first.
"""
import argparse
import timeit

import numpy as np

from ldanon.kernels import _numpy

try:
    from ldanon.kernels import _numba
except ImportError:  # numba not installed
    _numba = None


def cases(rng):
    p = rng.random((2048, 64))
    q = rng.random((2048, 64))
    p /= p.sum(1, keepdims=True)
    q /= q.sum(1, keepdims=True)
    dists = rng.uniform(0, 2, 30_000)
    order = rng.permutation(30_000).astype(np.int64)
    scores = np.round(rng.random(5000), 2)
    labels = rng.integers(0, 2, 5000).astype(np.int64)
    return {
        "emd_rows (2048 x 64 bins)": ("emd_rows", (p, q, 1.0 / 64)),
        "constrained_argmin (30k pool)": ("constrained_argmin", (dists, order, 1.0)),
        "rank_of (30k gallery)": ("rank_of", (dists, order, 123)),
        "auc_numerator (5k scores)": ("auc_numerator", (scores, labels)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = {"numpy": _numpy}
    if _numba is not None:
        backends["numba"] = _numba
    print(f"{'kernel':32s} " + " ".join(f"{b:>12s}" for b in backends) + "   speedup")
    for label, (name, call_args) in cases(np.random.default_rng(args.seed)).items():
        results = {b: getattr(m, name)(*call_args) for b, m in backends.items()}  # warm-up / compile
        ref = results["numpy"]
        for b, got in results.items():
            assert np.allclose(got, ref, rtol=0, atol=1e-12), f"{name}: {b} disagrees with numpy"
        times = {}
        for b, m in backends.items():
            fn = getattr(m, name)
            times[b] = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
        row = " ".join(f"{times[b] * 1e3:10.3f}ms" for b in backends)
        speed = f"{times['numpy'] / times['numba']:8.1f}x" if "numba" in times else "       -"
        print(f"{label:32s} {row} {speed}")


if __name__ == "__main__":
    main()
