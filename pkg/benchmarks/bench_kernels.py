"""Compare the numba kernels with the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 4000] [--features 40] [--repeat 5]

Kernel timings run in-process against both implementations. The end-to-end
``train_tier`` timing runs in two subprocesses, one with LAEIDS_DISABLE_NUMBA=1,
because the backend is fixed at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from laeids.kernels import apply_tree_numba, apply_tree_numpy, best_split_numba, best_split_numpy

TRAIN_SNIPPET = """
import json, time
import numpy as np
from laeids._accel import backend_name
from laeids.classify import Tier, tier_config, train_tier
rng = np.random.default_rng(0)
X = rng.normal(size=({n}, {d}))
y = (X[:, :3].sum(1) > 0).astype(np.int64)
train_tier(Tier.LIGHT, X[:50], y[:50], tier_config(Tier.LIGHT), ("b", "m"))  # warm-up / JIT
t = time.perf_counter()
train_tier(Tier.MEDIUM, X, y, tier_config(Tier.MEDIUM), ("b", "m"))
print(json.dumps({{"backend": backend_name(), "seconds": time.perf_counter() - t}}))
"""


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def random_tree(rng, d, depth=6):
    n_internal = 2 ** depth - 1
    n = 2 * n_internal + 1
    feature = np.full(n, -1, dtype=np.int64)
    threshold = np.zeros(n)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    for i in range(n_internal):
        feature[i] = rng.integers(d)
        threshold[i] = rng.normal()
        left[i], right[i] = 2 * i + 1, 2 * i + 2
    return feature, threshold, left, right


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4000)
    ap.add_argument("--features", type=int, default=40)
    ap.add_argument("--classes", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-train", action="store_true")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    n, d = args.rows, args.features
    X = np.round(rng.normal(size=(n, d)), 2)
    G = rng.normal(size=(n, args.classes))
    H = rng.uniform(0.05, 0.25, (n, args.classes))
    rows = np.arange(n, dtype=np.int64)
    ok = np.ones(d, dtype=bool)
    split_args = (X, rows, G, H, ok, 1.0, 1, 0.0)
    tree = random_tree(rng, d)

    assert best_split_numba(*split_args) == best_split_numpy(*split_args)
    assert np.array_equal(apply_tree_numba(X, *tree), apply_tree_numpy(X, *tree))

    results = {
        "best_split": {"numba": best_of(lambda: best_split_numba(*split_args), args.repeat),
                       "numpy": best_of(lambda: best_split_numpy(*split_args), args.repeat)},
        "apply_tree": {"numba": best_of(lambda: apply_tree_numba(X, *tree), args.repeat),
                       "numpy": best_of(lambda: apply_tree_numpy(X, *tree), args.repeat)},
    }
    if not args.skip_train:
        results["train_tier_medium"] = {}
        code = TRAIN_SNIPPET.format(n=n, d=d)
        for flag in ("0", "1"):
            env = {**os.environ, "LAEIDS_DISABLE_NUMBA": flag}
            out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
            rec = json.loads(out.stdout.strip().splitlines()[-1])
            results["train_tier_medium"][rec["backend"]] = rec["seconds"]

    print(f"rows={n} features={d} classes={args.classes} (best of {args.repeat})")
    print(f"{'kernel':<20}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    for name, r in results.items():
        nb, npy = r.get("numba", float("nan")), r.get("numpy", float("nan"))
        print(f"{name:<20}{nb:>12.5f}{npy:>12.5f}{npy / nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
