"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from priordepth import kernels
from priordepth.losses import normalize_features, sbl_anchors


def _cases(rng):
    x = rng.normal(size=(1, 32, 48, 32)).astype(np.float32)
    w = rng.normal(size=(32, 32, 3, 3)).astype(np.float32)
    wd = rng.normal(size=(32, 1, 3, 3)).astype(np.float32)
    b = np.zeros(32, dtype=np.float32)
    q, k = rng.normal(size=(2, 1, 16, 24, 16))
    t = rng.uniform(size=(1, 24 + 16 - 1, 24, 16))
    sem = rng.integers(0, 3, size=(24, 32))
    feat = normalize_features(rng.normal(size=(1, 8, 24, 32)))
    anchors = sbl_anchors(sem)
    return {
        "conv2d 3x3 dense": lambda m: m.conv2d(x, w, b, 1, 1, 1),
        "conv2d 3x3 depthwise": lambda m: m.conv2d(x, wd, b, 1, 1, 32),
        "cc_scores": lambda m: m.cc_scores(q, k),
        "cc_aggregate": lambda m: m.cc_aggregate(t, q),
        "sbl_anchor_terms": lambda m: m.sbl_anchor_terms(feat, sem.astype(np.int64), anchors, 2, 0.65),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {name: kernels.load(name) for name in kernels.available()}
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"{'kernel':<22}" + "".join(f"{n:>12}" for n in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in _cases(np.random.default_rng(0)).items():
        times = {}
        for bname, mod in backends.items():
            fn(mod)
            times[bname] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{name:<22}" + "".join(f"{times[n] * 1e3:>10.2f}ms" for n in backends)
        if len(backends) > 1:
            row += f"{times['python'] / times['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
