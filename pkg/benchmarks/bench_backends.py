#!/usr/bin/env python3
"""Benchmark the JIT (numba) kernels against the pure-numpy fallback.

Runs the three conv3d primitives and trilinear sampling on tracking-sized
inputs under both backends and prints a timing table. Use --repeat to
stabilize numbers on noisy machines.
"""

import argparse
import importlib
import time

import numpy as np


def cases(rng):
    x = rng.standard_normal((1, 16, 18, 34, 34)).astype(np.float32)  # padded
    w = rng.standard_normal((16, 16, 3, 3, 3)).astype(np.float32)
    gout = rng.standard_normal((1, 16, 16, 32, 32)).astype(np.float32)
    vol = rng.standard_normal((16, 64, 64)).astype(np.float32)
    coords = (rng.random((200000, 3)) * [15, 63, 63]).astype(np.float64)
    stride = (1, 1, 1)
    return [
        ("conv3d_fwd", lambda k: k.conv3d_fwd(x, w, stride)),
        ("conv3d_bwd_w", lambda k: k.conv3d_bwd_w(x, gout, w.shape, stride)),
        ("conv3d_bwd_x", lambda k: k.conv3d_bwd_x(w, gout, x.shape, stride)),
        ("sample_trilinear", lambda k: k.sample_trilinear(vol, coords)),
    ]


def bench(kernels, fn, repeat):
    fn(kernels)  # warm up (JIT compile / allocator)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(kernels)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = {"numpy": importlib.import_module("voltrack.kernels_numpy")}
    try:
        backends["numba"] = importlib.import_module("voltrack.kernels_numba")
    except ImportError:
        print("numba unavailable; benchmarking numpy only")

    rng = np.random.default_rng(0)
    work = cases(rng)
    print(f"{'kernel':<18}" + "".join(f"{name:>12}" for name in backends))
    for label, fn in work:
        row = [f"{bench(k, fn, args.repeat) * 1e3:9.2f} ms"
               for k in backends.values()]
        print(f"{label:<18}" + "".join(f"{c:>12}" for c in row))

    if len(backends) == 2:
        np_k, nb_k = backends["numpy"], backends["numba"]
        for label, fn in work:
            a, b = np.asarray(fn(np_k)), np.asarray(fn(nb_k))
            diff = float(np.max(np.abs(a - b)))
            scale = max(float(np.max(np.abs(a))), 1e-12)
            print(f"agreement {label:<18} max rel diff {diff / scale:.2e}")


if __name__ == "__main__":
    main()
