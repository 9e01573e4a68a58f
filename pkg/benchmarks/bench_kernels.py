"""Timing comparison of the compiled and numpy kernel backends.

Run as ``python3 benchmarks/bench_kernels.py``.  Forward and backward
convolution plus max-pooling are timed on shapes spanning the sizes the
training loop actually produces.  Neither backend wins everywhere: the
numpy path rides BLAS through a tensordot contraction, which pulls ahead
on large channel counts, while the compiled loops avoid materializing
column buffers and win on small maps.
"""

import time

import numpy as np

from clsnn import kernels

CONV_CASES = [
    # (batch, c_in, c_out, hw, k) roughly: tiny probe, training shape, wide
    (8, 1, 8, 8, 3),
    (32, 1, 32, 28, 3),
    (32, 32, 32, 14, 3),
    (8, 64, 64, 14, 3),
]

POOL_CASES = [
    (32, 32, 28, 2),
    (64, 32, 14, 2),
]


def _best_of(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _time_backend(name, fn):
    previous = kernels.use(name)
    try:
        fn()  # warm up
        return _best_of(fn)
    finally:
        kernels.use(previous)


def bench_conv(batch, c_in, c_out, hw, k):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, c_in, hw, hw))
    w = rng.normal(size=(c_out, c_in, k, k))
    y = kernels.conv2d_forward(x, w, 1, k // 2)
    gy = rng.normal(size=y.shape)
    rows = []
    for op, fn in (("conv fwd", lambda: kernels.conv2d_forward(x, w, 1, k // 2)),
                   ("conv bwd", lambda: kernels.conv2d_backward(x, w, gy, 1, k // 2))):
        times = {name: _time_backend(name, fn) for name in kernels.available()}
        rows.append((f"{op} {batch}x{c_in}->{c_out} {hw}x{hw}", times))
    return rows


def bench_pool(batch, channels, hw, k):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(batch, channels, hw, hw))
    _, idx = kernels.maxpool2d_forward(x, k)
    gy = rng.normal(size=(batch, channels, hw // k, hw // k))
    rows = []
    for op, fn in (("pool fwd", lambda: kernels.maxpool2d_forward(x, k)),
                   ("pool bwd", lambda: kernels.maxpool2d_backward(gy, idx, x.shape, k))):
        times = {name: _time_backend(name, fn) for name in kernels.available()}
        rows.append((f"{op} {batch}x{channels} {hw}x{hw}", times))
    return rows


def main():
    names = kernels.available()
    print(f"backends: {', '.join(names)} (default: {kernels.backend_name()})")
    if len(names) < 2:
        print("compiled backend unavailable; nothing to compare")
    header = f"{'case':38s}" + "".join(f"{n:>12s}" for n in names) + f"{'ratio':>9s}"
    print(header)
    print("-" * len(header))
    rows = []
    for case in CONV_CASES:
        rows.extend(bench_conv(*case))
    for case in POOL_CASES:
        rows.extend(bench_pool(*case))
    for label, times in rows:
        cells = "".join(f"{times[n] * 1e3:10.2f}ms" for n in names)
        ratio = times.get("numpy", float("nan")) / times.get("compiled", float("nan"))
        print(f"{label:38s}{cells}{ratio:8.2f}x")
    print("\nratio > 1 means the compiled backend is faster for that case")


if __name__ == "__main__":
    main()
