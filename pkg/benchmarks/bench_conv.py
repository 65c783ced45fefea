#!/usr/bin/env python3
"""Times the 3x3 convolution kernels on both backends over shapes matching
the toy backbone's workload, and reports effective GFLOP/s.

Run: python benchmarks/bench_conv.py [--repeats N] [--dtype float32|float64]
"""

import argparse
import time

import numpy as np

from biqa import kernels
from biqa.kernels import _conv_numpy

try:
    from biqa.kernels import _conv_ext
except ImportError:
    _conv_ext = None

# (input shape, output channels): the three stages of a 64px toy backbone
SHAPES = [
    ((10, 64, 64, 3), 16),
    ((10, 64, 64, 16), 16),
    ((10, 32, 32, 16), 32),
    ((10, 32, 32, 32), 32),
    ((10, 16, 16, 32), 64),
    ((10, 16, 16, 64), 64),
]


def macs(shape, cout):
    n, h, w, cin = shape
    return n * h * w * cout * cin * 9


def bench(impl, x, k, b, g, repeats):
    fwd = bwd = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        impl.conv2d_forward(x, k, b)
        fwd = min(fwd, time.perf_counter() - t0)
        t0 = time.perf_counter()
        impl.conv2d_backward(x, k, g)
        bwd = min(bwd, time.perf_counter() - t0)
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args()
    dtype = np.dtype(args.dtype)

    backends = [("numpy", _conv_numpy)]
    if _conv_ext is not None:
        backends.append(("cython", _conv_ext))
    else:
        print("compiled extension not available; timing the fallback only")
    print(f"import-time selected backend: {kernels.BACKEND}")
    print(f"{'input shape':>20s} {'cout':>5s} {'backend':>8s} "
          f"{'fwd ms':>9s} {'gflops':>7s} {'bwd ms':>9s} {'gflops':>7s}")

    rng = np.random.default_rng(0)
    for shape, cout in SHAPES:
        x = rng.standard_normal(shape).astype(dtype)
        k = rng.standard_normal((3, 3, shape[3], cout)).astype(dtype)
        b = rng.standard_normal(cout).astype(dtype)
        g = np.ascontiguousarray(rng.standard_normal(shape[:3] + (cout,)).astype(dtype))
        flop = 2 * macs(shape, cout)
        for name, impl in backends:
            fwd, bwd = bench(impl, x, k, b, g, args.repeats)
            print(f"{str(shape):>20s} {cout:>5d} {name:>8s} "
                  f"{fwd * 1e3:9.2f} {flop / fwd / 1e9:7.2f} "
                  f"{bwd * 1e3:9.2f} {3 * flop / bwd / 1e9:7.2f}")


if __name__ == "__main__":
    main()
