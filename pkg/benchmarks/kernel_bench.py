#!/usr/bin/env python3
"""Times every hot kernel under the numba and numpy backends.

Usage: python benchmarks/kernel_bench.py [--size 64] [--repeats 5]
The first numba call per kernel triggers JIT compilation, so each kernel is
warmed once before timing.
"""

import argparse
import time

import numpy as np

from volreg import kernels
from volreg.models import FfdGrid


def _timeit(fn, repeats):
    fn()  # warm-up (JIT compile on the numba side)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(n):
    rs = np.random.RandomState(0)
    vol = (rs.rand(n, n, n) * 900 + 100).astype(np.float32)
    disp = (rs.rand(n, n, n, 3) - 0.5) * 3.0
    src = rs.rand(n, n, n, 3)
    a = rs.rand(n, n, n)
    b = rs.rand(n, n, n)
    grid = FfdGrid((n, n, n), 8.0)
    grid.coeffs[:] = rs.randn(*grid.coeffs.shape)
    tables = grid.tables()
    return {
        "warp_scalar": lambda: kernels.warp_scalar(vol, disp),
        "warp_scalar_with_grad": lambda: kernels.warp_scalar_with_grad(vol, disp),
        "sample_field": lambda: kernels.sample_field(src, disp),
        "jacobian_det": lambda: kernels.jacobian_det(disp),
        "window_stats(r=4)": lambda: kernels.window_stats(a, b, 4),
        "box_sum(r=4)": lambda: kernels.box_sum(a, 4),
        "joint_hist(64)": lambda: kernels.joint_hist(
            vol, vol * 1.3 + 5, 64, 100.0, 1000.0, 135.0, 1305.0),
        "ffd_field": lambda: kernels.ffd_field(grid.coeffs, *tables),
        "ffd_warp_box(full)": lambda: kernels.ffd_warp_box(
            vol, grid.coeffs, *tables, (0, 0, 0), (n, n, n)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = kernels.available_backends()
    cases = build_cases(args.size)
    results = {}
    for backend in backends:
        kernels.use_backend(backend)
        results[backend] = {name: _timeit(fn, args.repeats)
                            for name, fn in cases.items()}

    width = max(len(n) for n in cases)
    header = f"{'kernel'.ljust(width)}  " + "  ".join(f"{b:>10}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8}"
    print(f"volume {args.size}^3, best of {args.repeats}")
    print(header)
    print("-" * len(header))
    for name in cases:
        row = name.ljust(width) + "  "
        row += "  ".join(f"{results[b][name] * 1e3:9.2f}ms" for b in backends)
        if len(backends) == 2:
            numba_t = results["numba"][name]
            numpy_t = results["numpy"][name]
            row += f"  {numpy_t / numba_t:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
