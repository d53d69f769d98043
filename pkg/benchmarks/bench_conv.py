"""Benchmark the two convolution kernel lanes.

Compares the compiled (numba) and pure-numpy implementations of the
im2col/col2im pair driving conv2d, on forward and forward+backward at the
training shapes. Run:

    python3 benchmarks/bench_conv.py [--repeats N]

The lane used by the package at runtime is chosen by the
WSRPN_DISABLE_NUMBA environment variable; this script imports both lanes
directly and times them side by side in one process.
"""

import argparse
import time

import numpy as np

from wsrpn.autodiff import conv2d, set_default_dtype, tensor
from wsrpn.autodiff.kernels import numpy_kernels

try:
    from wsrpn.autodiff.kernels import numba_kernels
except ImportError:
    numba_kernels = None

SHAPES = [
    # (label, batch, cin, side, cout, stride)
    ("stage0 112px", 8, 1, 112, 16, 2),
    ("stage1 56px", 8, 16, 56, 32, 2),
    ("stage2 28px", 8, 32, 28, 64, 2),
    ("stage3 14px", 8, 64, 14, 64, 2),
]


def run_conv(lane, x, w, repeats):
    """Forward+backward wall time per iteration using one kernel lane."""
    import wsrpn.autodiff.kernels as kernels_mod

    saved = kernels_mod.im2col, kernels_mod.col2im
    kernels_mod.im2col, kernels_mod.col2im = lane.im2col, lane.col2im
    try:
        xt = tensor(x, requires_grad=True)
        wt = tensor(w, requires_grad=True)
        out = conv2d(xt, wt, stride=2, padding=1)
        out.sum().backward()  # warm up (and JIT-compile on the numba lane)
        best = float("inf")
        for _ in range(repeats):
            xt = tensor(x, requires_grad=True)
            wt = tensor(w, requires_grad=True)
            t0 = time.perf_counter()
            out = conv2d(xt, wt, stride=2, padding=1)
            out.sum().backward()
            best = min(best, time.perf_counter() - t0)
        return best
    finally:
        kernels_mod.im2col, kernels_mod.col2im = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    set_default_dtype(np.float32)
    rng = np.random.default_rng(0)

    print(f"{'shape':<14} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for label, n, cin, side, cout, stride in SHAPES:
        x = rng.standard_normal((n, cin, side, side)).astype(np.float32)
        w = rng.standard_normal((cout, cin, 3, 3)).astype(np.float32) * 0.1
        t_np = run_conv(numpy_kernels, x, w, args.repeats)
        if numba_kernels is None:
            print(f"{label:<14} {t_np * 1e3:>10.2f}ms {'n/a':>12} {'n/a':>9}")
            continue
        t_nb = run_conv(numba_kernels, x, w, args.repeats)
        print(f"{label:<14} {t_np * 1e3:>10.2f}ms {t_nb * 1e3:>10.2f}ms "
              f"{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
