"""Time vol2col/col2vol under the Cython and NumPy backends, plus conv3d paths.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes mirror the generator at 9x64x64 input: the 3x3x3 stride-2 downsampling
conv, a residual-trunk conv, and the 7x7x7 head.
"""
import argparse
import time

import numpy as np

from cyclegan3d import functional as fn
from cyclegan3d import kernels
from cyclegan3d.tensor import Tensor

CASES = [
    # name, (c, d, h, w) padded input, kernel, stride
    ("down 3x3x3/s2 c=64", (64, 11, 66, 66), (3, 3, 3), (1, 2, 2)),
    ("trunk 3x3x3 c=256", (256, 11, 10, 10), (3, 3, 3), (1, 1, 1)),
    ("head 7x7x7 c=8", (8, 15, 70, 70), (7, 7, 7), (1, 1, 1)),
]


def best_of(f, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        f()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    have_cython = kernels.cython_available()
    print(f"default backend: {kernels.BACKEND}; cython extension available: {have_cython}")
    print(f"{'case':22s} {'kernel':8s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    rng = np.random.default_rng(0)
    for name, shape, k, s in CASES:
        x = rng.standard_normal((1,) + shape).astype(np.float32)
        out = tuple((n - kk) // ss + 1 for n, kk, ss in zip(shape[1:], k, s))
        cols = kernels.vol2col(x, k, s, out, impl="python")
        row = {}
        for impl in ("python", "cython") if have_cython else ("python",):
            row[("vol2col", impl)] = best_of(lambda: kernels.vol2col(x, k, s, out, impl=impl), args.repeat)
            row[("col2vol", impl)] = best_of(lambda: kernels.col2vol(cols, x.shape, k, s, out, impl=impl),
                                             args.repeat)
        for op in ("vol2col", "col2vol"):
            py = row[(op, "python")] * 1e3
            cy = row.get((op, "cython"))
            cy_txt = f"{cy * 1e3:10.2f}" if cy else f"{'n/a':>10s}"
            sp = f"{py / (cy * 1e3):7.2f}x" if cy else f"{'':>8s}"
            print(f"{name:22s} {op:8s} {py:10.2f} {cy_txt} {sp}")

    print()
    print("conv3d forward+backward on the 7x7x7 head (c_in 8 -> c_out 3, 9x64x64 output):")
    x = Tensor(rng.standard_normal((1, 8, 9, 64, 64)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.normal(0, 0.02, (3, 8, 7, 7, 7)).astype(np.float32), requires_grad=True)
    for method in ("im2col", "fft"):
        def run():
            y = fn.conv3d(x, w, padding=3, pad_mode="reflect", method=method)
            y.sum().backward()
        print(f"  {method:7s} {best_of(run, max(1, args.repeat // 2)) * 1e3:9.1f} ms")


if __name__ == "__main__":
    main()
