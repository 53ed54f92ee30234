"""Side-by-side timing of the numpy and numba kernel backends on the shapes
the model actually runs, plus a max-|diff| agreement check.

Run: python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from hydravton.kernels import numba_impl, numpy_impl

CONV_CASES = [
    # (label, x shape, k shape, stride, pad)
    ("conv_in 9ch latent", (4, 9, 8, 6), (64, 9, 3, 3), 1, 1),
    ("res conv 64ch", (4, 64, 8, 6), (64, 64, 3, 3), 1, 1),
    ("res conv 128ch", (4, 128, 4, 3), (128, 128, 3, 3), 1, 1),
    ("pose conv0 128x96", (4, 3, 128, 96), (16, 3, 4, 4), 2, 1),
    ("pose conv3 16x12", (4, 64, 16, 12), (128, 64, 4, 4), 2, 1),
]

MM_CASES = [
    ("qkv proj l=48", (192, 64), (64, 64)),
    ("qkv proj l=12", (48, 128), (128, 128)),
]

BMM_CASES = [
    ("attn scores 4 heads", (16, 48, 16), (16, 16, 48)),
]


def _time(fn, repeat):
    fn()  # warm (JIT compile on the numba side)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    rows = []
    for label, xs, ks, stride, pad in CONV_CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        k = rng.standard_normal(ks).astype(np.float32)
        a = numpy_impl.conv2d_fwd(x, k, stride, pad)
        b = numba_impl.conv2d_fwd(x, k, stride, pad)
        tn = _time(lambda: numpy_impl.conv2d_fwd(x, k, stride, pad), args.repeat)
        tj = _time(lambda: numba_impl.conv2d_fwd(x, k, stride, pad), args.repeat)
        rows.append((f"conv2d_fwd {label}", tn, tj, float(np.abs(a - b).max())))
        gy = rng.standard_normal(a.shape).astype(np.float32)
        tn = _time(lambda: numpy_impl.conv2d_bwd_x(gy, k, stride, pad, xs[2], xs[3]), args.repeat)
        tj = _time(lambda: numba_impl.conv2d_bwd_x(gy, k, stride, pad, xs[2], xs[3]), args.repeat)
        d = float(
            np.abs(
                numpy_impl.conv2d_bwd_x(gy, k, stride, pad, xs[2], xs[3])
                - numba_impl.conv2d_bwd_x(gy, k, stride, pad, xs[2], xs[3])
            ).max()
        )
        rows.append((f"conv2d_bwd_x {label}", tn, tj, d))

    for label, xs, ks in MM_CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        k = rng.standard_normal(ks).astype(np.float32)
        a, b = numpy_impl.matmul2(x, k), numba_impl.matmul2(x, k)
        tn = _time(lambda: numpy_impl.matmul2(x, k), args.repeat)
        tj = _time(lambda: numba_impl.matmul2(x, k), args.repeat)
        rows.append((f"matmul2 {label}", tn, tj, float(np.abs(a - b).max())))

    for label, xs, ks in BMM_CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        k = rng.standard_normal(ks).astype(np.float32)
        a, b = numpy_impl.matmul_bmm(x, k), numba_impl.matmul_bmm(x, k)
        tn = _time(lambda: numpy_impl.matmul_bmm(x, k), args.repeat)
        tj = _time(lambda: numba_impl.matmul_bmm(x, k), args.repeat)
        rows.append((f"matmul_bmm {label}", tn, tj, float(np.abs(a - b).max())))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'ratio':>6}  {'max|diff|':>10}")
    for label, tn, tj, d in rows:
        print(f"{label:<{width}}  {tn * 1e3:>8.3f}ms  {tj * 1e3:>8.3f}ms  {tn / tj:>6.2f}  {d:>10.2e}")
    print("\nratio > 1 means the numba path is faster on this machine.")


if __name__ == "__main__":
    main()
