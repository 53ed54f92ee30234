"""Hot numeric kernels: a pure-numpy (BLAS-backed) path and a numba-jitted
path, selected once at import from the HYDRAVTON_BACKEND environment
variable ("numpy", "numba", or "auto").

Both paths accumulate in float64 and emit float32 and agree elementwise to
within one float32 ulp. The default is the numpy path: at the toy sizes
this package runs, float64 BLAS beats the scalar-deterministic njit loops
by a wide margin (see benchmarks/bench_kernels.py for the side-by-side).
The numba path keeps a fixed summation order per output element, so it is
the bit-reproducible-across-platforms option.
"""

import os

from . import numpy_impl

_requested = os.environ.get("HYDRAVTON_BACKEND", "auto").lower()

if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"HYDRAVTON_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numba":
    from . import numba_impl as _impl

    _backend = "numba"
else:
    _impl = numpy_impl
    _backend = "numpy"

matmul2 = _impl.matmul2
matmul_bmm = _impl.matmul_bmm
conv2d_fwd = _impl.conv2d_fwd
conv2d_bwd_x = _impl.conv2d_bwd_x
conv2d_bwd_k = _impl.conv2d_bwd_k


def active_backend():
    """Name of the kernel backend selected at import time."""
    return _backend


def warmup():
    """Exercise every kernel once on tiny inputs (triggers JIT compilation
    on the numba backend)."""
    import numpy as np

    x = np.ones((1, 2, 4, 4), dtype=np.float32)
    k = np.ones((3, 2, 3, 3), dtype=np.float32)
    y = conv2d_fwd(x, k, 1, 1)
    conv2d_bwd_x(y, k, 1, 1, 4, 4)
    conv2d_bwd_k(y, x, 1, 1, 3, 3)
    a = np.ones((2, 3), dtype=np.float32)
    matmul2(a, a.T.copy())
    matmul_bmm(a[None], a.T.copy()[None])


__all__ = [
    "matmul2",
    "matmul_bmm",
    "conv2d_fwd",
    "conv2d_bwd_x",
    "conv2d_bwd_k",
    "active_backend",
    "warmup",
]
