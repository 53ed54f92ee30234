"""Pure-numpy kernel implementations.

Fallback path for environments without a working numba install (or with
HYDRAVTON_BACKEND=numpy). Accumulation happens in float64 so results agree
with the numba loops to within one float32 ulp.
"""

import numpy as np


def matmul2(a, b):
    """(m,k) @ (k,n) -> (m,n), float32 out."""
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def matmul_bmm(a, b):
    """Batched (B,m,k) @ (B,k,n) -> (B,m,n), float32 out."""
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def conv2d_fwd(x, k, stride, pad):
    kh, kw = k.shape[2], k.shape[3]
    cols = _im2col(x, kh, kw, stride, pad)
    b, c, _, _, oh, ow = cols.shape
    cout = k.shape[0]
    # BLAS-shaped: (b*oh*ow, c*kh*kw) @ (c*kh*kw, cout)
    mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)
    kmat = k.astype(np.float64).reshape(cout, c * kh * kw).T
    y = (mat @ kmat).reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y.astype(np.float32))


def conv2d_bwd_k(gy, x, stride, pad, kh, kw):
    cols = _im2col(x, kh, kw, stride, pad)
    b, c, _, _, oh, ow = cols.shape
    cout = gy.shape[1]
    mat = cols.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, b * oh * ow)
    gmat = gy.astype(np.float64).transpose(1, 0, 2, 3).reshape(cout, b * oh * ow)
    gk = (gmat @ mat.T).reshape(cout, c, kh, kw)
    return gk.astype(np.float32)


def conv2d_bwd_x(gy, k, stride, pad, h, w):
    b = gy.shape[0]
    cout, cin = k.shape[0], k.shape[1]
    kh, kw = k.shape[2], k.shape[3]
    oh, ow = gy.shape[2], gy.shape[3]
    gmat = gy.astype(np.float64).transpose(0, 2, 3, 1).reshape(b * oh * ow, cout)
    kmat = k.astype(np.float64).reshape(cout, cin * kh * kw)
    gcols = (gmat @ kmat).reshape(b, oh, ow, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
    gx = gxp[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(gx.astype(np.float32))
