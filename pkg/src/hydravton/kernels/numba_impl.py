"""Numba-jitted kernel implementations.

Products are promoted to float64 before accumulation, matching the numpy
fallback bit for bit up to summation order. Every output element is
accumulated serially in a fixed order, so results are identical between the
serial and prange variants and across thread counts; the python wrappers
pick the parallel variant only when the work amortizes its dispatch cost.
cache=True keeps recompilation off the hot path.
"""

import numpy as np
from numba import njit, prange

_PARALLEL_MACS = 4_000_000


@njit(cache=True)
def _matmul2_ser(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += np.float64(a[i, p]) * np.float64(b[p, j])
            out[i, j] = np.float32(acc)
    return out


@njit(cache=True, parallel=True)
def _matmul2_par(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n), dtype=np.float32)
    for i in prange(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += np.float64(a[i, p]) * np.float64(b[p, j])
            out[i, j] = np.float32(acc)
    return out


def matmul2(a, b):
    if a.shape[0] * a.shape[1] * b.shape[1] >= _PARALLEL_MACS:
        return _matmul2_par(a, b)
    return _matmul2_ser(a, b)


@njit(cache=True)
def _bmm_ser(a, b):
    bs, m, k = a.shape
    n = b.shape[2]
    out = np.empty((bs, m, n), dtype=np.float32)
    for s in range(bs):
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for p in range(k):
                    acc += np.float64(a[s, i, p]) * np.float64(b[s, p, j])
                out[s, i, j] = np.float32(acc)
    return out


@njit(cache=True, parallel=True)
def _bmm_par(a, b):
    bs, m, k = a.shape
    n = b.shape[2]
    out = np.empty((bs, m, n), dtype=np.float32)
    for s in prange(bs):
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for p in range(k):
                    acc += np.float64(a[s, i, p]) * np.float64(b[s, p, j])
                out[s, i, j] = np.float32(acc)
    return out


def matmul_bmm(a, b):
    if a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2] >= _PARALLEL_MACS:
        return _bmm_par(a, b)
    return _bmm_ser(a, b)


@njit(cache=True)
def _pad2d(x, pad):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


@njit(cache=True)
def _conv_fwd_ser(x, k, stride, pad):
    b, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = _pad2d(x, pad)
    out = np.empty((b, cout, oh, ow), dtype=np.float32)
    for co in range(cout):
        for n in range(b):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(kh):
                            iy = oy * stride + i
                            for j in range(kw):
                                acc += np.float64(xp[n, ci, iy, ox * stride + j]) * np.float64(
                                    k[co, ci, i, j]
                                )
                    out[n, co, oy, ox] = np.float32(acc)
    return out


@njit(cache=True, parallel=True)
def _conv_fwd_par(x, k, stride, pad):
    b, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = _pad2d(x, pad)
    out = np.empty((b, cout, oh, ow), dtype=np.float32)
    for co in prange(cout):
        for n in range(b):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(kh):
                            iy = oy * stride + i
                            for j in range(kw):
                                acc += np.float64(xp[n, ci, iy, ox * stride + j]) * np.float64(
                                    k[co, ci, i, j]
                                )
                    out[n, co, oy, ox] = np.float32(acc)
    return out


def _conv_macs(b, cout, oh, ow, cin, kh, kw):
    return b * cout * oh * ow * cin * kh * kw


def conv2d_fwd(x, k, stride, pad):
    b, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if _conv_macs(b, cout, oh, ow, cin, kh, kw) >= _PARALLEL_MACS:
        return _conv_fwd_par(x, k, stride, pad)
    return _conv_fwd_ser(x, k, stride, pad)


@njit(cache=True)
def _conv_bwd_k_ser(gy, x, stride, pad, kh, kw):
    b, cin, h, w = x.shape
    cout = gy.shape[1]
    oh, ow = gy.shape[2], gy.shape[3]
    xp = _pad2d(x, pad)
    gk = np.empty((cout, cin, kh, kw), dtype=np.float32)
    for co in range(cout):
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for n in range(b):
                        for oy in range(oh):
                            iy = oy * stride + i
                            for ox in range(ow):
                                acc += np.float64(gy[n, co, oy, ox]) * np.float64(
                                    xp[n, ci, iy, ox * stride + j]
                                )
                    gk[co, ci, i, j] = np.float32(acc)
    return gk


@njit(cache=True, parallel=True)
def _conv_bwd_k_par(gy, x, stride, pad, kh, kw):
    b, cin, h, w = x.shape
    cout = gy.shape[1]
    oh, ow = gy.shape[2], gy.shape[3]
    xp = _pad2d(x, pad)
    gk = np.empty((cout, cin, kh, kw), dtype=np.float32)
    for co in prange(cout):
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for n in range(b):
                        for oy in range(oh):
                            iy = oy * stride + i
                            for ox in range(ow):
                                acc += np.float64(gy[n, co, oy, ox]) * np.float64(
                                    xp[n, ci, iy, ox * stride + j]
                                )
                    gk[co, ci, i, j] = np.float32(acc)
    return gk


def conv2d_bwd_k(gy, x, stride, pad, kh, kw):
    b, cin = x.shape[0], x.shape[1]
    cout, oh, ow = gy.shape[1], gy.shape[2], gy.shape[3]
    if _conv_macs(b, cout, oh, ow, cin, kh, kw) >= _PARALLEL_MACS:
        return _conv_bwd_k_par(gy, x, stride, pad, kh, kw)
    return _conv_bwd_k_ser(gy, x, stride, pad, kh, kw)


@njit(cache=True)
def _conv_bwd_x_ser(gy, k, stride, pad, h, w):
    b, cout, oh, ow = gy.shape
    cin = k.shape[1]
    kh, kw = k.shape[2], k.shape[3]
    gxp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ci in range(cin):
        for n in range(b):
            for co in range(cout):
                for oy in range(oh):
                    for ox in range(ow):
                        g = np.float64(gy[n, co, oy, ox])
                        for i in range(kh):
                            iy = oy * stride + i
                            for j in range(kw):
                                gxp[n, ci, iy, ox * stride + j] += g * np.float64(k[co, ci, i, j])
    gx = np.empty((b, cin, h, w), dtype=np.float32)
    for n in range(b):
        for ci in range(cin):
            for iy in range(h):
                for ix in range(w):
                    gx[n, ci, iy, ix] = np.float32(gxp[n, ci, pad + iy, pad + ix])
    return gx


@njit(cache=True, parallel=True)
def _conv_bwd_x_par(gy, k, stride, pad, h, w):
    b, cout, oh, ow = gy.shape
    cin = k.shape[1]
    kh, kw = k.shape[2], k.shape[3]
    # each (ci) slab of the padded f64 buffer is owned by one prange lane
    gxp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ci in prange(cin):
        for n in range(b):
            for co in range(cout):
                for oy in range(oh):
                    for ox in range(ow):
                        g = np.float64(gy[n, co, oy, ox])
                        for i in range(kh):
                            iy = oy * stride + i
                            for j in range(kw):
                                gxp[n, ci, iy, ox * stride + j] += g * np.float64(k[co, ci, i, j])
    gx = np.empty((b, cin, h, w), dtype=np.float32)
    for n in range(b):
        for ci in range(cin):
            for iy in range(h):
                for ix in range(w):
                    gx[n, ci, iy, ix] = np.float32(gxp[n, ci, pad + iy, pad + ix])
    return gx


def conv2d_bwd_x(gy, k, stride, pad, h, w):
    b, cout, oh, ow = gy.shape
    cin, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    if _conv_macs(b, cout, oh, ow, cin, kh, kw) >= _PARALLEL_MACS:
        return _conv_bwd_x_par(gy, k, stride, pad, h, w)
    return _conv_bwd_x_ser(gy, k, stride, pad, h, w)
