"""Differentiable operations over Tensor.

Reductions (matmul, conv, norm moments, sum) accumulate in float64 and store
float32, which keeps results deterministic and drift-bounded. Layout is
row-major and ops copy; there are no strided views.
"""

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, no_grad


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(g, shape):
    """Sum g down to `shape` after a broadcast op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), vjp, "add")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(out, (a, b), vjp, "mul")


def reciprocal(x):
    x = _wrap(x)
    out = 1.0 / x.data

    def vjp(g):
        return (-g * out * out,)

    return Tensor.from_op(out, (x,), vjp, "reciprocal")


def power(x, p):
    x = _wrap(x)
    p = float(p)
    out = x.data**p

    def vjp(g):
        return (g * p * x.data ** (p - 1.0),)

    return Tensor.from_op(out, (x,), vjp, "power")


def exp(x):
    x = _wrap(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return Tensor.from_op(out, (x,), vjp, "exp")


def log(x):
    x = _wrap(x)
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return Tensor.from_op(out, (x,), vjp, "log")


def sigmoid(x):
    x = _wrap(x)
    out = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
    out32 = out.astype(np.float32)

    def vjp(g):
        return (g * out32 * (1.0 - out32),)

    return Tensor.from_op(out32, (x,), vjp, "sigmoid")


def silu(x):
    x = _wrap(x)
    s = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
    out = (x.data * s).astype(np.float32)

    def vjp(g):
        d = s * (1.0 + x.data * (1.0 - s))
        return ((g * d).astype(np.float32),)

    return Tensor.from_op(out, (x,), vjp, "silu")


# -- reductions --------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(np.float32),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, x.shape).astype(np.float32),)

    return Tensor.from_op(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ------------------------------------------------


def reshape(x, shape):
    x = _wrap(x)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(out, (x,), vjp, "reshape")


def transpose(x, perm):
    x = _wrap(x)
    perm = tuple(perm)
    out = np.ascontiguousarray(x.data.transpose(perm))
    inv = tuple(np.argsort(perm))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor.from_op(out, (x,), vjp, "transpose")


def getitem(x, key):
    x = _wrap(x)
    out = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return Tensor.from_op(out, (x,), vjp, "getitem")


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tuple(tensors), vjp, "concat")


def take_rows(table, ids):
    """Gather rows of a 2-D table by integer index (embedding lookup)."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(f"row index out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor.from_op(out, (table,), vjp, "take_rows")


def upsample_nearest2(x):
    """Nearest-neighbor 2x spatial upsample of (b,c,h,w)."""
    x = _wrap(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5), dtype=np.float64).astype(np.float32),)

    return Tensor.from_op(out, (x,), vjp, "upsample_nearest2")


# -- linear algebra ----------------------------------------------------


def _mm2(a, b):
    return kernels.matmul2(np.ascontiguousarray(a), np.ascontiguousarray(b))


def _bmm(a, b):
    return kernels.matmul_bmm(np.ascontiguousarray(a), np.ascontiguousarray(b))


def matmul(a, b):
    """2-D or batched 3-D matrix product; batch dims agree or broadcast from 1."""
    a, b = _wrap(a), _wrap(b)
    need_a, need_b = a.requires_grad, b.requires_grad
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims disagree: {list(a.shape)} x {list(b.shape)}")
        out = _mm2(a.data, b.data)

        def vjp(g):
            ga = _mm2(g, b.data.T) if need_a else None
            gb = _mm2(a.data.T, g) if need_b else None
            return ga, gb

        return Tensor.from_op(out, (a, b), vjp, "matmul")

    if a.ndim == 3 and b.ndim == 2:
        if a.shape[2] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims disagree: {list(a.shape)} x {list(b.shape)}")
        bs, m, k = a.shape
        out = _mm2(a.data.reshape(bs * m, k), b.data).reshape(bs, m, -1)

        def vjp(g):
            g2 = g.reshape(bs * m, -1)
            ga = _mm2(g2, b.data.T).reshape(a.shape) if need_a else None
            gb = _mm2(a.data.reshape(bs * m, k).T, g2) if need_b else None
            return ga, gb

        return Tensor.from_op(out, (a, b), vjp, "matmul")

    if a.ndim == 3 and b.ndim == 3:
        if a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: inner dims disagree: {list(a.shape)} x {list(b.shape)}")
        if a.shape[0] != b.shape[0] and a.shape[0] != 1 and b.shape[0] != 1:
            raise ShapeError(f"matmul: batch dims disagree: {list(a.shape)} x {list(b.shape)}")
        bs = max(a.shape[0], b.shape[0])
        ad = np.broadcast_to(a.data, (bs,) + a.shape[1:])
        bd = np.broadcast_to(b.data, (bs,) + b.shape[1:])
        out = _bmm(ad, bd)

        def vjp(g):
            ga = gb = None
            if need_a:
                ga = _bmm(g, bd.transpose(0, 2, 1))
                if a.shape[0] == 1 and bs > 1:
                    ga = ga.sum(axis=0, keepdims=True, dtype=np.float64).astype(np.float32)
            if need_b:
                gb = _bmm(ad.transpose(0, 2, 1), g)
                if b.shape[0] == 1 and bs > 1:
                    gb = gb.sum(axis=0, keepdims=True, dtype=np.float64).astype(np.float32)
            return ga, gb

        return Tensor.from_op(out, (a, b), vjp, "matmul")

    raise ShapeError(f"matmul: unsupported ranks: {list(a.shape)} x {list(b.shape)}")


def softmax(x, axis):
    x = _wrap(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {list(x.shape)}")
    xd = x.data.astype(np.float64)
    xd = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(xd)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)

    def vjp(g):
        gy = g.astype(np.float64) * y
        return ((gy - y * gy.sum(axis=axis, keepdims=True)).astype(np.float32),)

    return Tensor.from_op(y, (x,), vjp, "softmax")


def conv2d(x, k, stride=1, padding=0):
    """2-D convolution (cross-correlation) over (b,cin,h,w) with (cout,cin,kh,kw)."""
    x, k = _wrap(x), _wrap(k)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D operands, got {list(x.shape)} and {list(k.shape)}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch: input {list(x.shape)} vs kernel {list(k.shape)}")
    stride, padding = int(stride), int(padding)
    h, w = x.shape[2], x.shape[3]
    kh, kw = k.shape[2], k.shape[3]
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: zero-size output for input {list(x.shape)}, kernel {list(k.shape)}, "
            f"stride {stride}, padding {padding}"
        )
    out = kernels.conv2d_fwd(x.data, k.data, stride, padding)
    need_x, need_k = x.requires_grad, k.requires_grad

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_bwd_x(g, k.data, stride, padding, h, w) if need_x else None
        gk = kernels.conv2d_bwd_k(g, x.data, stride, padding, kh, kw) if need_k else None
        return gx, gk

    return Tensor.from_op(out, (x, k), vjp, "conv2d")


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Normalize (b,c,*) to zero mean / unit variance per channel group, then affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim < 2:
        raise ShapeError(f"group_norm: need at least 2-D input, got {list(x.shape)}")
    b, c = x.shape[0], x.shape[1]
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine params must have shape ({c},)")
    xr = x.data.reshape(b, groups, -1).astype(np.float64)
    mu = xr.mean(axis=2, keepdims=True)
    var = xr.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    cshape = (1, c) + (1,) * (x.ndim - 2)
    xhat64 = ((xr - mu) * inv).reshape(x.shape)
    # normalize + affine stay in float64; a single rounding at the end
    out = (
        xhat64 * gamma.data.astype(np.float64).reshape(cshape)
        + beta.data.astype(np.float64).reshape(cshape)
    ).astype(np.float32)
    xhat = xhat64.astype(np.float32)
    n = xr.shape[2]

    need_x = x.requires_grad

    def vjp(g):
        gx = None
        if need_x:
            gr = (g * gamma.data.reshape(cshape)).reshape(b, groups, n).astype(np.float64)
            xh = xhat.reshape(b, groups, n).astype(np.float64)
            gx = inv * (
                gr - gr.mean(axis=2, keepdims=True) - xh * (gr * xh).mean(axis=2, keepdims=True)
            )
            gx = gx.astype(np.float32).reshape(x.shape)
        red = tuple(i for i in range(x.ndim) if i != 1)
        ggamma = (g.astype(np.float64) * xhat).sum(axis=red)
        gbeta = g.astype(np.float64).sum(axis=red)
        return gx, ggamma.astype(np.float32), gbeta.astype(np.float32)

    return Tensor.from_op(out, (x, gamma, beta), vjp, "group_norm")


# -- verification ------------------------------------------------------


def grad_check(f, x, h=1e-3):
    """Max relative error between analytic and central-difference gradients.

    f must map a Tensor to a scalar Tensor and be deterministic. The
    perturbation is snapped to the nearest representable float32 step so the
    divided difference uses the exact step that was applied.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError(f"grad_check: h={h} outside [1e-4, 1e-2]")
    xg = Tensor(x.data.copy(), requires_grad=True)
    y = f(xg)
    if y.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {list(y.shape)}")
    y.backward()
    analytic = np.zeros_like(x.data) if xg.grad is None else xg.grad

    flat = x.data.ravel()
    worst = 0.0
    h32 = np.float32(h)
    for i in range(flat.size):
        base = flat[i]
        up = np.float32(base + h32)
        dn = np.float32(base - h32)
        step = float(up) - float(dn)
        pert = x.data.copy()
        with no_grad():
            pert.ravel()[i] = up
            f_up = f(Tensor(pert)).item()
            pert.ravel()[i] = dn
            f_dn = f(Tensor(pert)).item()
        fd = (f_up - f_dn) / step
        a = float(analytic.ravel()[i])
        err = abs(a - fd) / (abs(a) + abs(fd) + 1e-8)
        worst = max(worst, err)
    return worst
