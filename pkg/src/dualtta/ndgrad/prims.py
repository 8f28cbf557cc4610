"""Primitive operations: forward kernels and their exact backward rules.

Every backward rule receives the upstream cotangent `g` (shaped like the
output), the saved context, the input arrays, the attrs, and a mask of
which inputs need a cotangent. It returns one entry per input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ShapeError

LOG_FLOOR = 1e-12
BN_EPS = 1e-5


@dataclass(frozen=True)
class Primitive:
    arity: tuple
    check: Callable
    forward: Callable
    backward: Callable


def _no_check(op, xs, attrs):
    pass


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, xs, attrs):
    try:
        np.broadcast_shapes(xs[0].shape, xs[1].shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {xs[0].shape} and {xs[1].shape} do not broadcast") from None


def _need_4d(op, x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{op}: {what} must be (B,C,H,W), got {x.shape}")


# -- element-wise -----------------------------------------------------------

def _add_bwd(g, ctx, xs, attrs, needs):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


def _sub_bwd(g, ctx, xs, attrs, needs):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


def _mul_bwd(g, ctx, xs, attrs, needs):
    a, b = xs
    return [
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    ]


def _scale_fwd(xs, attrs):
    return xs[0] * float(attrs["factor"]), None


def _relu_fwd(xs, attrs):
    return np.maximum(xs[0], 0.0), None


def _relu_bwd(g, ctx, xs, attrs, needs):
    return [g * (xs[0] > 0)]


def _exp_fwd(xs, attrs):
    out = np.exp(xs[0])
    return out, out


def _log_clamped_fwd(xs, attrs):
    return np.log(np.maximum(xs[0], LOG_FLOOR)), None


def _log_clamped_bwd(g, ctx, xs, attrs, needs):
    x = xs[0]
    live = x > LOG_FLOOR
    return [np.where(live, g / np.where(live, x, 1.0), 0.0)]


# -- linear algebra -------------------------------------------------------

def _matmul_check(op, xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")


def _matmul_bwd(g, ctx, xs, attrs, needs):
    a, b = xs
    return [g @ b.T if needs[0] else None, a.T @ g if needs[1] else None]


def _conv_check(op, xs, attrs):
    x, w = xs[0], xs[1]
    _need_4d(op, x)
    _need_4d(op, w, "kernel")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    p = int(attrs.get("padding", 0))
    if x.shape[2] + 2 * p < w.shape[2] or x.shape[3] + 2 * p < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input")
    if len(xs) == 3 and xs[2].shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {xs[2].shape} != ({w.shape[0]},)")


def _conv_fwd(xs, attrs):
    x, w = xs[0], xs[1]
    p = int(attrs.get("padding", 0))
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    kh, kw = w.shape[2:]
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # cols: (B, C, Ho, Wo, kh, kw)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    if len(xs) == 3:
        out = out + xs[2]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def _conv_bwd(g, cols, xs, attrs, needs):
    x, w = xs[0], xs[1]
    p = int(attrs.get("padding", 0))
    kh, kw = w.shape[2:]
    Ho, Wo = g.shape[2:]
    gx = gw = gb = None
    if needs[1]:
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
    if len(xs) == 3 and needs[2]:
        gb = g.sum(axis=(0, 2, 3))
    if needs[0]:
        gxp = np.zeros((x.shape[0], x.shape[1], x.shape[2] + 2 * p, x.shape[3] + 2 * p))
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # (B,Ho,Wo,C)
                gxp[:, :, i:i + Ho, j:j + Wo] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
    return [gx, gw] + ([gb] if len(xs) == 3 else [])


# -- pooling ----------------------------------------------------------------

def _pool_check(op, xs, attrs):
    x = xs[0]
    _need_4d(op, x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avg_pool2d: spatial size {x.shape[2:]} not divisible by 2")


def _pool_fwd(xs, attrs):
    x = xs[0]
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5)), None


def _pool_bwd(g, ctx, xs, attrs, needs):
    return [np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25]


def _gap_check(op, xs, attrs):
    _need_4d(op, xs[0])


def _gap_fwd(xs, attrs):
    return xs[0].mean(axis=(2, 3)), None


def _gap_bwd(g, ctx, xs, attrs, needs):
    B, C, H, W = xs[0].shape
    return [np.broadcast_to(g[:, :, None, None] / (H * W), xs[0].shape).copy()]


# -- normalization ----------------------------------------------------------

def _affine_check(op, xs, attrs):
    x, gamma, beta = xs
    _need_4d(op, x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"channel_affine: gamma/beta must be ({C},), got {gamma.shape}/{beta.shape}")


def _affine_fwd(xs, attrs):
    x, gamma, beta = xs
    return x * gamma[None, :, None, None] + beta[None, :, None, None], None


def _affine_bwd(g, ctx, xs, attrs, needs):
    x, gamma, _ = xs
    return [
        g * gamma[None, :, None, None] if needs[0] else None,
        (g * x).sum(axis=(0, 2, 3)) if needs[1] else None,
        g.sum(axis=(0, 2, 3)) if needs[2] else None,
    ]


def _bn_check(op, xs, attrs):
    _need_4d(op, xs[0])
    C = xs[0].shape[1]
    for key in ("mean", "var"):
        if key in attrs and np.shape(attrs[key]) != (C,):
            raise ShapeError(f"batch_normalize: fixed {key} must be ({C},)")


def _bn_fwd(xs, attrs):
    x = xs[0]
    eps = float(attrs.get("eps", BN_EPS))
    fixed = "mean" in attrs
    if fixed:
        mu = np.asarray(attrs["mean"], dtype=np.float64)
        var = np.asarray(attrs["var"], dtype=np.float64)
    else:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    return xhat, (xhat, inv, fixed, mu, var)


def _bn_bwd(g, ctx, xs, attrs, needs):
    xhat, inv, fixed, _, _ = ctx
    inv4 = inv[None, :, None, None]
    if fixed:
        return [g * inv4]
    n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    gsum = g.sum(axis=(0, 2, 3))[None, :, None, None]
    gx_sum = (g * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    return [inv4 / n * (n * g - gsum - xhat * gx_sum)]


# -- reductions and indexing ------------------------------------------------

def _lsm_check(op, xs, attrs):
    if xs[0].ndim < 1:
        raise ShapeError("log_softmax: needs at least one axis")


def _lsm_fwd(xs, attrs):
    x = xs[0]
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return out, out


def _lsm_bwd(g, out, xs, attrs, needs):
    return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]


def _reduce_check(op, xs, attrs):
    axis = attrs.get("axis")
    if axis is not None and not -xs[0].ndim <= axis < xs[0].ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {xs[0].shape}")


def _sum_fwd(xs, attrs):
    return np.asarray(xs[0].sum(axis=attrs.get("axis"))), None


def _mean_fwd(xs, attrs):
    return np.asarray(xs[0].mean(axis=attrs.get("axis"))), None


def _expand(g, shape, axis):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def _sum_bwd(g, ctx, xs, attrs, needs):
    return [_expand(g, xs[0].shape, attrs.get("axis"))]


def _mean_bwd(g, ctx, xs, attrs, needs):
    axis = attrs.get("axis")
    count = xs[0].size if axis is None else xs[0].shape[axis]
    return [_expand(g, xs[0].shape, axis) / count]


def _select_check(op, xs, attrs):
    idx = np.asarray(attrs.get("indices", []), dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("select_rows: indices must be a non-empty 1-d list")
    if idx.min() < 0 or idx.max() >= xs[0].shape[0]:
        raise ShapeError(f"select_rows: index out of range for {xs[0].shape[0]} rows")


def _select_fwd(xs, attrs):
    return xs[0][np.asarray(attrs["indices"], dtype=np.int64)], None


def _select_bwd(g, ctx, xs, attrs, needs):
    out = np.zeros_like(xs[0])
    np.add.at(out, np.asarray(attrs["indices"], dtype=np.int64), g)
    return [out]


def _binary(fwd, bwd):
    return Primitive((2,), _check_broadcast, fwd, bwd)


def _unary(fwd, bwd, check=_no_check):
    return Primitive((1,), check, fwd, bwd)


PRIMITIVES = {
    "add": _binary(lambda xs, a: (xs[0] + xs[1], None), _add_bwd),
    "sub": _binary(lambda xs, a: (xs[0] - xs[1], None), _sub_bwd),
    "mul_elementwise": _binary(lambda xs, a: (xs[0] * xs[1], None), _mul_bwd),
    "scale": _unary(_scale_fwd, lambda g, c, xs, a, n: [g * float(a["factor"])]),
    "matmul": Primitive((2,), _matmul_check, lambda xs, a: (xs[0] @ xs[1], None), _matmul_bwd),
    "conv2d": Primitive((2, 3), _conv_check, _conv_fwd, _conv_bwd),
    "relu": _unary(_relu_fwd, _relu_bwd),
    "avg_pool2d": _unary(_pool_fwd, _pool_bwd, _pool_check),
    "global_avg_pool": _unary(_gap_fwd, _gap_bwd, _gap_check),
    "channel_affine": Primitive((3,), _affine_check, _affine_fwd, _affine_bwd),
    "batch_normalize": _unary(_bn_fwd, _bn_bwd, _bn_check),
    "log_softmax": _unary(_lsm_fwd, _lsm_bwd, _lsm_check),
    "exp": _unary(_exp_fwd, lambda g, out, xs, a, n: [g * out]),
    "log_clamped": _unary(_log_clamped_fwd, _log_clamped_bwd),
    "reduce_sum": _unary(_sum_fwd, _sum_bwd, _reduce_check),
    "reduce_mean": _unary(_mean_fwd, _mean_bwd, _reduce_check),
    "select_rows": _unary(_select_fwd, _select_bwd, _select_check),
}

OP_KINDS = tuple(PRIMITIVES)
