"""Thin functional wrappers over :func:`apply`."""

import numpy as np

from .core import apply
from .prims import BN_EPS


def add(a, b):
    return apply("add", [a, b])


def sub(a, b):
    return apply("sub", [a, b])


def mul(a, b):
    return apply("mul_elementwise", [a, b])


def scale(x, factor):
    return apply("scale", [x], {"factor": factor})


def matmul(a, b):
    return apply("matmul", [a, b])


def conv2d(x, w, b=None, padding=0):
    inputs = [x, w] if b is None else [x, w, b]
    return apply("conv2d", inputs, {"padding": padding})


def relu(x):
    return apply("relu", [x])


def avg_pool2d(x):
    return apply("avg_pool2d", [x])


def global_avg_pool(x):
    return apply("global_avg_pool", [x])


def channel_affine(x, gamma, beta):
    return apply("channel_affine", [x, gamma, beta])


def batch_normalize(x, eps=BN_EPS, mean=None, var=None):
    attrs = {"eps": eps}
    if mean is not None:
        attrs["mean"] = np.asarray(mean, dtype=np.float64)
        attrs["var"] = np.asarray(var, dtype=np.float64)
    return apply("batch_normalize", [x], attrs)


def batch_denormalize(xhat, mean, var, eps=BN_EPS):
    """Inverse of :func:`batch_normalize` for known statistics (no tape)."""
    xhat = np.asarray(xhat, dtype=np.float64)
    std = np.sqrt(np.asarray(var) + eps)
    return xhat * std[None, :, None, None] + np.asarray(mean)[None, :, None, None]


def log_softmax(x):
    return apply("log_softmax", [x])


def exp(x):
    return apply("exp", [x])


def log_clamped(x):
    return apply("log_clamped", [x])


def reduce_sum(x, axis=None):
    return apply("reduce_sum", [x], {"axis": axis})


def reduce_mean(x, axis=None):
    return apply("reduce_mean", [x], {"axis": axis})


def select_rows(x, indices):
    return apply("select_rows", [x], {"indices": [int(i) for i in indices]})


def entropy_rows(probs):
    """Per-row Shannon entropy -sum p log p, recorded as primitives."""
    return scale(reduce_sum(mul(probs, log_clamped(probs)), axis=-1), -1.0)
