"""Finite-difference verification of reverse-mode gradients."""

import numpy as np

from ..errors import GradCheckError
from .core import Tape, Tensor, backward


def grad_check(function_handle, params, fd_step=1e-5):
    """Compare analytic gradients against central differences.

    `function_handle(tensors)` receives a dict name -> Tensor and must return
    a scalar Tensor. It is called once on a recording tape and then on plain
    tensors for the difference quotients. Returns the max over coordinates of
    |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(p):
        return function_handle({k: Tensor(v) for k, v in p.items()}).item()

    tape = Tape()
    loss = function_handle({k: tape.parameter(k, v) for k, v in params.items()})
    analytic = backward(tape, loss, list(params))
    base = loss.item()
    if value(params) != base or value(params) != base:
        raise GradCheckError("function is not deterministic across evaluations")

    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            up = value(params)
            flat[i] = orig - fd_step
            down = value(params)
            flat[i] = orig
            central = (up - down) / (2 * fd_step)
            denom = max(abs(a_flat[i]), abs(central), 1e-8)
            worst = max(worst, abs(a_flat[i] - central) / denom)
    return worst
