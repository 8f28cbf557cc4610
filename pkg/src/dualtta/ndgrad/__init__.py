"""Dense float64 tensors with a recording tape and reverse-mode gradients."""

from .core import Tape, TapeNode, Tensor, apply, as_tensor, backward
from .gradcheck import grad_check
from .prims import BN_EPS, LOG_FLOOR, OP_KINDS
from .rng import Stream, rng_gaussian, rng_uniform_permutation, splitmix64
from . import ops

__all__ = [
    "Tape", "TapeNode", "Tensor", "apply", "as_tensor", "backward", "grad_check",
    "BN_EPS", "LOG_FLOOR", "OP_KINDS", "Stream", "rng_gaussian",
    "rng_uniform_permutation", "splitmix64", "ops",
]
