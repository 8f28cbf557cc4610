"""Dual-strategy test-time adaptation on a numpy autodiff engine.

Subpackages and modules: ``ndgrad`` (tensors, tape, gradients, RNG),
``model`` (reference CNN, pretraining, checkpoints), ``transforms`` (patch
shuffle, style perturbation), ``data`` (synthetic spurious images, corruptions,
streams), ``tta`` (sample partition, weighting, adapters), ``theory`` (Monte
Carlo checks) and ``bench`` (experiments, metrics, reports, CLI support).
"""

__version__ = "0.1.0"
