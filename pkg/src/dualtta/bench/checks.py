"""Self-contained checks behind the `gradcheck` and `theory --check corollary` commands."""

from __future__ import annotations

import time
from dataclasses import asdict, replace

import numpy as np

from ..data import SpuriousDatasetConfig, StreamScenario, gen_spurious_dataset, make_stream
from ..model import build_reference_net, forward, predict_proba, resolve_trainables
from ..ndgrad import Stream, grad_check
from ..theory import estimate_corollary_separation
from ..transforms import ShuffleSpec, patch_shuffle, style_injection
from ..tta import D_MINUS, D_PLUS, DualTtaConfig, PartitionRecord, dual_loss, make_triple, weights
from .experiment import ExperimentConfig, run_stream, source_model

GRADCHECK_TOL = 1e-4
SEPARATION_MIN_GAP = 0.20


def dual_gradcheck(seed: int = 0, batch_size: int = 8, fd_step: float = 1e-5) -> dict:
    """Analytic vs central-difference gradients of L_Dual w.r.t. the norm affine parameters.

    Weights come from the real prediction triple. Membership is fixed to
    half D+ and half D- so both loss terms carry gradient.
    """
    t0 = time.perf_counter()
    cfg = SpuriousDatasetConfig(n_train=batch_size, n_val=batch_size, n_test=batch_size, seed=seed)
    x = gen_spurious_dataset(cfg)["target_test"].images
    model = build_reference_net(cfg.num_classes, cfg.channels, seed)
    st = Stream.from_seed(seed).split("gradcheck")
    probs = predict_proba(model, x, norm_mode="batch")
    probs_sa = predict_proba(model, patch_shuffle(x, ShuffleSpec(stream=st.split("shuffle"))), norm_mode="batch")
    probs_sp = predict_proba(model, x, norm_mode="batch", style_injection=style_injection(st.split("style")))
    triple = make_triple(probs, probs_sa, probs_sp)
    membership = np.where(np.arange(batch_size) < batch_size // 2, D_PLUS, D_MINUS)
    dcfg = DualTtaConfig()
    record = PartitionRecord(membership, weights(triple, membership, dcfg))
    names = resolve_trainables(model)

    def loss(tensors):
        out = forward(model, x, norm_mode="batch", param_tensors=tensors)
        return dual_loss(out.probs, record, dcfg.lam).total

    err = grad_check(loss, {k: model.params[k] for k in names}, fd_step)
    n_scalars = int(sum(model.params[k].size for k in names))
    return {"seed": seed, "batch_size": batch_size, "n_parameters": n_scalars, "fd_step": fd_step,
            "max_rel_error": float(err), "tolerance": GRADCHECK_TOL, "passed": bool(err < GRADCHECK_TOL),
            "seconds": time.perf_counter() - t0}


def corollary_run(seed: int, cfg: ExperimentConfig = None) -> dict:
    """Run DualTTA over the default stream and compare accuracy on D+ and D-."""
    cfg = cfg or ExperimentConfig(methods=["dualtta"], seeds=[seed])
    splits = gen_spurious_dataset(replace(cfg.dataset, seed=seed))
    model, _ = source_model(cfg, seed, splits)
    batches = make_stream(splits["target_test"], cfg.scenarios[0], seed)
    res = run_stream(model, "dualtta", cfg.adapter, batches, seed, cfg.dataset.num_classes)
    mem = [np.asarray(l["membership"]) for l in res.batches]
    correct = [np.asarray(l["predictions"]) == np.asarray(l["labels"]) for l in res.batches]
    rep = estimate_corollary_separation(mem, correct)
    return {"seed": seed, **asdict(rep)}


def corollary_check(seeds=(0, 1, 2), cfg: ExperimentConfig = None) -> dict:
    """Median over seeds of accuracy(D+) - accuracy(D-); an inconclusive seed counts as no gap."""
    runs = [corollary_run(s, cfg) for s in seeds]
    gaps = [r["gap"] if r["gap"] is not None else float("-inf") for r in runs]
    median = float(np.median(gaps))
    return {"runs": runs, "median_gap": median if np.isfinite(median) else None,
            "min_gap": SEPARATION_MIN_GAP, "passed": bool(median >= SEPARATION_MIN_GAP)}
