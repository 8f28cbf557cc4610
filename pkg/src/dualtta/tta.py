"""DualTTA sample partitioning, weighting and loss, plus baseline adapters.

All adapters share one streaming interface: ``adapter.adapt_step(model,
batch)`` scores the batch with the current parameters (evaluation uses
these pre-update predictions), selects samples, and takes at most one SGD
step on the normalization affine parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ContractError
from .model import (NORM_AFFINE_ONLY, ModelState, OptimizerState, forward, predict_proba,
                    resolve_trainables, sgd_step)
from .ndgrad import LOG_FLOOR, Stream, Tape, Tensor, backward, ops
from .transforms import DEFAULT_GRID, ShuffleSpec, patch_shuffle, style_injection

METHODS = ("noadapt", "tent", "eata_lite", "deyo_lite", "dualtta", "deyo_dual", "eata_dual")
DUAL_SET_METHODS = ("dualtta", "deyo_dual", "eata_dual")

D_PLUS, NEITHER, D_MINUS = 1, 0, -1


def entropy(probs) -> np.ndarray:
    """Natural-log entropy of each probability row (log argument floored at 1e-12)."""
    p = np.asarray(probs, dtype=np.float64)
    return -(p * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=-1)


def diff(y_hat, y_other) -> np.ndarray:
    """y_hat[k] - y_other[k] with k = argmax y_hat (lowest index on ties), row-wise."""
    a = np.atleast_2d(np.asarray(y_hat, dtype=np.float64))
    b = np.atleast_2d(np.asarray(y_other, dtype=np.float64))
    if a.shape != b.shape:
        raise ContractError(f"diff: shapes {a.shape} and {b.shape} differ")
    k = a.argmax(axis=1)
    rows = np.arange(a.shape[0])
    out = a[rows, k] - b[rows, k]
    return out if np.ndim(y_hat) > 1 else out[0]


@dataclass
class DualTtaConfig:
    tau_sa: float = 0.4
    tau_sp: float = 0.7
    ent0: float = 0.4
    diff0: float = 0.7
    lam: float = 0.5
    entropy_gate: Optional[float] = None  # optional pre-partition Ent < gate filter

    def __post_init__(self):
        if not (0 < self.tau_sa < 1 and 0 < self.tau_sp < 1):
            raise ConfigurationError("tau_sa and tau_sp must lie in (0, 1)")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")


@dataclass
class BaselineConfig:
    tau_ent: Optional[float] = None  # None -> 0.4 * ln(num_classes)
    tau_plpd: float = 0.3
    eps_cos: float = 0.05
    ma_coef: float = 0.1

    def resolved_tau_ent(self, num_classes: int) -> float:
        return 0.4 * math.log(num_classes) if self.tau_ent is None else float(self.tau_ent)


@dataclass
class AdapterConfig:
    dual: DualTtaConfig = field(default_factory=DualTtaConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    lr: float = 5e-4
    momentum: float = 0.9
    policy: str = NORM_AFFINE_ONLY
    grid: int = DEFAULT_GRID
    share_permutation: bool = False
    episodic: bool = False  # reset parameters before every batch

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "AdapterConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown adapter config fields: {sorted(unknown)}")
        dual = DualTtaConfig(**d.pop("dual", {}))
        base = BaselineConfig(**d.pop("baseline", {}))
        return cls(dual=dual, baseline=base, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PredictionTriple:
    probs: np.ndarray
    probs_sa: Optional[np.ndarray]
    probs_sp: Optional[np.ndarray]
    k: np.ndarray
    ent: np.ndarray
    diff_sa: Optional[np.ndarray]
    diff_sp: Optional[np.ndarray]


def make_triple(probs, probs_sa=None, probs_sp=None) -> PredictionTriple:
    probs = np.asarray(probs, dtype=np.float64)
    return PredictionTriple(
        probs, probs_sa, probs_sp, probs.argmax(axis=1), entropy(probs),
        None if probs_sa is None else diff(probs, probs_sa),
        None if probs_sp is None else diff(probs, probs_sp),
    )


@dataclass
class PartitionRecord:
    membership: np.ndarray  # +1 D+, -1 D-, 0 neither
    weights: np.ndarray  # alpha on D+, beta on D-, 0 elsewhere

    @property
    def d_plus(self) -> np.ndarray:
        return np.flatnonzero(self.membership == D_PLUS)

    @property
    def d_minus(self) -> np.ndarray:
        return np.flatnonzero(self.membership == D_MINUS)

    def counts(self) -> tuple:
        m = self.membership
        return int((m == D_PLUS).sum()), int((m == D_MINUS).sum()), int((m == NEITHER).sum())


def partition(diff_sa, diff_sp, config: DualTtaConfig) -> np.ndarray:
    """Membership codes; equality with a threshold falls into neither set."""
    diff_sa = np.asarray(diff_sa, dtype=np.float64)
    diff_sp = np.asarray(diff_sp, dtype=np.float64)
    plus = (diff_sa > config.tau_sa) & (diff_sp < config.tau_sp)
    minus = (diff_sa < config.tau_sa) & (diff_sp > config.tau_sp)
    return np.where(plus, D_PLUS, np.where(minus, D_MINUS, NEITHER)).astype(np.int64)


def alpha_weight(ent, diff_sa, diff_sp, config: DualTtaConfig):
    return np.exp(config.ent0 - ent) + np.exp(diff_sa) + np.exp(config.diff0 - diff_sp)


def beta_weight(ent, config: DualTtaConfig):
    return np.exp(config.ent0 - ent)


def weights(triple: PredictionTriple, membership, config: DualTtaConfig) -> np.ndarray:
    membership = np.asarray(membership)
    w = np.zeros(len(membership))
    plus = membership == D_PLUS
    minus = membership == D_MINUS
    if plus.any():
        w[plus] = alpha_weight(triple.ent[plus], triple.diff_sa[plus], triple.diff_sp[plus], config)
    if minus.any():
        w[minus] = beta_weight(triple.ent[minus], config)
    return w


@dataclass
class LossTerms:
    total: Tensor
    plus: float
    minus: float

    @property
    def value(self) -> float:
        return self.total.item()


def dual_loss(probs: Tensor, record: PartitionRecord, lam: float) -> LossTerms:
    """L+ - lam * L-, with L+ = sum_{D+} w Ent and L- = sum_{D-} w Ent.

    Weights enter as constants. With both sets empty the result is a
    constant zero that is not on any tape.
    """
    plus, minus = record.d_plus, record.d_minus
    if plus.size == 0 and minus.size == 0:
        return LossTerms(Tensor(0.0), 0.0, 0.0)
    ent = ops.entropy_rows(probs)
    total = None
    l_plus = l_minus = 0.0
    if plus.size:
        lp = ops.reduce_sum(ops.mul(ops.select_rows(ent, plus), record.weights[plus]))
        l_plus = lp.item()
        total = lp
    if minus.size:
        lm = ops.reduce_sum(ops.mul(ops.select_rows(ent, minus), record.weights[minus]))
        l_minus = lm.item()
        neg = ops.scale(lm, -lam)
        total = neg if total is None else ops.add(total, neg)
    return LossTerms(total, l_plus, l_minus)


@dataclass
class AdaptOutcome:
    probs: np.ndarray  # pre-update predictions used for evaluation
    predictions: np.ndarray
    record: PartitionRecord
    n_plus: int
    n_minus: int
    loss_plus: float
    loss_minus: float
    loss_dual: float
    updated: bool
    triple: Optional[PredictionTriple] = None


def _cosine_rows(p, n):
    num = p @ n
    den = np.linalg.norm(p, axis=1) * np.linalg.norm(n)
    return num / np.maximum(den, 1e-12)


class Adapter:
    """Stateful streaming adapter for one method and one model."""

    def __init__(self, method: str, config: Optional[AdapterConfig] = None, seed: int = 0):
        if method not in METHODS:
            raise ConfigurationError(f"unknown method '{method}'; expected one of {METHODS}")
        self.method = method
        self.config = config or AdapterConfig()
        self.stream = Stream.from_seed(seed).split("adapter").split(method)
        self.optimizer = OptimizerState(self.config.lr, self.config.momentum)
        self.moving_avg: Optional[np.ndarray] = None
        self.t = 0
        self._initial = None

    def adapt_step(self, model: ModelState, batch) -> AdaptOutcome:
        x = getattr(batch, "images", batch)
        x = np.asarray(x, dtype=np.float64)
        step = self.stream.split(f"step{self.t}")
        self.t += 1

        if self.method == "noadapt":
            probs = predict_proba(model, x, norm_mode="batch")
            rec = PartitionRecord(np.zeros(len(probs), dtype=np.int64), np.zeros(len(probs)))
            return AdaptOutcome(probs, probs.argmax(axis=1), rec, 0, 0, 0.0, 0.0, 0.0, False, make_triple(probs))

        if self.config.episodic:
            if self._initial is None:
                self._initial = {k: v.copy() for k, v in model.params.items()}
            else:
                model.params.update({k: v.copy() for k, v in self._initial.items()})
                self.optimizer.velocity.clear()

        tape = Tape()
        out = forward(model, x, tape=tape, norm_mode="batch")
        probs = out.probs.data

        probs_sa = probs_sp = None
        if self.method in ("dualtta", "deyo_lite", "deyo_dual"):
            spec = ShuffleSpec(self.config.grid, step.split("shuffle"), self.config.share_permutation)
            probs_sa = predict_proba(model, patch_shuffle(x, spec), norm_mode="batch")
        if self.method == "dualtta":
            probs_sp = predict_proba(model, x, norm_mode="batch",
                                     style_injection=style_injection(step.split("style")))
        triple = make_triple(probs, probs_sa, probs_sp)
        record = self._select(triple, model.num_classes)
        lam = self.config.dual.lam if self.method in DUAL_SET_METHODS else 0.0
        terms = dual_loss(out.probs, record, lam)

        n_plus, n_minus, _ = record.counts()
        updated = n_plus > 0 or (n_minus > 0 and lam > 0)
        if updated:
            grads = backward(tape, terms.total, resolve_trainables(model, self.config.policy))
            sgd_step(model, grads, self.optimizer)
        return AdaptOutcome(probs, triple.k, record, n_plus, n_minus, terms.plus, terms.minus,
                            terms.value, updated, triple)

    def _select(self, tr: PredictionTriple, num_classes: int) -> PartitionRecord:
        B = len(tr.ent)
        dcfg = self.config.dual
        bcfg = self.config.baseline
        m = self.method
        if m == "tent":
            return PartitionRecord(np.full(B, D_PLUS), np.ones(B))
        if m == "dualtta":
            membership = partition(tr.diff_sa, tr.diff_sp, dcfg)
            if dcfg.entropy_gate is not None:
                membership[tr.ent >= dcfg.entropy_gate] = NEITHER
            return PartitionRecord(membership, weights(tr, membership, dcfg))

        low_ent = tr.ent < bcfg.resolved_tau_ent(num_classes)
        if m in ("deyo_lite", "deyo_dual"):
            plus = low_ent & (tr.diff_sa > bcfg.tau_plpd)
            minus = low_ent & (tr.diff_sa < bcfg.tau_plpd / 2) if m == "deyo_dual" else np.zeros(B, bool)
        else:
            if self.moving_avg is None:
                cos = np.full(B, -np.inf)  # no history yet: the redundancy gate passes everything
            else:
                cos = _cosine_rows(tr.probs, self.moving_avg)
            plus = low_ent & (cos < bcfg.eps_cos)
            minus = low_ent & (cos > 1.5 * bcfg.eps_cos) if m == "eata_dual" else np.zeros(B, bool)
            batch_mean = tr.probs.mean(axis=0)
            if self.moving_avg is None:
                self.moving_avg = batch_mean
            else:
                self.moving_avg = bcfg.ma_coef * batch_mean + (1 - bcfg.ma_coef) * self.moving_avg
        membership = np.where(plus, D_PLUS, np.where(minus, D_MINUS, NEITHER)).astype(np.int64)
        w = np.where(membership != NEITHER, beta_weight(tr.ent, dcfg), 0.0)
        return PartitionRecord(membership, w)


def make_adapter(method: str, config: Optional[AdapterConfig] = None, seed: int = 0) -> Adapter:
    return Adapter(method, config, seed)


def adapt_step(adapter: Adapter, model: ModelState, batch) -> AdaptOutcome:
    return adapter.adapt_step(model, batch)
