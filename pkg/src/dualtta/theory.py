"""Monte Carlo checks of the margin model, flip-probability bounds and set separation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as sps

from .errors import ConfigurationError
from .ndgrad import Stream

SHIFT_FAMILIES = ("constant", "normal", "uniform", "laplace", "two_point")
SYMMETRIC_FAMILIES = ("normal", "uniform", "laplace", "two_point")


# -- margin model -------------------------------------------------------------

@dataclass
class MarginModelConfig:
    sigma_m: float = 1.0
    s_values: list = field(default_factory=lambda: [round(0.1 * k, 10) for k in range(1, 11)])
    S_values: list = field(default_factory=lambda: [4.0, 8.0])
    c1: float = 1.5
    c2: float = 1.0
    trials: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if self.sigma_m <= 0 or self.c1 <= 0 or self.c2 <= 0:
            raise ConfigurationError("sigma_m, c1 and c2 must be positive")
        if self.trials < 10_000:
            raise ConfigurationError("trials must be >= 10^4")
        if min(self.s_values) < 0:
            raise ConfigurationError("style magnitudes must be non-negative")
        if min(self.S_values) <= max(self.s_values):
            raise ConfigurationError("every semantic magnitude must exceed every style magnitude")

    def g(self, s):
        return self.c1 * s

    def psi(self, S):
        return self.c2 / S


@dataclass
class MarginRecord:
    s: float
    S: float
    alpha: float
    beta: float
    ratio: float
    error_g: float
    error_psi: float
    error: float


def folded_normal_cdf(m, sigma=1.0):
    """Pr(|X| <= m) for X ~ N(0, sigma^2)."""
    return math.erf(max(m, 0.0) / (sigma * math.sqrt(2.0)))


def simulate_margin_model(config: Optional[MarginModelConfig] = None) -> list:
    """Sweep (s, S) and estimate flip rates and error from one shared sample of M.

    alpha = F(s), beta = F(S); error_g = F(g(s)), error_psi = F(psi(S)) and the
    combined error uses the threshold m0 = g(s) + psi(S), which grows with s
    and shrinks with S. All quantities are empirical CDF values of the same
    draws, so monotonicity in s and S holds exactly.
    """
    cfg = config or MarginModelConfig()
    M = np.sort(np.abs(cfg.sigma_m * Stream.from_seed(cfg.seed).split("margin").gaussian(cfg.trials)))

    def F(m):
        return float(np.searchsorted(M, m, side="right")) / cfg.trials

    records = []
    for S in cfg.S_values:
        for s in cfg.s_values:
            a, b = F(s), F(S)
            records.append(MarginRecord(
                s=float(s), S=float(S), alpha=a, beta=b, ratio=a / b if b > 0 else math.inf,
                error_g=F(cfg.g(s)), error_psi=F(cfg.psi(S)), error=F(cfg.g(s) + cfg.psi(S))))
    return records


@dataclass
class SpearmanResult:
    rho: Optional[float]
    n: int
    passed: bool
    status: str  # "ok" | "inconclusive"
    threshold: float = 0.95


def spearman_check(x, y, threshold=0.95) -> SpearmanResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return SpearmanResult(None, len(x), False, "inconclusive", threshold)
    rho = float(sps.spearmanr(x, y).statistic)
    return SpearmanResult(rho, len(x), rho >= threshold, "ok", threshold)


def check_theorem1_monotonicity(records, threshold=0.95) -> SpearmanResult:
    """Rank correlation between alpha/beta and the combined error."""
    if len(records) < 20:
        raise ConfigurationError("need at least 20 sweep points")
    return spearman_check([r.ratio for r in records], [r.error for r in records], threshold)


def sweep_is_monotone(records) -> bool:
    """alpha nondecreasing in s at fixed S, beta nondecreasing in S."""
    ok = True
    for S in sorted({r.S for r in records}):
        row = sorted((r for r in records if r.S == S), key=lambda r: r.s)
        ok &= all(p.alpha <= q.alpha for p, q in zip(row, row[1:]))
    betas = [b for _, b in sorted({(r.S, r.beta) for r in records})]
    return bool(ok and all(p <= q for p, q in zip(betas, betas[1:])))


# -- flip-probability bounds --------------------------------------------------

@dataclass
class ShiftDistribution:
    """Distribution of the probability shift Delta, supported on [-1, 1].

    normal and laplace are truncated to [-1, 1] by rejection.
    """
    family: str
    scale: float = 0.0  # value for constant, half-width for uniform, |c| for two_point

    def __post_init__(self):
        if self.family not in SHIFT_FAMILIES:
            raise ConfigurationError(f"unknown shift family '{self.family}'")
        if self.family == "constant":
            if abs(self.scale) > 1:
                raise ConfigurationError("constant shift must lie in [-1, 1]")
        elif not 0 < self.scale <= (1 if self.family in ("uniform", "two_point") else math.inf):
            raise ConfigurationError(f"invalid scale {self.scale} for {self.family}")

    def sample(self, stream: Stream, n: int) -> np.ndarray:
        if self.family == "constant":
            return np.full(n, float(self.scale))
        if self.family == "uniform":
            return stream.uniform(-self.scale, self.scale, n)
        if self.family == "two_point":
            return np.where(stream.uniform(size=n) < 0.5, -self.scale, self.scale)
        out = np.empty(0)
        while out.size < n:
            if self.family == "normal":
                draw = self.scale * stream.gaussian(2 * n)
            else:
                u = stream.uniform(-0.5, 0.5, 2 * n)
                draw = -self.scale * np.sign(u) * np.log1p(-2 * np.abs(u))
            out = np.concatenate([out, draw[np.abs(draw) <= 1]])
        return out[:n]


@dataclass
class BoundReport:
    delta: float
    family: str
    scale: float
    trials: int
    mean_abs_shift: float
    flip_frequency: float
    lower: float
    upper: float
    slack: float
    passed: bool


def binomial_slack(p, n):
    """Three binomial standard errors at rate p, floored at one count."""
    return 3.0 * math.sqrt(max(p * (1 - p), 1.0 / n) / n)


def check_theorem2_bounds(delta: float, shift: ShiftDistribution, trials: int = 10_000,
                          stream: Optional[Stream] = None) -> BoundReport:
    """Binary model with p = 1/2 + delta shifted to p' = clip(p + Delta, 0, 1).

    A flip is p' < 1/2. E|Delta| is measured on the realised shift p' - p.
    """
    if not 0 < delta <= 0.5:
        raise ConfigurationError(f"delta must lie in (0, 1/2], got {delta}")
    if trials < 1:
        raise ConfigurationError("trials must be positive")
    stream = stream or Stream.from_seed(0).split("flip-bounds")
    p = 0.5 + delta
    p_new = np.clip(p + shift.sample(stream, trials), 0.0, 1.0)
    e_abs = float(np.abs(p_new - p).mean())
    freq = float((p_new < 0.5).mean())
    lower = max(0.0, (e_abs - delta) / (1 - delta)) if delta < 1 else 0.0
    upper = min(1.0, e_abs / delta)
    slack_lo = binomial_slack(lower, trials)
    slack_hi = binomial_slack(upper, trials)
    ok = lower - slack_lo <= freq <= upper + slack_hi
    return BoundReport(delta, shift.family, float(shift.scale), trials, e_abs, freq,
                       lower, upper, max(slack_lo, slack_hi), bool(ok))


def random_bound_configs(n: int, seed: int = 0, families=SYMMETRIC_FAMILIES) -> list:
    """Seeded (delta, ShiftDistribution) pairs; symmetric shift families by default."""
    st = Stream.from_seed(seed).split("bound-configs")
    configs = []
    for i in range(n):
        fam = families[int(st.integers(0, len(families)))]
        delta = float(st.uniform(0.02, 0.5))
        if fam in ("uniform", "two_point"):
            scale = float(st.uniform(0.05, 1.0))
        elif fam == "constant":
            scale = float(st.uniform(-1.0, 1.0))
        else:
            scale = float(st.uniform(0.05, 0.8))
        configs.append((delta, ShiftDistribution(fam, scale)))
    return configs


def run_bound_suite(n_configs=200, trials=10_000, seed=0, families=SYMMETRIC_FAMILIES) -> list:
    root = Stream.from_seed(seed).split("bound-trials")
    return [check_theorem2_bounds(d, dist, trials, root.split(str(i)))
            for i, (d, dist) in enumerate(random_bound_configs(n_configs, seed, families))]


# -- D+/D- separation ---------------------------------------------------------

@dataclass
class SeparationReport:
    n_plus: int
    n_minus: int
    acc_plus: Optional[float]
    acc_minus: Optional[float]
    gap: Optional[float]
    interval: Optional[tuple]  # (error(D+), error(D-)) bracketing rho * tau_sp / tau_sa
    separated: Optional[bool]
    status: str  # "ok" | "inconclusive"


def estimate_corollary_separation(membership, correct) -> SeparationReport:
    """Accuracy of D+ (membership 1) against D- (membership -1).

    `membership` and `correct` are aligned arrays, or lists of per-batch arrays.
    """
    if isinstance(membership, (list, tuple)):
        membership = np.concatenate([np.asarray(m).ravel() for m in membership]) if membership else np.zeros(0)
        correct = np.concatenate([np.asarray(c).ravel() for c in correct]) if correct else np.zeros(0)
    membership = np.asarray(membership)
    correct = np.asarray(correct, dtype=bool)
    if membership.shape != correct.shape:
        raise ConfigurationError("membership and correctness must align")
    plus, minus = membership == 1, membership == -1
    n_plus, n_minus = int(plus.sum()), int(minus.sum())
    if n_plus == 0 or n_minus == 0:
        acc_p = float(correct[plus].mean()) if n_plus else None
        acc_m = float(correct[minus].mean()) if n_minus else None
        return SeparationReport(n_plus, n_minus, acc_p, acc_m, None, None, None, "inconclusive")
    acc_p, acc_m = float(correct[plus].mean()), float(correct[minus].mean())
    err_p, err_m = 1 - acc_p, 1 - acc_m
    return SeparationReport(n_plus, n_minus, acc_p, acc_m, acc_p - acc_m,
                            (err_p, err_m), err_p < err_m, "ok")


# -- report -------------------------------------------------------------------

def run_theory(seed: int = 0, n_configs: int = 200, trials: int = 10_000) -> dict:
    """Everything the `theory` subcommand prints, as plain JSON-ready data."""
    mcfg = MarginModelConfig(seed=seed)
    records = simulate_margin_model(mcfg)
    t1 = check_theorem1_monotonicity(records)
    by_style = spearman_check([r.alpha for r in records], [r.error_g for r in records])
    by_sem = spearman_check([r.beta for r in records], [r.error_psi for r in records], threshold=-0.95)
    bounds = run_bound_suite(n_configs, trials, seed)
    n_pass = sum(b.passed for b in bounds)
    return {
        "seed": seed,
        "margin_model": {
            "config": asdict(mcfg),
            "spearman_ratio_vs_error": asdict(t1),
            "spearman_alpha_vs_error_g": asdict(by_style),
            "spearman_beta_vs_error_psi": {**asdict(by_sem), "passed": by_sem.rho is not None and by_sem.rho <= -0.95},
            "monotone_sweep": sweep_is_monotone(records),
            "records": [asdict(r) for r in records],
        },
        "flip_bounds": {
            "n_configs": n_configs,
            "trials": trials,
            "n_passed": n_pass,
            "passed": n_pass == n_configs,
            "reports": [asdict(b) for b in bounds],
        },
        "passed": bool(t1.passed and n_pass == n_configs),
    }
