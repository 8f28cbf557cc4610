"""Wilcoxon signed-rank test with an exact null for small samples."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from ..errors import InsufficientDataError

EXACT_MAX_N = 20
MIN_NONZERO = 5


def _exact_cdf_counts(doubled_ranks):
    """Number of sign assignments giving each value of 2 * W+ (ranks may be halves)."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(paired_a, paired_b) -> dict:
    """Two-sided test of a - b against zero median difference.

    Zero differences are dropped and ties get mid-ranks. For n <= 20 the null
    distribution of W+ is enumerated exactly; above that a normal
    approximation with continuity correction and tie-adjusted variance is used.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InsufficientDataError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n < MIN_NONZERO:
        raise InsufficientDataError(f"need at least {MIN_NONZERO} non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    W = min(w_plus, w_minus)

    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_cdf_counts(doubled)
        probs = counts / 2.0 ** n
        k = int(round(2 * W))
        p = min(1.0, 2.0 * float(probs[:k + 1].sum()))
        method = "exact"
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
        mean = n * (n + 1) / 4.0
        z = (abs(w_plus - mean) - 0.5) / math.sqrt(var) if var > 0 else 0.0
        z = max(z, 0.0)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
        method = "normal-approx"
    return {"W": W, "W_plus": w_plus, "W_minus": w_minus, "n": n,
            "p_two_sided": p, "method_used": method, "alternative": "two-sided"}
