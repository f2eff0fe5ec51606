"""Paired significance testing for per-case metric comparisons.

Implements the two-sided Wilcoxon signed-rank test with the conventions
used throughout the evaluation pipeline: zero differences are dropped, tied
magnitudes get average ranks, the statistic is the positive-rank sum W+,
and the p-value is exact (full sign enumeration) up to n = 12 paired
differences, switching to a normal approximation with tie and continuity
corrections above that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

EXACT_LIMIT = 12


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float      # W+, the sum of ranks of positive differences
    p_value: float
    significant: bool
    n: int                # differences remaining after dropping zeros
    method: str           # "exact", "normal", or "degenerate"

    def to_dict(self):
        return {
            "statistic": self.statistic, "p_value": self.p_value,
            "significant": self.significant, "n": self.n, "method": self.method,
        }


def signed_rank_distribution(ranks) -> tuple[np.ndarray, np.ndarray]:
    """Exact null distribution of W+ for the given rank magnitudes.

    Enumerates all 2^n sign assignments (each equally likely under the
    null). Returns (support, pmf) with the support sorted ascending; the
    pmf sums to 1.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    n = ranks.size
    bits = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    sums = bits @ ranks
    support, counts = np.unique(sums, return_counts=True)
    return support, counts / 2.0 ** n


def wilcoxon_signed_rank(x, y, alpha: float = 0.05, method: str = "auto") -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Parameters
    ----------
    x, y : array_like
        Paired samples of equal length. Differences x - y equal to zero
        are dropped before ranking.
    alpha : float
        Significance level; `significant` is p < alpha.
    method : {"auto", "exact", "normal"}
        "auto" takes the exact path up to n = 12 differences and the
        normal approximation above; the explicit values force one path
        (useful for cross-validating the two).

    Returns
    -------
    WilcoxonResult
        statistic W+ (positive-rank sum), two-sided p-value, significance
        flag, effective n, and which code path produced the p-value.

    Notes
    -----
    The exact p-value is p = 2 * min(P(W+ <= w), P(W+ >= w)) under full
    enumeration of sign assignments, capped at 1. The normal approximation
    uses tie correction sigma^2 = n(n+1)(2n+1)/24 - sum(t^3 - t)/48 and a
    0.5 continuity correction toward the mean. All differences zero yields
    the degenerate result (p = 1, not significant).
    """
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"method must be auto, exact, or normal, got {method!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"x and y must be 1D arrays of equal length, got {x.shape} and {y.shape}")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, False, 0, "degenerate")

    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())

    if method == "exact" or (method == "auto" and n <= EXACT_LIMIT):
        support, pmf = signed_rank_distribution(ranks)
        p_le = pmf[support <= w + 1e-12].sum()
        p_ge = pmf[support >= w - 1e-12].sum()
        p = min(1.0, 2.0 * min(p_le, p_ge))
        method = "exact"
    else:
        mu = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - ((tie_counts ** 3 - tie_counts).sum()) / 48.0
        dev = w - mu
        if dev == 0 or var <= 0:
            p = 1.0
        else:
            z = (dev - 0.5 * math.copysign(1.0, dev)) / math.sqrt(var)
            p = min(1.0, 2.0 * 0.5 * math.erfc(abs(z) / math.sqrt(2.0)))
        method = "normal"
    return WilcoxonResult(w, float(p), bool(p < alpha), int(n), method)


@dataclass(frozen=True)
class ComparisonResult:
    """A named pairwise model comparison on one metric."""

    model_a: str
    model_b: str
    metric: str
    statistic: float
    p_value: float
    significant: bool
    n: int

    def to_dict(self):
        return {
            "model_a": self.model_a, "model_b": self.model_b, "metric": self.metric,
            "statistic": self.statistic, "p_value": self.p_value,
            "significant": self.significant, "n": self.n,
        }


def compare_models(model_a: str, values_a, model_b: str, values_b, metric: str,
                   alpha: float = 0.05) -> ComparisonResult:
    """Wilcoxon comparison of two models' per-case values for one metric.

    Pairs with a missing value on either side (None/NaN) are dropped.
    """
    pairs = [
        (a, b) for a, b in zip(values_a, values_b)
        if a is not None and b is not None and np.isfinite(a) and np.isfinite(b)
    ]
    xs = np.array([p[0] for p in pairs])
    ys = np.array([p[1] for p in pairs])
    r = wilcoxon_signed_rank(xs, ys, alpha=alpha)
    return ComparisonResult(model_a, model_b, metric, r.statistic, r.p_value, r.significant, r.n)
