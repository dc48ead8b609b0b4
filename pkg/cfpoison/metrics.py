"""Evaluation metrics and significance testing."""

import math
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import mannwhitneyu
from sklearn.metrics import f1_score as _f1

from .models import STAR_CUTPOINTS, DataValidationError

EXACT_MAX_TOTAL = 12


def cost_diff_pct(cost_poisoned: float, cost_clean: float) -> float:
    """Relative change of the recourse cost; NaN when the clean cost is not positive"""
    if not cost_clean > 0 or not math.isfinite(cost_clean) or not math.isfinite(cost_poisoned):
        return math.nan
    return cost_poisoned / cost_clean - 1.0


def cost_diff_abs(cost_poisoned: float, cost_clean: float) -> float:
    if not math.isfinite(cost_clean) or not math.isfinite(cost_poisoned):
        return math.nan
    return cost_poisoned - cost_clean


def paired_diffs(poisoned, clean, relative: bool = True) -> tuple[np.ndarray, int]:
    """
    Per-instance cost differences.

    Returns:
        (finite differences, number of excluded instances)
    """
    fn = cost_diff_pct if relative else cost_diff_abs
    diffs = np.array([fn(float(p), float(c)) for p, c in zip(poisoned, clean)], dtype=float)
    keep = np.isfinite(diffs)
    return diffs[keep], int(np.sum(~keep))


def subgroup_gap_pct(clean_0, clean_1, poisoned_0, poisoned_1) -> float:
    """
    Relative change of the gap between the median recourse costs of two groups.

    |med(poisoned_0) - med(poisoned_1)| / |med(clean_0) - med(clean_1)| - 1, NaN when the
    clean gap is zero.
    """
    groups = [np.asarray(g, dtype=float) for g in (clean_0, clean_1, poisoned_0, poisoned_1)]
    groups = [g[np.isfinite(g)] for g in groups]
    if any(g.size == 0 for g in groups):
        raise DataValidationError("subgroup gap needs both groups in both conditions")
    clean_gap = abs(np.median(groups[0]) - np.median(groups[1]))
    if clean_gap == 0:
        return math.nan
    return float(abs(np.median(groups[2]) - np.median(groups[3])) / clean_gap - 1.0)


def mann_whitney_u(
    sample_a, sample_b, method: Optional[str] = None
) -> tuple[float, float]:
    """
    Two-sided Mann-Whitney U test.

    The exact null distribution is used for small tie-free samples (at most 12 values in
    total); otherwise the normal approximation with tie and continuity correction.
    Samples made of one repeated value give p = 1.

    Returns:
        (U of sample_a, p_value)
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise DataValidationError("Mann-Whitney U needs two non-empty samples")
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        return a.size * b.size / 2.0, 1.0
    if method is None:
        tie_free = np.unique(pooled).size == pooled.size
        method = "exact" if tie_free and pooled.size <= EXACT_MAX_TOTAL else "asymptotic"
    result = mannwhitneyu(a, b, alternative="two-sided", method=method, use_continuity=True)
    return float(result.statistic), float(min(1.0, result.pvalue))


def significance_stars(p_value: float) -> str:
    """One of ns, *, **, *** for the cut points 0.05, 0.01, 0.001"""
    if p_value is None or not math.isfinite(p_value):
        return "ns"
    for cut, stars in STAR_CUTPOINTS:
        if p_value <= cut:
            return stars
    return "ns"


def f1_score(predictions, labels) -> float:
    """F1 of the positive class; 0 when it is undefined"""
    return float(_f1(np.asarray(labels, dtype=int), np.asarray(predictions, dtype=int), zero_division=0))


def scott_bandwidth(fit: np.ndarray) -> np.ndarray:
    """Per-dimension Scott's rule; a zero spread counts as 1"""
    n, d = fit.shape
    sigma = fit.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return sigma * n ** (-1.0 / (d + 4))


def kde_loglik(fit, query, bandwidth: Optional[Union[float, np.ndarray]] = None) -> np.ndarray:
    """Gaussian-kernel density estimate (diagonal bandwidth) of ``fit``, log-density at each query row"""
    fit = np.atleast_2d(np.asarray(fit, dtype=float))
    query = np.atleast_2d(np.asarray(query, dtype=float))
    if fit.shape[0] == 0 or fit.size == 0:
        raise DataValidationError("KDE needs a non-empty fit set")
    n, d = fit.shape
    if query.shape[1] != d:
        query = query.reshape(-1, d)
    h = scott_bandwidth(fit) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (d,))
    z = (query[:, None, :] - fit[None, :, :]) / h
    exponents = -0.5 * np.sum(z**2, axis=2)
    log_norm = math.log(n) + float(np.sum(np.log(h))) + 0.5 * d * math.log(2 * math.pi)
    return logsumexp(exponents, axis=1) - log_norm
