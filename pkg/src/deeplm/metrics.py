"""Rank-based discrimination metrics and the two-sample KS test."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import kolmogorov
from scipy.stats import rankdata

from .errors import UndefinedMetricError


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(case score > control score), ties counted 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUROC needs at least one case and one control")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def ks_two_sample(sample_a, sample_b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.

    The statistic is evaluated on the pooled support, which makes it exact for
    discrete data such as class ids. The p-value uses the limiting Kolmogorov
    distribution at ``sqrt(n_a n_b / (n_a + n_b)) * D``.
    """
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    grid = np.union1d(a, b)
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    n_eff = a.size * b.size / (a.size + b.size)
    p = float(kolmogorov(math.sqrt(n_eff) * d)) if d > 0 else 1.0
    return d, min(max(p, 0.0), 1.0)
