"""Ranking and clustering metrics.

AUC uses the rank-statistic (Mann-Whitney) form with average ranks on
ties, which is exact and cheap; clustering agreement wraps the standard
adjusted Rand / normalized mutual information scores behind a strict
same-universe check.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from .errors import UndefinedMetricError


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties count half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _aligned(a: dict[int, int], b: dict[int, int]) -> tuple[list[int], list[int]]:
    if set(a) != set(b):
        raise ValueError("partitions cover different element universes")
    keys = sorted(a)
    return [a[k] for k in keys], [b[k] for k in keys]


def adjusted_rand_index(a: dict[int, int], b: dict[int, int]) -> float:
    """Chance-corrected partition agreement over a shared universe."""
    la, lb = _aligned(a, b)
    return float(adjusted_rand_score(la, lb))


def normalized_mutual_information(a: dict[int, int], b: dict[int, int]) -> float:
    la, lb = _aligned(a, b)
    return float(normalized_mutual_info_score(la, lb))


def agreement_rate(a, b) -> float:
    """Fraction of aligned positions where the two label lists agree."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("label lists must align")
    if a.size == 0:
        raise UndefinedMetricError("agreement of empty lists is undefined")
    return float((a == b).mean())


def improvement_pct(value: float, baseline: float) -> float:
    """Relative improvement over the baseline, in percent."""
    return 100.0 * (value - baseline) / baseline


def format_improvement(value: float, baseline: float | None) -> str:
    if baseline is None:
        return "-"
    return f"{improvement_pct(value, baseline):.2f}%"
