"""Ranking metrics for subtyping (ROC AUC) and survival (concordance index)."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


def auc_binary(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro(scores, labels: Sequence[int]) -> float:
    """Mean one-vs-rest AUC over all classes (columns of ``scores``)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = scores.shape[1]
    missing = [c for c in range(n_classes) if not np.any(labels == c)]
    if missing:
        raise UndefinedMetricError(f"classes {missing} have no examples")
    return float(np.mean([auc_binary(scores[:, c], (labels == c).astype(int)) for c in range(n_classes)]))


def c_index(risks: Sequence[float], times: Sequence[float], events: Sequence[int]) -> float:
    """Harrell's concordance index.

    Pair ``(i, j)`` is comparable when ``t_i < t_j`` and ``i`` had an event;
    it is concordant when ``risk_i > risk_j``.  Tied risks count one half.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n = comparable.sum()
    if n == 0:
        raise UndefinedMetricError("no comparable pairs")
    concordant = (comparable & (r[:, None] > r[None, :])).sum()
    tied = (comparable & (r[:, None] == r[None, :])).sum()
    return float((concordant + 0.5 * tied) / n)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation across folds."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def format_mean_std(values: Sequence[float], digits: int = 3) -> str:
    m, s = mean_std(values)
    return f"{m:.{digits}f} ± {s:.{digits}f}"
