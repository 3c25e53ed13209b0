"""Exact pairwise AUC and one-way partial AUC."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError, UndefinedMetricError


def _split(scores, labels):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size != labels.size:
        raise ConfigurationError("scores and labels differ in length")
    pos, neg = scores[labels > 0], scores[labels <= 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    return pos, neg


def _pairwise(pos, neg) -> float:
    # count of negatives strictly below / equal to each positive, via sorting
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    wins = below.sum() + 0.5 * (at_or_below - below).sum()
    return float(wins / (pos.size * neg.size))


def metric_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    return _pairwise(*_split(scores, labels))


def top_k(n_minus: int, rho: float) -> int:
    # rounding guard so that e.g. 3 * (1/3) gives 1
    return int(math.floor(round(n_minus * rho, 9)))


def metric_pauc(scores, labels, rho: float) -> float:
    """AUC restricted to the top ``floor(n_minus * rho)`` negatives.

    Ties at the cut are broken in favour of the lowest sample index.
    """
    if not 0 < rho <= 1:
        raise ConfigurationError(f"rho must lie in (0, 1], got {rho}")
    pos, neg = _split(scores, labels)
    K = top_k(neg.size, rho)
    if K < 1:
        raise ConfigurationError(f"rho={rho} keeps no negatives out of {neg.size}")
    order = np.lexsort((np.arange(neg.size), -neg))
    return _pairwise(pos, neg[order[:K]])
