"""Square-loss min-max AUC surrogate, cross-entropy and the compositional lower step.

All gradients are written out by hand in the scorer's task space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..errors import SingleClassBatch
from .scorer import Scorer


@dataclass
class LossGrad:
    value: float
    theta: np.ndarray
    a: float
    b: float
    alpha: float


def auc_minmax_loss(scorer: Scorer, theta, a: float, b: float, alpha: float, X, y,
                    margin: float = 1.0) -> LossGrad:
    """Batch estimate of

    ``mean_+ (h - a)^2 + mean_- (h - b)^2 + 2 alpha (c + mean_- h - mean_+ h) - alpha^2``

    and its gradients.  Raises :class:`SingleClassBatch` when the batch misses a class.
    """
    y = np.asarray(y)
    pos, neg = y > 0, y < 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassBatch(f"batch has {n_pos} positives and {n_neg} negatives; resample")
    h = scorer.task_scores(theta, X)
    hp, hn = h[pos], h[neg]
    gap = margin + hn.mean() - hp.mean()
    value = np.mean((hp - a) ** 2) + np.mean((hn - b) ** 2) + 2 * alpha * gap - alpha ** 2
    c = np.zeros_like(h)
    c[pos] = (2 * (hp - a) - 2 * alpha) / n_pos
    c[neg] = (2 * (hn - b) + 2 * alpha) / n_neg
    return LossGrad(float(value), scorer.task_vjp(theta, X, c), float(-2 * np.mean(hp - a)),
                    float(-2 * np.mean(hn - b)), float(2 * gap - 2 * alpha))


def ce_loss(scorer: Scorer, theta, X, y) -> float:
    """Mean logistic loss ``log(1 + exp(-y h))``."""
    return float(np.mean(np.logaddexp(0.0, -np.asarray(y) * scorer.task_scores(theta, X))))


def ce_loss_grad(scorer: Scorer, theta, X, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    h = scorer.task_scores(theta, X)
    return scorer.task_vjp(theta, X, -y * expit(-y * h) / y.size)


def ce_hvp(scorer: Scorer, theta, X, y, v) -> np.ndarray:
    """Exact Hessian-vector product of :func:`ce_loss` in task space."""
    y = np.asarray(y, dtype=float)
    h = scorer.task_scores(theta, X)
    c1 = -y * expit(-y * h) / y.size
    c2 = expit(h) * expit(-h) / y.size
    jv = scorer.task_jvp(theta, X, v)
    return scorer.task_vjp(theta, X, c2 * jv) + scorer.task_curvature(theta, X, c1, v)


def compositional_target(scorer: Scorer, theta, X, y, eta_tilde: float) -> np.ndarray:
    """Minimizer of the lower problem: one cross-entropy gradient step from ``theta``."""
    return np.asarray(theta, dtype=float) - eta_tilde * ce_loss_grad(scorer, theta, X, y)


def compositional_lower_step(scorer: Scorer, theta, u, X, y, eta2: float, eta_tilde: float) -> np.ndarray:
    """One gradient step on ``0.5 |u - (theta - eta_tilde grad L_CE(theta))|^2`` (identity Hessian)."""
    u = np.asarray(u, dtype=float)
    return u - eta2 * (u - compositional_target(scorer, theta, X, y, eta_tilde))
