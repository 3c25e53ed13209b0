"""Partial-AUC surrogate with a smoothed top-K threshold as the lower problem.

For task ``k`` the threshold ``lambda_k(w)`` minimizes the 1-D strongly convex

    L_k(lam) = (K + eps)/n_minus * lam + tau2/2 * lam^2
               + mean_j tau1 * log(1 + exp((h_j - lam) / tau1))

over negative scores ``h_j``, and approximates the (K+1)-th largest one.
Negatives above it are weighted by ``phi(h - lam) = sigmoid(h - lam)`` in the
upper objective.  Stop-gradient is implemented by passing the frozen
quantities explicitly (:class:`Frozen`); the hand-derived gradient of
:func:`pauc_surrogate_G` is exactly the gradient of its value with those
quantities held fixed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import bisect
from scipy.special import expit

from ..errors import ConfigurationError, NumericalError, SingleClassBatch
from .metrics import top_k
from .scorer import Scorer


@dataclass(frozen=True)
class PAUCConfig:
    """Constants of the pAUC surrogate.

    ``practical=True`` drops the threshold-correction terms from the
    surrogate, i.e. ``lambda`` is treated as a constant when differentiating.
    """

    rho: float = 0.5
    tau1: float = 0.05
    tau2: float = 1e-3
    eps: float = 0.01
    margin: float = 1.0
    practical: bool = False

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ConfigurationError(f"rho must lie in (0, 1], got {self.rho}")
        if not self.tau1 > 0:
            raise ConfigurationError(f"tau1 must be positive, got {self.tau1}")
        if not self.tau2 >= 0:
            raise ConfigurationError(f"tau2 must be nonnegative, got {self.tau2}")
        if not self.eps >= 0:
            raise ConfigurationError(f"eps must be nonnegative, got {self.eps}")

    def K(self, n_minus: int) -> int:
        k = top_k(n_minus, self.rho)
        if k < 1:
            raise ConfigurationError(f"rho={self.rho} keeps no negatives out of {n_minus}")
        return k


def lambda_objective(lam: float, scores_neg, cfg: PAUCConfig, n_minus: Optional[int] = None) -> float:
    h = np.asarray(scores_neg, dtype=float)
    n = h.size if n_minus is None else n_minus
    soft = cfg.tau1 * np.logaddexp(0.0, (h - lam) / cfg.tau1)
    return float((cfg.K(n) + cfg.eps) / n * lam + 0.5 * cfg.tau2 * lam ** 2 + soft.mean())


def lambda_grad(lam: float, scores_neg, cfg: PAUCConfig, n_minus: Optional[int] = None) -> float:
    """Derivative of the threshold objective in ``lam``.

    ``scores_neg`` may be a batch; ``n_minus`` (default: its size) is the task's
    full negative count, which fixes ``K``.
    """
    h = np.asarray(scores_neg, dtype=float)
    n = h.size if n_minus is None else n_minus
    return float((cfg.K(n) + cfg.eps) / n + cfg.tau2 * lam - expit((h - lam) / cfg.tau1).mean())


def lambda_hess(lam: float, scores_neg, cfg: PAUCConfig) -> float:
    q = expit((np.asarray(scores_neg, dtype=float) - lam) / cfg.tau1)
    return float(cfg.tau2 + np.mean(q * (1 - q)) / cfg.tau1)


def solve_lambda(scores_neg, cfg: PAUCConfig, n_minus: Optional[int] = None) -> float:
    """Minimizer of the threshold objective by bisection on its monotone derivative."""
    h = np.asarray(scores_neg, dtype=float)
    lo, hi = h.min() - 50 * cfg.tau1, h.max() + 50 * cfg.tau1
    span = max(hi - lo, 1.0)
    for _ in range(200):
        if lambda_grad(lo, h, cfg, n_minus) < 0:
            break
        lo -= span
        span *= 2
    else:
        raise NumericalError("could not bracket the threshold from below")
    span = max(hi - lo, 1.0)
    for _ in range(200):
        if lambda_grad(hi, h, cfg, n_minus) > 0:
            break
        hi += span
        span *= 2
    else:
        raise NumericalError("could not bracket the threshold from above")
    return float(bisect(lambda t: lambda_grad(t, h, cfg, n_minus), lo, hi, xtol=1e-15, maxiter=400))


@dataclass
class Frozen:
    """Stop-gradient quantities of the surrogate, per batch negative."""

    phi: np.ndarray
    dphi: np.ndarray
    sq: np.ndarray
    h: np.ndarray
    H_inv: float


def freeze(h_neg, b: float, lam: float, H: float) -> Frozen:
    if not H > 0:
        raise NumericalError(f"threshold Hessian estimate must be positive, got {H}")
    phi = expit(h_neg - lam)
    return Frozen(phi, phi * (1 - phi), (h_neg - b) ** 2, h_neg.copy(), 1.0 / H)


@dataclass
class SurrogateGrad:
    value: float
    theta: np.ndarray
    a: float
    b: float
    alpha: float
    margin: float


def pauc_surrogate_G(scorer: Scorer, theta, a: float, b: float, alpha: float, lam: float, H: float,
                     Xp, Xn, cfg: PAUCConfig, frozen: Frozen | None = None) -> SurrogateGrad:
    """One task's surrogate loss and its gradient in ``(theta, a, b)``.

    ``frozen`` defaults to the quantities at the current point; pass a fixed
    one to finite-difference the value.  The returned ``alpha`` entry is the
    ascent direction ``2 * margin - 2 * alpha`` of the underlying min-max
    objective, with ``margin`` the batch pAUC margin.
    """
    Xp, Xn = np.atleast_2d(Xp), np.atleast_2d(Xn)
    if Xp.shape[0] == 0 or Xn.shape[0] == 0:
        raise SingleClassBatch("pAUC surrogate needs positives and negatives in the batch")
    hp = scorer.task_scores(theta, Xp)
    hn = scorer.task_scores(theta, Xn)
    fz = freeze(hn, b, lam, H) if frozen is None else frozen
    n_pos, n_neg = hp.size, hn.size
    D = 1.0 / (n_neg * cfg.rho)

    margin = D * np.sum(fz.phi * hn) - hp.mean() + cfg.margin
    value = np.mean((hp - a) ** 2) + D * np.sum(fz.phi * (hn - b) ** 2)
    inner = margin
    c_neg = D * 2 * fz.phi * (hn - b + alpha)
    if not cfg.practical:
        q = expit((hn - lam) / cfg.tau1)
        L = fz.dphi * (hn - fz.H_inv * q.mean())
        value += D * np.sum(L * fz.sq)
        inner += D * np.sum(L * fz.h)
        wts = D * (fz.sq + 2 * alpha * fz.h) * fz.dphi
        c_neg = c_neg + wts - wts.sum() * fz.H_inv * q * (1 - q) / (cfg.tau1 * n_neg)
    value += 2 * alpha * inner - alpha ** 2

    c_pos = (2 * (hp - a) - 2 * alpha) / n_pos
    g_theta = scorer.task_vjp(theta, Xp, c_pos) + scorer.task_vjp(theta, Xn, c_neg)
    return SurrogateGrad(float(value), g_theta, float(-2 * np.mean(hp - a)),
                         float(-2 * D * np.sum(fz.phi * (hn - b))), float(2 * margin - 2 * alpha), float(margin))


def pauc_objective(scorer: Scorer, theta, a: float, b: float, alpha: float, X, y, cfg: PAUCConfig) -> float:
    """Full-data value of one task's min-max objective at the exact threshold."""
    y = np.asarray(y)
    hp = scorer.task_scores(theta, X[y > 0])
    hn = scorer.task_scores(theta, X[y < 0])
    phi = expit(hn - solve_lambda(hn, cfg))
    D = 1.0 / (hn.size * cfg.rho)
    margin = D * np.sum(phi * hn) - hp.mean() + cfg.margin
    return float(np.mean((hp - a) ** 2) + D * np.sum(phi * (hn - b) ** 2) + 2 * alpha * margin - alpha ** 2)


def lambda_sgd(scores_neg, cfg: PAUCConfig, lam0: float, eta2: float, steps: int,
               n_minus: Optional[int] = None) -> np.ndarray:
    """Trajectory of ``lam <- lam - eta2 * lambda_grad(lam)`` on fixed scores."""
    out = np.empty(steps + 1)
    out[0] = lam = float(lam0)
    for t in range(steps):
        lam -= eta2 * lambda_grad(lam, scores_neg, cfg, n_minus)
        if not math.isfinite(lam):
            raise NumericalError("threshold iterate diverged")
        out[t + 1] = lam
    return out
