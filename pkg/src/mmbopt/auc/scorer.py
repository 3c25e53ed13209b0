"""Shared-encoder / per-task-head scorer ``h(x; k) = head_k . act(E x)``.

Parameters live in one flat vector ``w = [E.ravel(), heads.ravel()]``.  Most
derivative code works in the smaller *task space* ``theta = [E.ravel(),
head_k]`` of one task; :meth:`Scorer.task_params` and :meth:`Scorer.embed`
move between the two.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError

ACTIVATIONS = ("tanh", "linear")


@dataclass(frozen=True)
class Scorer:
    d: int
    e: int
    m: int
    activation: str = "tanh"

    def __post_init__(self):
        if min(self.d, self.e, self.m) < 1:
            raise ConfigurationError(f"scorer sizes must be positive, got d={self.d}, e={self.e}, m={self.m}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.e * self.d + self.m * self.e

    @property
    def n_task_params(self) -> int:
        return self.e * self.d + self.e

    def init_params(self, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
        return scale * rng.standard_normal(self.n_params)

    def split(self, w) -> tuple[np.ndarray, np.ndarray]:
        w = np.asarray(w, dtype=float)
        ed = self.e * self.d
        return w[:ed].reshape(self.e, self.d), w[ed:].reshape(self.m, self.e)

    def task_params(self, w, k: int) -> np.ndarray:
        E, heads = self.split(w)
        return np.concatenate([E.ravel(), heads[k]])

    def embed(self, g_task, k: int) -> np.ndarray:
        """Place a task-space vector into the full parameter space (other heads zero)."""
        out = np.zeros(self.n_params)
        ed = self.e * self.d
        out[:ed] = g_task[:ed]
        out[ed + k * self.e: ed + (k + 1) * self.e] = g_task[ed:]
        return out

    def _unpack(self, theta):
        ed = self.e * self.d
        return theta[:ed].reshape(self.e, self.d), theta[ed:]

    def _act(self, pre):
        if self.activation == "tanh":
            z = np.tanh(pre)
            return z, 1.0 - z * z
        return pre, np.ones_like(pre)

    # -- task space ------------------------------------------------------------

    def task_scores(self, theta, X) -> np.ndarray:
        E, head = self._unpack(np.asarray(theta, dtype=float))
        return self._act(X @ E.T)[0] @ head

    def task_vjp(self, theta, X, c) -> np.ndarray:
        """``sum_j c_j grad_theta h(x_j)``."""
        E, head = self._unpack(np.asarray(theta, dtype=float))
        z, dz = self._act(X @ E.T)
        gE = ((c[:, None] * dz) * head).T @ X
        return np.concatenate([gE.ravel(), z.T @ c])

    def task_jvp(self, theta, X, v) -> np.ndarray:
        """``(grad_theta h(x_j) . v)_j``."""
        E, head = self._unpack(np.asarray(theta, dtype=float))
        dE, dhead = self._unpack(np.asarray(v, dtype=float))
        z, dz = self._act(X @ E.T)
        return z @ dhead + (dz * (X @ dE.T)) @ head

    def task_curvature(self, theta, X, c, v) -> np.ndarray:
        """``sum_j c_j (hess_theta h(x_j)) v``."""
        E, head = self._unpack(np.asarray(theta, dtype=float))
        dE, dhead = self._unpack(np.asarray(v, dtype=float))
        z, dz = self._act(X @ E.T)
        ddz = -2.0 * z * dz if self.activation == "tanh" else np.zeros_like(z)
        u = X @ dE.T
        g_head = (c[:, None] * dz * u).sum(axis=0)
        coef = c[:, None] * (dhead * dz + head * ddz * u)
        return np.concatenate([(coef.T @ X).ravel(), g_head])

    # -- full space --------------------------------------------------------------

    def scores(self, w, X, k: int) -> np.ndarray:
        return self.task_scores(self.task_params(w, k), X)
