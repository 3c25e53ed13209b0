"""Ground-truth hypergradients, finite differences and tracking-error diagnostics.

Everything here needs closed-form lower and dual solutions, i.e. a
:class:`~mmbopt.problem.SyntheticQuadraticProblem`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigurationError

if TYPE_CHECKING:
    from .optimizer import State
    from .problem import SyntheticQuadraticProblem

REL_FLOOR = 1e-30


def _require_closed_form(problem) -> None:
    if not getattr(problem, "has_closed_form", False):
        raise ConfigurationError("exact diagnostics need a problem with closed-form solutions")


def _block_terms(problem, i, x):
    y = problem.lower_solution(i, x)
    alpha = problem.dual_solution(i, x)
    gx = problem.exact("grad_x_f", i, x, alpha, y)
    gy = problem.exact("grad_y_f", i, x, alpha, y)
    jac = problem.exact("jac_xy_g", i, x, alpha, y)
    return y, alpha, gx, gy, jac


def exact_grad_F(problem: "SyntheticQuadraticProblem", x) -> np.ndarray:
    """Implicit-function hypergradient ``mean_i [grad_x f_i - jac_xy g_i A_i^{-1} grad_y f_i]``.

    Evaluated at ``(x, alpha_i(x), y_i(x))``.  The dependence of ``alpha_i``
    on ``x`` contributes nothing because ``grad_alpha f_i`` vanishes there;
    :func:`exact_grad_F_with_chain` keeps that term for comparison.
    """
    _require_closed_form(problem)
    x = np.asarray(x, dtype=float)
    total = np.zeros_like(x)
    for i in range(problem.dims.m):
        _, _, gx, gy, jac = _block_terms(problem, i, x)
        total += gx - jac @ problem.solve_A(i, gy)
    return total / problem.dims.m


def exact_grad_F_with_chain(problem: "SyntheticQuadraticProblem", x) -> np.ndarray:
    """:func:`exact_grad_F` plus the explicit ``(d alpha_i / dx)^T grad_alpha f_i`` term."""
    _require_closed_form(problem)
    x = np.asarray(x, dtype=float)
    extra = np.zeros_like(x)
    for i in range(problem.dims.m):
        y = problem.lower_solution(i, x)
        alpha = problem.dual_solution(i, x)
        dalpha_dx = (problem.P[i] + problem.Q[i] @ problem.solve_A(i, problem.B[i])) / problem.profile.mu_f
        extra += dalpha_dx.T @ problem.exact("grad_alpha_f", i, x, alpha, y)
    return exact_grad_F(problem, x) + extra / problem.dims.m


def fd_grad_F(problem: "SyntheticQuadraticProblem", x, h: float = 1e-5) -> np.ndarray:
    """Coordinate-wise central differences of ``F``."""
    if not h > 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {h}")
    _require_closed_form(problem)
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (problem.objective(x + e) - problem.objective(x - e)) / (2 * h)
    return out


@dataclass
class DiagnosticsReport:
    grad_exact: np.ndarray
    grad_fd: np.ndarray
    rel_error: float
    stationarity: float

    def is_stationary(self, eps: float) -> bool:
        """``eps``-stationarity: ``|grad F(x)| <= eps``."""
        return bool(np.sqrt(self.stationarity) <= eps)


def diagnostics_report(problem, x, h: float = 1e-5) -> DiagnosticsReport:
    grad = exact_grad_F(problem, x)
    fd = fd_grad_F(problem, x, h)
    rel = float(np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), REL_FLOOR))
    return DiagnosticsReport(grad, fd, rel, float(grad @ grad))


def v_target(problem, block: int, x) -> np.ndarray:
    """``[hess_yy g_i]^{-1} grad_y f_i`` at ``(x, alpha_i(x), y_i(x))``."""
    y = problem.lower_solution(block, x)
    alpha = problem.dual_solution(block, x)
    return problem.solve_A(block, problem.exact("grad_y_f", block, x, alpha, y))


def delta_errors(problem, state: "State", variant: str, matrix_norm: str = "fro") -> tuple[float, float, float]:
    """Squared distances of the block iterates from their targets at ``state.x``.

    Returns ``(delta_y, delta_alpha, delta_gyy)`` for ``"v1"`` and
    ``(delta_y, delta_alpha, delta_v)`` for ``"v2"``, each summed over all
    blocks.  ``matrix_norm`` selects Frobenius (``"fro"``) or spectral
    (``"spec"``) distance for the Hessian-momentum error.
    """
    _require_closed_form(problem)
    x = state.x
    dy = da = dh = 0.0
    for i in range(problem.dims.m):
        y_star = problem.lower_solution(i, x)
        a_star = problem.dual_solution(i, x)
        dy += float(np.sum((state.y[i] - y_star) ** 2))
        da += float(np.sum((state.alpha[i] - a_star) ** 2))
        if variant == "v1":
            diff = state.s[i] - problem.exact("hess_yy_g", i, x, a_star, y_star)
            if matrix_norm == "fro":
                dh += float(np.sum(diff ** 2))
            elif matrix_norm == "spec":
                dh += float(np.linalg.norm(diff, 2) ** 2)
            else:
                raise ConfigurationError(f"unknown matrix norm {matrix_norm!r}")
        elif variant == "v2":
            dh += float(np.sum((state.v[i] - v_target(problem, i, x)) ** 2))
        else:
            raise ConfigurationError(f"unknown variant {variant!r}")
    return dy, da, dh


def fixed_point_state(problem, variant: str, x) -> "State":
    """State whose block iterates sit exactly on their targets at ``x``.

    ``y_i = y_i(x)``, ``alpha_i = alpha_i(x)`` and ``s_i = A_i`` (v1) or
    ``v_i = A_i^{-1} grad_y f_i`` (v2); ``z = 0``.
    """
    from .optimizer import init_state, spd_inverse

    _require_closed_form(problem)
    state = init_state(problem, variant, x0=x)
    for i in range(problem.dims.m):
        state.y[i] = problem.lower_solution(i, state.x)
        state.alpha[i] = problem.dual_solution(i, state.x)
        if variant == "v1":
            state.s[i] = problem.A[i]
            state.H[i] = spd_inverse(problem.A[i])
        else:
            state.v[i] = v_target(problem, i, state.x)
    return state
