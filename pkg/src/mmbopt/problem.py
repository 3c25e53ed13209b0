"""Multi-block min-max bilevel problems and the synthetic quadratic family.

A problem has ``m`` blocks.  Block ``i`` owns a dual variable ``alpha_i`` and
a lower-level variable ``y_i``; the upper objective is the block average of
``f_i(x, alpha_i, y_i(x))`` maximised over ``alpha`` and the lower problems
are ``y_i(x) = argmin_y g_i(x, y)``.  Algorithms only talk to problems
through :meth:`MinMaxBilevelProblem.oracle`.

Block ids are zero based.  Mixed second derivatives ``jac_xy_g`` are returned
with shape ``(d_x, d_y)`` so that ``jac_xy_g @ H @ grad_y_f`` lives in the
primal space.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, ContractViolation
from .rng import RngStream

ORACLE_KINDS = ("grad_x_f", "grad_alpha_f", "grad_y_f", "grad_y_g", "hess_yy_g", "jac_xy_g")


@dataclass(frozen=True)
class ProblemDims:
    m: int
    d_x: int
    d_y: int
    d_alpha: int = 1

    def __post_init__(self):
        for name in ("m", "d_x", "d_y", "d_alpha"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"dims.{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class SmoothnessProfile:
    mu_f: float = 1.0
    mu_g: float = 1.0
    L_f: float = 10.0
    L_g: float = 4.0
    C_f: float = 50.0
    C_gxy: float = 10.0
    sigma: float = 0.0

    def __post_init__(self):
        for name in ("mu_f", "mu_g", "L_f", "L_g", "C_f", "C_gxy"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigurationError(f"profile.{name} must be positive, got {value!r}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigurationError(f"profile.sigma must be nonnegative, got {self.sigma!r}")
        if self.mu_f > self.L_f:
            raise ConfigurationError(f"profile.mu_f={self.mu_f} exceeds L_f={self.L_f}")
        if self.mu_g > self.L_g:
            raise ConfigurationError(f"profile.mu_g={self.mu_g} exceeds L_g={self.L_g}")

    @property
    def gamma_radius(self) -> float:
        """Radius of the ball that contains every ``[hess_yy g]^{-1} grad_y f``."""
        return self.C_f / self.mu_g


@dataclass(frozen=True)
class DualSet:
    """Convex set for one block's dual variable: ``"real"``, ``"nonneg"`` or ``"box"``."""

    kind: Literal["real", "nonneg", "box"] = "real"
    lo: float = -np.inf
    hi: float = np.inf

    def __post_init__(self):
        if self.kind not in ("real", "nonneg", "box"):
            raise ConfigurationError(f"unknown dual set kind {self.kind!r}")
        if self.kind == "box" and not self.lo <= self.hi:
            raise ConfigurationError(f"empty box [{self.lo}, {self.hi}]")

    def project(self, alpha):
        if self.kind == "real":
            return np.array(alpha, dtype=float, copy=True)
        if self.kind == "nonneg":
            return np.maximum(alpha, 0.0)
        return np.clip(alpha, self.lo, self.hi)

    def contains(self, alpha, tol: float = 0.0) -> bool:
        alpha = np.asarray(alpha)
        if self.kind == "real":
            return True
        if self.kind == "nonneg":
            return bool(np.all(alpha >= -tol))
        return bool(np.all((alpha >= self.lo - tol) & (alpha <= self.hi + tol)))


@dataclass(frozen=True)
class OracleQuery:
    block: int
    x: np.ndarray
    alpha: np.ndarray
    y: np.ndarray
    batch: np.ndarray

    def validate(self, dims: ProblemDims) -> None:
        if not 0 <= self.block < dims.m:
            raise ContractViolation(f"block {self.block} outside [0, {dims.m})")
        if len(self.batch) == 0:
            raise ContractViolation("oracle batch must be nonempty")


class MinMaxBilevelProblem:
    """Interface every problem exposes to the optimizers.

    Subclasses implement :meth:`exact` (noise-free derivatives) and may
    override :meth:`oracle` when the noise model is data driven.
    """

    dims: ProblemDims
    profile: SmoothnessProfile
    dual_set: DualSet = DualSet()
    #: population size that data batches are drawn from
    n_samples: int = 1

    has_closed_form: bool = False

    def exact(self, kind: str, block: int, x, alpha, y) -> np.ndarray:
        raise NotImplementedError

    def oracle(self, query: OracleQuery, kind: str, rng: RngStream | np.random.Generator) -> np.ndarray:
        """Unbiased stochastic estimate of ``kind`` with per-coordinate variance ``sigma**2 / |batch|``.

        Noise is additive Gaussian and drawn from ``rng``; ``hess_yy_g`` is
        symmetrised and its eigenvalues are clamped from below at ``mu_g``.
        """
        if kind not in ORACLE_KINDS:
            raise ContractViolation(f"unknown oracle kind {kind!r}")
        query.validate(self.dims)
        value = self.exact(kind, query.block, query.x, query.alpha, query.y)
        sigma = self.profile.sigma
        if sigma == 0.0:
            return value
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        value = value + gen.normal(0.0, sigma / math.sqrt(len(query.batch)), value.shape)
        if kind == "hess_yy_g":
            value = clamp_spectrum(0.5 * (value + value.T), self.profile.mu_g)
        return value


def clamp_spectrum(matrix: np.ndarray, floor: float) -> np.ndarray:
    """Raise every eigenvalue of a symmetric matrix to at least ``floor``."""
    try:
        # cheap test for the common case where no eigenvalue needs raising
        np.linalg.cholesky(matrix - floor * np.eye(matrix.shape[0]))
        return matrix
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(matrix)
    out = (v * np.maximum(w, floor)) @ v.T
    return 0.5 * (out + out.T)


def stochastic_oracle(problem: MinMaxBilevelProblem, query: OracleQuery, kind: str, rng) -> np.ndarray:
    return problem.oracle(query, kind, rng)


def random_orthogonal(gen: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(gen.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass(eq=False)
class SyntheticQuadraticProblem(MinMaxBilevelProblem):
    r"""Quadratic instance with closed-form lower, dual and hypergradient solutions.

    Per block::

        g_i(x, y)        = 1/2 y^T A_i y - y^T (B_i x + c_i)
        f_i(x, alpha, y) = alpha^T (P_i x + Q_i y + r_i) - mu_f/2 |alpha|^2
                           + 1/2 x^T M_i x + s_i^T y

    ``P_i`` (``d_alpha x d_x``), ``Q_i`` (``d_alpha x d_y``) and ``r_i`` are the
    vector-dual generalisations of the scalar-dual coefficients p_i, q_i, r_i.
    The dual set is all of R^{d_alpha}.  Arrays are stacked along a leading
    block axis.
    """

    dims: ProblemDims
    profile: SmoothnessProfile
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    r: np.ndarray
    M: np.ndarray
    s: np.ndarray
    n_samples: int = 1000
    dual_set: DualSet = field(default_factory=DualSet)
    has_closed_form: bool = field(default=True, init=False)

    def __post_init__(self):
        d = self.dims
        shapes = {
            "A": (d.m, d.d_y, d.d_y), "B": (d.m, d.d_y, d.d_x), "c": (d.m, d.d_y),
            "P": (d.m, d.d_alpha, d.d_x), "Q": (d.m, d.d_alpha, d.d_y), "r": (d.m, d.d_alpha),
            "M": (d.m, d.d_x, d.d_x), "s": (d.m, d.d_y),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ConfigurationError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            setattr(self, name, arr)
        if self.dual_set.kind != "real":
            raise ConfigurationError("synthetic problems use an unconstrained dual set")
        self._jac = -np.transpose(self.B, (0, 2, 1))
        self._jac.setflags(write=False)
        self._chol = []
        for i in range(d.m):
            try:
                self._chol.append(linalg.cho_factor(self.A[i], lower=True))
            except linalg.LinAlgError as exc:
                raise ConfigurationError(f"A[{i}] is not positive definite") from exc

    # -- closed forms -----------------------------------------------------
    def solve_A(self, block: int, rhs) -> np.ndarray:
        """``A_i^{-1} rhs`` through the cached Cholesky factor."""
        return linalg.cho_solve(self._chol[block], rhs, check_finite=False)

    def lower_solution(self, block: int, x) -> np.ndarray:
        return self.solve_A(block, self.B[block] @ x + self.c[block])

    def dual_solution(self, block: int, x) -> np.ndarray:
        y = self.lower_solution(block, x)
        return (self.P[block] @ x + self.Q[block] @ y + self.r[block]) / self.profile.mu_f

    def f(self, block: int, x, alpha, y) -> float:
        i = block
        lin = self.P[i] @ x + self.Q[i] @ y + self.r[i]
        return float(alpha @ lin - 0.5 * self.profile.mu_f * alpha @ alpha
                     + 0.5 * x @ self.M[i] @ x + self.s[i] @ y)

    def g(self, block: int, x, y) -> float:
        i = block
        return float(0.5 * y @ self.A[i] @ y - y @ (self.B[i] @ x + self.c[i]))

    def exact(self, kind: str, block: int, x, alpha, y) -> np.ndarray:
        i = block
        if kind == "grad_x_f":
            return self.P[i].T @ alpha + self.M[i] @ x
        if kind == "grad_alpha_f":
            return self.P[i] @ x + self.Q[i] @ y + self.r[i] - self.profile.mu_f * alpha
        if kind == "grad_y_f":
            return self.Q[i].T @ alpha + self.s[i]
        if kind == "grad_y_g":
            return self.A[i] @ y - (self.B[i] @ x + self.c[i])
        if kind == "hess_yy_g":
            return self.A[i]
        if kind == "jac_xy_g":
            return self._jac[i]
        raise ContractViolation(f"unknown oracle kind {kind!r}")

    def block_value(self, block: int, x) -> float:
        y = self.lower_solution(block, x)
        alpha = self.dual_solution(block, x)
        return self.f(block, x, alpha, y)

    def objective(self, x) -> float:
        return float(np.mean([self.block_value(i, x) for i in range(self.dims.m)]))

    def hessian_F(self) -> np.ndarray:
        """Constant Hessian of ``F`` (it is quadratic in ``x``)."""
        out = np.zeros((self.dims.d_x, self.dims.d_x))
        for i in range(self.dims.m):
            J = self.P[i] + self.Q[i] @ self.solve_A(i, self.B[i])
            out += J.T @ J / self.profile.mu_f + self.M[i]
        return out / self.dims.m

    def permuted(self, order) -> "SyntheticQuadraticProblem":
        """Same problem with blocks relabelled so that new block ``k`` is old block ``order[k]``."""
        order = np.asarray(order)
        kw = {name: getattr(self, name)[order] for name in ("A", "B", "c", "P", "Q", "r", "M", "s")}
        return SyntheticQuadraticProblem(self.dims, self.profile, n_samples=self.n_samples, **kw)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        out = {"dims": asdict(self.dims), "profile": asdict(self.profile), "n_samples": self.n_samples}
        for name in ("A", "B", "c", "P", "Q", "r", "M", "s"):
            out[name] = getattr(self, name).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticQuadraticProblem":
        arrays = {k: np.array(data[k], dtype=float) for k in ("A", "B", "c", "P", "Q", "r", "M", "s")}
        return cls(ProblemDims(**data["dims"]), SmoothnessProfile(**data["profile"]),
                   n_samples=int(data.get("n_samples", 1000)), **arrays)

    def save(self, path) -> None:
        # repr() of a float round-trips exactly, so json keeps the coefficients bit-identical
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SyntheticQuadraticProblem":
        return cls.from_dict(json.loads(Path(path).read_text()))


def synth_generate(seed: int, dims: ProblemDims, profile: SmoothnessProfile,
                   min_curvature: float | None = 0.5, n_samples: int = 1000) -> SyntheticQuadraticProblem:
    """Draw a random synthetic quadratic instance.

    ``A_i = Q diag(lam) Q^T`` with ``lam ~ U[mu_g, L_g]`` and ``Q`` Haar
    orthogonal.  Every other coefficient is standard normal; ``M_i`` is the
    symmetric part of a Gaussian matrix and therefore indefinite in general.

    With indefinite ``M_i`` the average Hessian of ``F`` is usually indefinite
    too, making ``F`` unbounded below.  When ``min_curvature`` is not None a
    common multiple of the identity is added to every ``M_i`` so that the
    smallest eigenvalue of ``hess F`` equals ``min_curvature`` (individual
    ``M_i`` typically stay indefinite).  Pass ``None`` for the raw draw.
    """
    if not isinstance(dims, ProblemDims) or not isinstance(profile, SmoothnessProfile):
        raise ConfigurationError("dims and profile must be ProblemDims / SmoothnessProfile instances")
    gen = RngStream(int(seed), ("synthetic",)).generator()
    m, dx, dy, da = dims.m, dims.d_x, dims.d_y, dims.d_alpha
    A = np.empty((m, dy, dy))
    for i in range(m):
        q = random_orthogonal(gen, dy)
        lam = gen.uniform(profile.mu_g, profile.L_g, size=dy)
        a = (q * lam) @ q.T
        A[i] = 0.5 * (a + a.T)
    B = gen.standard_normal((m, dy, dx))
    c = gen.standard_normal((m, dy))
    P = gen.standard_normal((m, da, dx))
    Q = gen.standard_normal((m, da, dy))
    r = gen.standard_normal((m, da))
    G = gen.standard_normal((m, dx, dx))
    M = 0.5 * (G + np.transpose(G, (0, 2, 1)))
    s = gen.standard_normal((m, dy))
    problem = SyntheticQuadraticProblem(dims, profile, A, B, c, P, Q, r, M, s, n_samples=n_samples)
    if min_curvature is None:
        return problem
    lam_min = np.linalg.eigvalsh(problem.hessian_F())[0]
    M = M + (min_curvature - lam_min) * np.eye(dx)
    return SyntheticQuadraticProblem(dims, profile, A, B, c, P, Q, r, M, s, n_samples=n_samples)


def lower_solution(problem: SyntheticQuadraticProblem, block: int, x) -> np.ndarray:
    return problem.lower_solution(block, np.asarray(x, dtype=float))


def dual_solution(problem: SyntheticQuadraticProblem, block: int, x) -> np.ndarray:
    return problem.dual_solution(block, np.asarray(x, dtype=float))


def exact_objective_F(problem: SyntheticQuadraticProblem, x) -> float:
    return problem.objective(np.asarray(x, dtype=float))


def make_problem(m: int = 1, d_x: int = 1, d_y: int = 1, d_alpha: int = 1,
                 profile: SmoothnessProfile | None = None, **coeffs) -> SyntheticQuadraticProblem:
    """Hand-built synthetic instance; omitted coefficients are zero (``A`` defaults to identity)."""
    dims = ProblemDims(m, d_x, d_y, d_alpha)
    profile = profile or SmoothnessProfile()
    defaults = {
        "A": np.tile(np.eye(d_y), (m, 1, 1)), "B": np.zeros((m, d_y, d_x)), "c": np.zeros((m, d_y)),
        "P": np.zeros((m, d_alpha, d_x)), "Q": np.zeros((m, d_alpha, d_y)), "r": np.zeros((m, d_alpha)),
        "M": np.zeros((m, d_x, d_x)), "s": np.zeros((m, d_y)),
    }
    for name, value in coeffs.items():
        if name not in defaults:
            raise ConfigurationError(f"unknown coefficient {name!r}")
        defaults[name] = np.broadcast_to(np.asarray(value, dtype=float), defaults[name].shape).copy()
    return SyntheticQuadraticProblem(dims, profile, **defaults)
