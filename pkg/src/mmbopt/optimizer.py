"""Single-loop randomized block algorithms for multi-block min-max bilevel problems.

Two variants share one iteration skeleton:

``v1``
    keeps a per-block running average ``s_i`` of stochastic lower Hessians and
    uses its inverse ``H_i`` in the hypergradient estimate.
``v2``
    keeps a per-block vector ``v_i`` that tracks ``[hess_yy g_i]^{-1} grad_y f_i``
    by projected SGD on a quadratic, so no matrix is ever inverted.

Per iteration only the sampled blocks touch their ``alpha_i``, ``y_i`` and
``s_i``/``v_i``; the primal variable moves along a moving average ``z`` of the
block-averaged hypergradient estimates.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, fields
from typing import Callable, Iterable, Literal, Optional

import numpy as np
from scipy import linalg

from . import hypergrad
from .errors import ConfigurationError, NumericalError
from .problem import DualSet, MinMaxBilevelProblem, OracleQuery
from .rng import RngStream, sample_blocks, sample_data

log = logging.getLogger(__name__)

Variant = Literal["v1", "v2"]
VARIANTS = ("v1", "v2")


@dataclass(frozen=True)
class RunConfig:
    """Step sizes, momenta, batch sizes and horizon of one run.

    ``eta3`` is only used by v2 and ``beta1`` only by v1.  ``gamma_radius``
    defaults to the problem's ``C_f / mu_g``.
    """

    eta0: float = 0.05
    eta1: float = 0.2
    eta2: float = 0.2
    eta3: float = 0.2
    beta0: float = 0.1
    beta1: float = 0.1
    block_batch: int = 1
    data_batch: int = 1
    horizon: int = 1000
    seed: int = 0
    gamma_radius: Optional[float] = None
    independent_product_batches: bool = True
    record_every: int = 10
    timing: bool = False

    def __post_init__(self):
        for name in ("eta0", "eta1", "eta2", "eta3"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"{name} must be a nonnegative finite step size, got {value!r}")
        for name in ("beta0", "beta1"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ConfigurationError(f"{name} must lie in (0, 1], got {value!r}")
        for name in ("block_batch", "data_batch", "record_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be at least 1, got {getattr(self, name)!r}")
        if int(self.horizon) < 0:
            raise ConfigurationError(f"horizon must be nonnegative, got {self.horizon!r}")
        if self.gamma_radius is not None and not self.gamma_radius >= 0:
            raise ConfigurationError(f"gamma_radius must be nonnegative, got {self.gamma_radius!r}")

    def radius(self, problem: MinMaxBilevelProblem) -> float:
        return problem.profile.gamma_radius if self.gamma_radius is None else float(self.gamma_radius)


def theorem_step_sizes(eps: float, sigma: float, block_batch: int, data_batch: int, m: int,
                       variant: Variant = "v1") -> dict:
    """Order-of-magnitude parameter choices from the convergence theorems.

    Proof constants are set to one, so the values only fix the scaling in
    ``eps``, the batch sizes and ``m``; they are not tuned step sizes.
    """
    small = min(block_batch, data_batch)
    inner = min(1.0, data_batch * eps**2 / max(sigma**2, 1e-12))
    beta0 = min(1.0, small * eps**2)
    out = {
        "eta1": inner,
        "eta2": inner,
        "beta0": beta0,
        "eta0": min(small * eps**2, data_batch * block_batch * eps**2 / m),
        "horizon": int(math.ceil(max(m / (block_batch * data_batch * eps**4), 1 / (small * eps**4)))),
    }
    if variant == "v1":
        out["beta1"] = inner
    else:
        out["eta3"] = inner
    return out


@dataclass
class State:
    """Iterate of either variant.  Block arrays carry a leading block axis."""

    x: np.ndarray
    z: np.ndarray
    alpha: np.ndarray
    y: np.ndarray
    s: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    def copy(self) -> "State":
        return State(**{f.name: (getattr(self, f.name).copy() if isinstance(getattr(self, f.name), np.ndarray)
                                 else getattr(self, f.name)) for f in fields(self)})

    def arrays(self) -> Iterable[np.ndarray]:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                yield value

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_state(problem: MinMaxBilevelProblem, variant: Variant, x0=None) -> State:
    """``x0 = 0`` (unless given), ``z0 = 0``, ``alpha0 = proj(0)``, ``y0 = 0``, ``s0 = mu_g I``, ``v0 = 0``."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    d = problem.dims
    x = np.zeros(d.d_x) if x0 is None else np.array(x0, dtype=float)
    alpha = np.stack([problem.dual_set.project(np.zeros(d.d_alpha)) for _ in range(d.m)])
    state = State(x=x, z=np.zeros(d.d_x), alpha=alpha, y=np.zeros((d.m, d.d_y)))
    mu_g = problem.profile.mu_g
    if variant == "v1":
        state.s = np.tile(mu_g * np.eye(d.d_y), (d.m, 1, 1))
        state.H = np.tile(np.eye(d.d_y) / mu_g, (d.m, 1, 1))
    else:
        state.v = np.zeros((d.m, d.d_y))
    return state


# -- elementary updates ----------------------------------------------------

def project_dual(alpha, dual_set: DualSet) -> np.ndarray:
    return dual_set.project(alpha)


def project_ball(v, gamma_radius: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if gamma_radius < 0:
        raise ConfigurationError(f"ball radius must be nonnegative, got {gamma_radius}")
    norm = np.linalg.norm(v)
    if norm <= gamma_radius:
        return v.copy()
    return (gamma_radius / norm) * v


def moving_average(z, delta, beta0: float) -> np.ndarray:
    if not 0 < beta0 <= 1:
        raise ConfigurationError(f"beta0 must lie in (0, 1], got {beta0}")
    return (1.0 - beta0) * np.asarray(z) + beta0 * np.asarray(delta)


def spd_inverse(matrix: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Hessian momentum lost positive definiteness") from exc
    L_inv = linalg.solve_triangular(L, np.eye(matrix.shape[0]), lower=True, check_finite=False)
    return L_inv.T @ L_inv


def hessian_momentum_update(s, hess_sample, beta1: float, selected: bool, H=None):
    """Running average of Hessian samples and its inverse.

    Returns ``(s', H')``.  Unselected blocks keep both ``s`` and ``H`` (``H``
    may be None when the caller does not cache it).
    """
    if not selected:
        return s, H
    s_new = (1.0 - beta1) * s + beta1 * hess_sample
    s_new = 0.5 * (s_new + s_new.T)
    return s_new, spd_inverse(s_new)


def v_update(v, hess_sample, grad_y_f_sample, eta3: float, gamma_radius: float, selected: bool) -> np.ndarray:
    if not selected:
        return v
    return project_ball(v - eta3 * (hess_sample @ v - grad_y_f_sample), gamma_radius)


# -- hypergradient estimates -------------------------------------------------

def _block_stream(rng: RngStream, t: int, block: int) -> np.random.Generator:
    return rng.child(t, int(block)).generator()


def _query(state: State, i: int, batch) -> OracleQuery:
    return OracleQuery(int(i), state.x, state.alpha[i], state.y[i], batch)


def hypergradient_estimate_v1(problem, state: State, block_batch, rng, config: RunConfig) -> np.ndarray:
    """Block average of ``grad_x f_i - jac_xy g_i H_i grad_y f_i`` from oracle samples.

    ``rng`` is a generator or a mapping ``block -> generator``.  Uses
    ``state.H`` (the inverse of the Hessian momentum before this iteration's
    update).
    """
    n = problem.n_samples
    total = np.zeros(problem.dims.d_x)
    for i in block_batch:
        gen = rng[i] if isinstance(rng, dict) else rng
        batch = sample_data(gen, n, config.data_batch)
        q = _query(state, i, batch)
        gx = problem.oracle(q, "grad_x_f", gen)
        if config.independent_product_batches:
            jac = problem.oracle(_query(state, i, sample_data(gen, n, config.data_batch)), "jac_xy_g", gen)
            gy = problem.oracle(_query(state, i, sample_data(gen, n, config.data_batch)), "grad_y_f", gen)
        else:
            jac = problem.oracle(q, "jac_xy_g", gen)
            gy = problem.oracle(q, "grad_y_f", gen)
        total += gx - jac @ (state.H[i] @ gy)
    return total / len(block_batch)


def hypergradient_estimate_v2(problem, state: State, block_batch, rng, config: RunConfig | None = None) -> np.ndarray:
    """Block average of ``grad_x f_i - jac_xy g_i v_i`` using the pre-update ``v_i``."""
    n = problem.n_samples
    b = 1 if config is None else config.data_batch
    total = np.zeros(problem.dims.d_x)
    for i in block_batch:
        gen = rng[i] if isinstance(rng, dict) else rng
        q = _query(state, i, sample_data(gen, n, b))
        total += problem.oracle(q, "grad_x_f", gen) - problem.oracle(q, "jac_xy_g", gen) @ state.v[i]
    return total / len(block_batch)


# -- one iteration -----------------------------------------------------------

@dataclass
class TraceRecord:
    iter: int
    F: Optional[float] = None
    grad_norm_sq: Optional[float] = None
    est_gap_sq: Optional[float] = None
    delta_y: Optional[float] = None
    delta_alpha: Optional[float] = None
    delta_h_or_v: Optional[float] = None
    elapsed_ms: Optional[float] = None


TRACE_COLUMNS = tuple(f.name for f in fields(TraceRecord))


def _block_update(problem, state: State, i: int, gen: np.random.Generator, config: RunConfig, variant: Variant):
    """All per-block work of one iteration, reading only the pre-iteration state.

    Returns the new block variables and the block's hypergradient term.
    """
    n = problem.n_samples
    batch = sample_data(gen, n, config.data_batch)
    q = _query(state, i, batch)
    alpha_new = project_dual(state.alpha[i] + config.eta1 * problem.oracle(q, "grad_alpha_f", gen),
                             problem.dual_set)
    y_new = state.y[i] - config.eta2 * problem.oracle(q, "grad_y_g", gen)
    hess = problem.oracle(q, "hess_yy_g", gen)
    gx = problem.oracle(q, "grad_x_f", gen)
    if variant == "v1":
        if config.independent_product_batches:
            jac = problem.oracle(_query(state, i, sample_data(gen, n, config.data_batch)), "jac_xy_g", gen)
            gy = problem.oracle(_query(state, i, sample_data(gen, n, config.data_batch)), "grad_y_f", gen)
        else:
            jac = problem.oracle(q, "jac_xy_g", gen)
            gy = problem.oracle(q, "grad_y_f", gen)
        term = gx - jac @ (state.H[i] @ gy)
        s_new, H_new = hessian_momentum_update(state.s[i], hess, config.beta1, True)
        return alpha_new, y_new, (s_new, H_new), term
    gy = problem.oracle(q, "grad_y_f", gen)
    jac = problem.oracle(q, "jac_xy_g", gen)
    term = gx - jac @ state.v[i]
    v_new = v_update(state.v[i], hess, gy, config.eta3, config.radius(problem), True)
    return alpha_new, y_new, v_new, term


def step(state: State, problem: MinMaxBilevelProblem, rng: RngStream, config: RunConfig,
         variant: Variant, diagnostics: bool = False, block_order=None) -> tuple[State, Optional[TraceRecord]]:
    """Advance one iteration.  Returns ``(new_state, record)``.

    ``record`` is None unless ``diagnostics`` is set and the problem has a
    closed form.  ``block_order`` permutes the processing order of the
    sampled blocks (results do not depend on it).
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    t = state.t
    blocks = sample_blocks(rng.child(t, "blocks"), problem.dims.m, config.block_batch)
    order = blocks if block_order is None else np.asarray(block_order)
    results = {int(i): _block_update(problem, state, int(i), _block_stream(rng, t, i), config, variant)
               for i in order}

    new = state.copy()
    delta = np.zeros_like(state.x)
    for i in sorted(results):
        alpha_i, y_i, extra, term = results[i]
        new.alpha[i], new.y[i] = alpha_i, y_i
        if variant == "v1":
            new.s[i], new.H[i] = extra
        else:
            new.v[i] = extra
        delta += term
    delta /= len(results)
    new.z = moving_average(state.z, delta, config.beta0)
    new.x = state.x - config.eta0 * new.z
    new.t = t + 1

    record = None
    if diagnostics and problem.has_closed_form:
        record = diagnose(problem, state, new.z, variant)
    return new, record


def diagnose(problem, state: State, z_next, variant: Variant) -> TraceRecord:
    """Exact diagnostics at ``state.x`` with the freshly updated estimator ``z_next``."""
    grad = hypergrad.exact_grad_F(problem, state.x)
    dy, da, dh = hypergrad.delta_errors(problem, state, variant)
    gap = grad - z_next
    return TraceRecord(iter=state.t, F=problem.objective(state.x), grad_norm_sq=float(grad @ grad),
                       est_gap_sq=float(gap @ gap), delta_y=dy, delta_alpha=da, delta_h_or_v=dh)


# -- full run ------------------------------------------------------------------

@dataclass
class RunResult:
    trace: list[TraceRecord]
    state: State
    status: str = "ok"
    tau: Optional[int] = None
    x_tau: Optional[np.ndarray] = None
    wall_ms: float = 0.0

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


Callback = Callable[[int, State, Optional[TraceRecord]], Optional[bool]]


def run(problem: MinMaxBilevelProblem, config: RunConfig, variant: Variant = "v1",
        callbacks: Iterable[Callback] = (), state: State | None = None) -> RunResult:
    """Run ``config.horizon`` iterations from ``state`` (default :func:`init_state`).

    Diagnostics are recorded every ``config.record_every`` iterations and at
    the last one.  Any non-finite iterate stops the run with status
    ``"diverged"``; the offending iteration is still recorded.  An output
    iterate index ``tau`` is drawn uniformly from ``0..horizon`` and its
    primal point is kept in ``x_tau``.  A callback returning a truthy value
    ends the run early with status ``"stopped"``.
    """
    state = init_state(problem, variant) if state is None else state.copy()
    callbacks = list(callbacks)
    rng = RngStream(int(config.seed))
    T = int(config.horizon)
    tau = int(rng.child("tau").generator().integers(0, T + 1))
    x_tau = state.x.copy() if tau == 0 else None
    trace: list[TraceRecord] = []
    status = "ok"
    start = time.perf_counter()
    for t in range(T):
        want = t % config.record_every == 0 or t == T - 1
        # overflow is caught by the finiteness guard below
        with np.errstate(over="ignore", invalid="ignore"):
            new, record = step(state, problem, rng, config, variant, diagnostics=want)
        if record is None and want:
            record = TraceRecord(iter=t)
        if not new.is_finite():
            status = "diverged"
            if record is None:
                record = TraceRecord(iter=t)
            _stamp(record, start, config)
            trace.append(record)
            log.warning("non-finite iterate at t=%d; aborting run", t)
            break
        if record is not None:
            _stamp(record, start, config)
            trace.append(record)
        state = new
        if state.t == tau:
            x_tau = state.x.copy()
        if any([cb(t, state, record) for cb in callbacks]):
            status = "stopped"
            break
    wall = (time.perf_counter() - start) * 1e3
    return RunResult(trace, state, status, tau, x_tau, wall)


def _stamp(record: TraceRecord, start: float, config: RunConfig) -> None:
    if config.timing:
        record.elapsed_ms = (time.perf_counter() - start) * 1e3


def running_min(values) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(values, dtype=float))


def iterations_to_threshold(trace: list[TraceRecord], threshold: float) -> Optional[int]:
    """First recorded iteration whose running-min ``grad_norm_sq`` is at most ``threshold``."""
    best = math.inf
    for rec in trace:
        if rec.grad_norm_sq is not None:
            best = min(best, rec.grad_norm_sq)
            if best <= threshold:
                return rec.iter
    return None
