"""Multi-task AUC training with the randomized block scheme.

``auc-ct``
    compositional AUC: each task's lower variable ``u_k`` tracks one
    cross-entropy gradient step from the shared parameters.  The lower Hessian
    is the identity, so no curvature is tracked.
``pauc``
    partial AUC: each task's lower variable is the scalar threshold
    ``lambda_k`` with a scalar Hessian momentum ``H_k``.

Blocks are tasks.  Per iteration a task batch is drawn and, for each sampled
task, a per-class data batch of ``data_batch`` positives and ``data_batch``
negatives (with replacement).  Dual variables stay in ``R_+``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Optional

import numpy as np

from ..errors import ConfigurationError
from ..optimizer import RunConfig, TraceRecord, moving_average
from ..rng import RngStream, sample_blocks, sample_from
from .data import TaskDataset
from .losses import auc_minmax_loss, ce_hvp, compositional_lower_step
from .metrics import metric_auc, metric_pauc
from .pauc import PAUCConfig, lambda_grad, lambda_hess, pauc_objective, pauc_surrogate_G, solve_lambda
from .scorer import Scorer

log = logging.getLogger(__name__)

App = Literal["auc-ct", "pauc"]
APPS = ("auc-ct", "pauc")


@dataclass(frozen=True)
class AppConfig:
    """Application constants.  ``eta_tilde`` and ``exact_hvp`` only affect ``auc-ct``;
    ``pauc`` carries the threshold-problem constants."""

    hidden: int = 8
    init_scale: float = 0.1
    margin: float = 1.0
    eta_tilde: float = 0.1
    exact_hvp: bool = False
    pauc: PAUCConfig = field(default_factory=PAUCConfig)

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigurationError(f"hidden must be positive, got {self.hidden}")
        if not self.eta_tilde >= 0:
            raise ConfigurationError(f"eta_tilde must be nonnegative, got {self.eta_tilde}")


@dataclass
class AUCState:
    w: np.ndarray
    a: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    z: np.ndarray
    u: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    t: int = 0

    def copy(self) -> "AUCState":
        def c(v):
            return None if v is None else v.copy()
        return AUCState(self.w.copy(), self.a.copy(), self.b.copy(), self.alpha.copy(), self.z.copy(),
                        c(self.u), c(self.lam), c(self.H), self.t)

    def primal(self) -> np.ndarray:
        return np.concatenate([self.w, self.a, self.b])

    def set_primal(self, x) -> None:
        n, m = self.w.size, self.a.size
        self.w, self.a, self.b = x[:n].copy(), x[n:n + m].copy(), x[n + m:].copy()

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in (self.w, self.a, self.b, self.alpha, self.z, self.u, self.lam,
                                                     self.H) if v is not None)


def init_auc_state(app: App, data: TaskDataset, scorer: Scorer, cfg: AppConfig, seed: int) -> AUCState:
    """Random small scorer weights; ``u_k`` starts at the task parameters, ``lambda_k`` at the
    exact threshold of the initial scores and ``H_k`` at the threshold curvature there."""
    if app not in APPS:
        raise ConfigurationError(f"unknown application {app!r}")
    m = data.m
    w = scorer.init_params(RngStream(seed, ("init",)).generator(), cfg.init_scale)
    state = AUCState(w, np.zeros(m), np.zeros(m), np.zeros(m), np.zeros(scorer.n_params + 2 * m))
    if app == "auc-ct":
        state.u = np.stack([scorer.task_params(w, k) for k in range(m)])
    else:
        state.lam, state.H = np.empty(m), np.empty(m)
        for k in range(m):
            task = data[k]
            hn = scorer.scores(w, task.X[task.neg], k)
            state.lam[k] = solve_lambda(hn, cfg.pauc)
            state.H[k] = lambda_hess(state.lam[k], hn, cfg.pauc)
    return state


def _batch(task, gen, b):
    pos = sample_from(gen, task.pos, b)
    neg = sample_from(gen, task.neg, b)
    return task.X[pos], task.X[neg]


def _ct_task(state, k, data, scorer, run_cfg, cfg, gen):
    Xp, Xn = _batch(data[k], gen, run_cfg.data_batch)
    X = np.vstack([Xp, Xn])
    y = np.concatenate([np.ones(len(Xp)), -np.ones(len(Xn))])
    theta = scorer.task_params(state.w, k)
    loss = auc_minmax_loss(scorer, state.u[k], state.a[k], state.b[k], state.alpha[k], X, y, cfg.margin)
    alpha_new = max(0.0, state.alpha[k] + run_cfg.eta1 * loss.alpha)
    u_new = compositional_lower_step(scorer, theta, state.u[k], X, y, run_cfg.eta2, cfg.eta_tilde)
    g = loss.theta
    if cfg.exact_hvp:
        g = g - cfg.eta_tilde * ce_hvp(scorer, theta, X, y, loss.theta)
    return alpha_new, u_new, g, loss.a, loss.b


def _pauc_task(state, k, data, scorer, run_cfg, cfg, gen):
    task = data[k]
    Xp, Xn = _batch(task, gen, run_cfg.data_batch)
    theta = scorer.task_params(state.w, k)
    hn = scorer.task_scores(theta, Xn)
    lam, H = state.lam[k], state.H[k]
    sur = pauc_surrogate_G(scorer, theta, state.a[k], state.b[k], state.alpha[k], lam, H, Xp, Xn, cfg.pauc)
    alpha_new = max(0.0, state.alpha[k] + run_cfg.eta1 * sur.alpha)
    lam_new = lam - run_cfg.eta2 * lambda_grad(lam, hn, cfg.pauc, task.n_minus)
    H_new = (1 - run_cfg.beta1) * H + run_cfg.beta1 * lambda_hess(lam, hn, cfg.pauc)
    return alpha_new, (lam_new, H_new), sur.theta, sur.a, sur.b


def app_step(app: App, state: AUCState, data: TaskDataset, scorer: Scorer, rng: RngStream,
             run_cfg: RunConfig, cfg: AppConfig) -> AUCState:
    """One iteration: per-task dual ascent and lower-level updates from the pre-iteration state,
    block-averaged gradient estimate, moving average and primal step."""
    if app not in APPS:
        raise ConfigurationError(f"unknown application {app!r}")
    t, m, n = state.t, data.m, scorer.n_params
    tasks = sample_blocks(rng.child(t, "blocks"), m, run_cfg.block_batch)
    work = _ct_task if app == "auc-ct" else _pauc_task
    new = state.copy()
    delta = np.zeros_like(state.z)
    for k in tasks:
        k = int(k)
        alpha_k, lower, g, ga, gb = work(state, k, data, scorer, run_cfg, cfg, rng.child(t, k).generator())
        new.alpha[k] = alpha_k
        if app == "auc-ct":
            new.u[k] = lower
        else:
            new.lam[k], new.H[k] = lower
        delta[:n] += scorer.embed(g, k)
        delta[n + k] += ga
        delta[n + m + k] += gb
    delta /= len(tasks)
    new.z = moving_average(state.z, delta, run_cfg.beta0)
    new.set_primal(state.primal() - run_cfg.eta0 * new.z)
    new.t = t + 1
    return new


def evaluate(app: App, state: AUCState, data: TaskDataset, scorer: Scorer, cfg: AppConfig) -> tuple[float, float]:
    """Task-averaged full-data ``(objective, metric)``: AUC for ``auc-ct``, pAUC at ``cfg.pauc.rho`` otherwise."""
    objs, mets = [], []
    for k in range(data.m):
        task = data[k]
        theta = scorer.task_params(state.w, k)
        s = scorer.task_scores(theta, task.X)
        if app == "auc-ct":
            objs.append(auc_minmax_loss(scorer, theta, state.a[k], state.b[k], state.alpha[k], task.X, task.y,
                                        cfg.margin).value)
            mets.append(metric_auc(s, task.y))
        else:
            objs.append(pauc_objective(scorer, theta, state.a[k], state.b[k], state.alpha[k], task.X, task.y,
                                       cfg.pauc))
            mets.append(metric_pauc(s, task.y, cfg.pauc.rho))
    return float(np.mean(objs)), float(np.mean(mets))


@dataclass
class AppResult:
    trace: list[TraceRecord]
    metrics: list[tuple[int, float]]
    state: AUCState
    status: str = "ok"
    wall_ms: float = 0.0

    @property
    def final_metric(self) -> Optional[float]:
        return self.metrics[-1][1] if self.metrics else None


def run_app(app: App, data: TaskDataset, run_cfg: RunConfig, cfg: AppConfig = AppConfig(),
            callbacks: Iterable[Callable] = (), state: AUCState | None = None) -> AppResult:
    """Train for ``run_cfg.horizon`` iterations.

    Every ``record_every`` iterations (and at the last) the full-data
    objective goes to the trace's ``F`` column and the training metric to
    ``metrics``.  Callbacks receive ``(t, state, metric_or_None)``; a truthy
    return stops the run.
    """
    scorer = Scorer(data.d, cfg.hidden, data.m)
    if run_cfg.block_batch > data.m:
        raise ConfigurationError(f"block_batch {run_cfg.block_batch} exceeds the {data.m} tasks")
    state = init_auc_state(app, data, scorer, cfg, run_cfg.seed) if state is None else state.copy()
    rng = RngStream(int(run_cfg.seed))
    T = int(run_cfg.horizon)
    trace, metrics, status = [], [], "ok"
    start = time.perf_counter()
    for t in range(T):
        state = app_step(app, state, data, scorer, rng, run_cfg, cfg)
        if not state.is_finite():
            trace.append(TraceRecord(iter=t))
            status = "diverged"
            log.warning("non-finite iterate at t=%d; aborting run", t)
            break
        metric = None
        if t % run_cfg.record_every == 0 or t == T - 1:
            obj, metric = evaluate(app, state, data, scorer, cfg)
            rec = TraceRecord(iter=t, F=obj)
            if run_cfg.timing:
                rec.elapsed_ms = (time.perf_counter() - start) * 1e3
            trace.append(rec)
            metrics.append((t, metric))
        if any([cb(t, state, metric) for cb in callbacks]):
            status = "stopped"
            break
    return AppResult(trace, metrics, state, status, (time.perf_counter() - start) * 1e3)
