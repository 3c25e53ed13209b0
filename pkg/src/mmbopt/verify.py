"""Fast self-checks of the oracles and properties the library relies on.

Each check returns ``(ok, detail)``; :func:`verify` prints one PASS/FAIL
line per check.
"""
from __future__ import annotations

import itertools
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from .auc.metrics import metric_auc, metric_pauc
from .auc.pauc import PAUCConfig, freeze, lambda_grad, pauc_surrogate_G, solve_lambda
from .auc.scorer import Scorer
from .experiment import canonical_json, config_from_dict, run_experiment
from .hypergrad import diagnostics_report, exact_grad_F, fixed_point_state
from .optimizer import RunConfig, hessian_momentum_update, hypergradient_estimate_v1, hypergradient_estimate_v2
from .problem import ProblemDims, SmoothnessProfile, synth_generate

DIMS = ProblemDims(8, 10, 5)


def check_hypergradient_fd():
    worst = max(diagnostics_report(synth_generate(s, DIMS, SmoothnessProfile()),
                                   np.random.default_rng(s).standard_normal(10)).rel_error for s in range(5))
    return worst <= 1e-5, f"max relative error {worst:.2e}"


def check_fixed_point_estimates():
    p = synth_generate(0, DIMS, SmoothnessProfile(sigma=0.0))
    x = np.random.default_rng(0).standard_normal(10)
    g = exact_grad_F(p, x)
    gen = np.random.default_rng(0)
    e1 = hypergradient_estimate_v1(p, fixed_point_state(p, "v1", x), np.arange(8), gen, RunConfig())
    e2 = hypergradient_estimate_v2(p, fixed_point_state(p, "v2", x), np.arange(8), gen)
    err = max(np.abs(e1 - g).max(), np.abs(e2 - g).max())
    return err <= 1e-10, f"max deviation {err:.2e}"


def check_hessian_momentum():
    A = synth_generate(1, DIMS, SmoothnessProfile()).A[0]
    s = np.eye(5)
    e0, worst = np.linalg.norm(s - A), 0.0
    for t in range(1, 31):
        s, _ = hessian_momentum_update(s, A, 0.5, True)
        worst = max(worst, abs(np.linalg.norm(s - A) - 0.5 ** t * e0))
    return worst <= 1e-10, f"max deviation from 0.5^t law {worst:.2e}"


def check_metrics():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 60))
        labels = rng.choice([-1, 1], n)
        labels[:2] = [1, -1]
        scores = rng.integers(0, 6, n).astype(float)
        pos, neg = scores[labels > 0], scores[labels < 0]
        brute = sum((a > b) + 0.5 * (a == b) for a, b in itertools.product(pos, neg)) / (pos.size * neg.size)
        if metric_auc(scores, labels) != brute or metric_pauc(scores, labels, 1.0) != brute:
            return False, "mismatch with pairwise enumeration"
    ex = (metric_auc([0.9, 0.4, 0.6, 0.1], [1, 1, -1, -1]), metric_pauc([0.9, 0.4, 0.6, 0.1], [1, 1, -1, -1], 0.5))
    return ex == (0.75, 0.5), f"worked example gives {ex}"


def check_threshold():
    cfg = PAUCConfig(rho=1 / 3, tau1=1e-3, tau2=1e-6, eps=0.01)
    h = np.array([3.0, 2.0, 1.0])
    lam = solve_lambda(h, cfg)
    res = abs(lambda_grad(lam, h, cfg))
    return res <= 1e-10 and abs(lam - 2) <= 0.01, f"lambda={lam:.6f}, residual {res:.1e}"


def check_surrogate_fd():
    sc = Scorer(4, 3, 1)
    cfg = PAUCConfig(rho=0.5, tau1=0.3)
    rng = np.random.default_rng(1)
    theta = rng.standard_normal(sc.n_task_params)
    Xp, Xn = rng.standard_normal((4, 4)), rng.standard_normal((7, 4))
    args = (0.3, -0.2, 0.5, 0.1, 2.0)
    res = pauc_surrogate_G(sc, theta, *args, Xp, Xn, cfg)
    fz = freeze(sc.task_scores(theta, Xn), args[1], args[3], args[4])
    fd = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = 1e-6
        fd[j] = (pauc_surrogate_G(sc, theta + e, *args, Xp, Xn, cfg, fz).value
                 - pauc_surrogate_G(sc, theta - e, *args, Xp, Xn, cfg, fz).value) / 2e-6
    rel = np.linalg.norm(fd - res.theta) / np.linalg.norm(fd)
    return rel <= 1e-5, f"relative error {rel:.2e}"


def check_determinism():
    cfg = config_from_dict({"kind": "synthetic-v2", "seed": 3, "dims": {"m": 3, "d_x": 4, "d_y": 2},
                            "run": {"horizon": 200, "block_batch": 2}})
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp, "a"), Path(tmp, "b")
        run_experiment(cfg, a)
        run_experiment(cfg, b)
        same = (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    text = canonical_json(cfg)
    import json
    fix = canonical_json(config_from_dict(json.loads(text))) == text
    return same and fix, f"identical traces: {same}, config fixpoint: {fix}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "hypergradient vs finite differences": check_hypergradient_fd,
    "estimators exact at the fixed point": check_fixed_point_estimates,
    "hessian momentum contraction": check_hessian_momentum,
    "AUC / pAUC metrics": check_metrics,
    "threshold lower problem": check_threshold,
    "pAUC surrogate gradient": check_surrogate_fd,
    "determinism and config round trip": check_determinism,
}


def verify(echo: Callable[[str], None] = print) -> bool:
    ok_all = True
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return ok_all
