import numpy as np
import pytest

from mmbopt.errors import ConfigurationError
from mmbopt.hypergrad import exact_grad_F, fixed_point_state
from mmbopt.optimizer import (
    RunConfig, hessian_momentum_update, hypergradient_estimate_v1, hypergradient_estimate_v2, init_state,
    iterations_to_threshold, moving_average, project_ball, project_dual, run, running_min, step,
    theorem_step_sizes, v_update,
)
from mmbopt.problem import DualSet, MinMaxBilevelProblem, ProblemDims, SmoothnessProfile, make_problem, synth_generate
from mmbopt.rng import RngStream

DIMS = ProblemDims(m=8, d_x=10, d_y=5)


class NonnegDual(MinMaxBilevelProblem):
    """A synthetic problem re-exposed with the dual set restricted to R_+ and no closed form."""

    dual_set = DualSet("nonneg")

    def __init__(self, inner):
        self.inner, self.dims, self.profile, self.n_samples = inner, inner.dims, inner.profile, inner.n_samples

    def exact(self, kind, block, x, alpha, y):
        return self.inner.exact(kind, block, x, alpha, y)


# -- projections and elementary updates ----------------------------------------

def test_project_dual_sets():
    a = np.array([-1.0, 2.0])
    np.testing.assert_array_equal(project_dual(a, DualSet()), a)
    np.testing.assert_array_equal(project_dual(a, DualSet("nonneg")), [0.0, 2.0])
    np.testing.assert_array_equal(project_dual([-0.5, 0.5, 1.5], DualSet("box", 0.0, 1.0)), [0.0, 0.5, 1.0])


def test_empty_box_rejected():
    with pytest.raises(ConfigurationError):
        DualSet("box", 1.0, 0.0)


def test_project_ball():
    v = np.array([0.3, -0.4])
    np.testing.assert_array_equal(project_ball(v, 1.0), v)
    np.testing.assert_allclose(project_ball([3.0, 4.0], 1.0), [0.6, 0.8], rtol=1e-15)
    np.testing.assert_array_equal(project_ball([3.0, 4.0], 0.0), [0.0, 0.0])


def test_moving_average():
    np.testing.assert_array_equal(moving_average([5.0, 1.0], [2.0, 3.0], 1.0), [2.0, 3.0])
    np.testing.assert_allclose(moving_average([1.0, 0.0], [0.0, 1.0], 0.5), [0.5, 0.5])
    z0, delta, beta = np.array([4.0, -2.0]), np.array([1.0, 1.0]), 0.3
    z = z0
    for _ in range(7):
        z = moving_average(z, delta, beta)
    np.testing.assert_allclose(z, delta + 0.7**7 * (z0 - delta), rtol=1e-14)


def test_hessian_momentum_update_cases():
    s, H = hessian_momentum_update(np.eye(3), 2 * np.eye(3), 1.0, True)
    np.testing.assert_allclose(s, 2 * np.eye(3))
    np.testing.assert_allclose(H, 0.5 * np.eye(3), atol=1e-15)
    s0, H0 = np.eye(2), np.eye(2)
    s1, H1 = hessian_momentum_update(s0, 5 * np.eye(2), 0.4, False, H0)
    assert s1 is s0 and H1 is H0


def test_hessian_momentum_geometric_contraction():
    A = synth_generate(0, ProblemDims(1, 2, 4), SmoothnessProfile()).A[0]
    s = np.eye(4)
    e0 = np.linalg.norm(s - A)
    for t in range(1, 41):
        s, H = hessian_momentum_update(s, A, 0.5, True)
        assert abs(np.linalg.norm(s - A) - 0.5**t * e0) <= 1e-10
    np.testing.assert_allclose(H @ s, np.eye(4), atol=1e-10)


def test_v_update_fixed_point_and_contraction():
    p = synth_generate(1, ProblemDims(1, 3, 4), SmoothnessProfile(L_g=4.0))
    A, g = p.A[0], np.array([0.5, -1.0, 0.2, 0.3])
    target = np.linalg.solve(A, g)
    np.testing.assert_allclose(v_update(target, A, g, 0.2, 100.0, True), target, atol=1e-14)
    assert v_update(target + 1, A, g, 0.2, 100.0, False) is not None
    np.testing.assert_array_equal(v_update(target + 1, A, g, 0.2, 100.0, False), target + 1)
    eta = 1 / 4.0
    v = np.zeros(4)
    e0 = np.linalg.norm(v - target)
    for t in range(1, 51):
        v = v_update(v, A, g, eta, 100.0, True)
        assert np.linalg.norm(v - target) <= (1 - eta * 1.0) ** t * e0 + 1e-12


# -- hypergradient estimates ---------------------------------------------------

@pytest.fixture(scope="module")
def noiseless():
    return synth_generate(3, DIMS, SmoothnessProfile(sigma=0.0))


def test_v1_estimate_at_fixed_point_is_exact(noiseless):
    x = np.random.default_rng(0).standard_normal(10)
    state = fixed_point_state(noiseless, "v1", x)
    for ipb in (True, False):
        cfg = RunConfig(block_batch=8, independent_product_batches=ipb)
        est = hypergradient_estimate_v1(noiseless, state, np.arange(8), np.random.default_rng(0), cfg)
        np.testing.assert_allclose(est, exact_grad_F(noiseless, x), rtol=0, atol=1e-10)


def test_v2_estimate_at_fixed_point_matches_v1(noiseless):
    x = np.random.default_rng(1).standard_normal(10)
    gen = np.random.default_rng(0)
    e1 = hypergradient_estimate_v1(noiseless, fixed_point_state(noiseless, "v1", x), np.arange(8), gen, RunConfig())
    e2 = hypergradient_estimate_v2(noiseless, fixed_point_state(noiseless, "v2", x), np.arange(8), gen)
    np.testing.assert_allclose(e2, e1, rtol=0, atol=1e-10)


def _scalar_state(problem, variant):
    state = init_state(problem, variant, x0=[1.0])
    state.alpha[0], state.y[0] = 0.4, 0.8
    if variant == "v1":
        state.s[0], state.H[0] = 2.0, 0.5
    else:
        state.v[0] = 0.3
    return state


def test_scalar_hand_computed_estimates():
    # grad_x f = P*alpha + M*x = 2*0.4 + 3 = 3.8; d2g/dxdy = -B = -1.5; df/dy = Q*alpha + s = 0.45
    p = make_problem(P=2.0, M=3.0, B=1.5, Q=0.5, s=0.25)
    gen = np.random.default_rng(0)
    e1 = hypergradient_estimate_v1(p, _scalar_state(p, "v1"), [0], gen, RunConfig())
    assert e1[0] == pytest.approx(3.8 + 1.5 * 0.5 * 0.45, abs=1e-14)  # 4.1375
    e2 = hypergradient_estimate_v2(p, _scalar_state(p, "v2"), [0], gen)
    assert e2[0] == pytest.approx(3.8 + 1.5 * 0.3, abs=1e-14)  # 4.25


def test_zero_coupling_drops_jacobian_term():
    rng = np.random.default_rng(4)
    p = make_problem(m=3, d_x=2, d_y=2, P=rng.standard_normal((3, 1, 2)), M=np.eye(2),
                     c=rng.standard_normal((3, 2)))
    state = init_state(p, "v1", x0=[0.5, -0.5])
    state.alpha[:] = rng.standard_normal((3, 1))
    state.s[:] = np.eye(2) * 3
    expected = np.mean([p.exact("grad_x_f", i, state.x, state.alpha[i], state.y[i]) for i in (0, 2)], axis=0)
    est = hypergradient_estimate_v1(p, state, [0, 2], np.random.default_rng(0), RunConfig())
    np.testing.assert_allclose(est, expected, atol=1e-15)
    state2 = init_state(p, "v2", x0=[0.5, -0.5])
    state2.alpha[:] = state.alpha
    est2 = hypergradient_estimate_v2(p, state2, [0, 2], np.random.default_rng(0))
    np.testing.assert_allclose(est2, expected, atol=1e-15)


# -- steps and runs --------------------------------------------------------------

def test_frozen_step_only_moves_z(noiseless):
    state = init_state(noiseless, "v2", x0=np.ones(10))
    state.alpha[:] = 0.3
    cfg = RunConfig(eta0=0.0, eta1=0.0, eta2=0.0, eta3=0.0, beta0=1.0, block_batch=8)
    new, _ = step(state, noiseless, RngStream(0), cfg, "v2")
    for name in ("x", "alpha", "y", "v"):
        np.testing.assert_array_equal(getattr(new, name), getattr(state, name))
    expected = hypergradient_estimate_v2(noiseless, state, np.arange(8), np.random.default_rng(0))
    np.testing.assert_allclose(new.z, expected, atol=1e-13)


def test_one_step_from_fixed_point(noiseless):
    x0 = np.random.default_rng(5).standard_normal(10)
    cfg = RunConfig(eta0=0.05, beta0=0.3, block_batch=8)
    for variant in ("v1", "v2"):
        state = fixed_point_state(noiseless, variant, x0)
        new, _ = step(state, noiseless, RngStream(1), cfg, variant)
        np.testing.assert_allclose(new.x, x0 - 0.05 * 0.3 * exact_grad_F(noiseless, x0), atol=1e-12)


def test_unselected_blocks_untouched():
    p = synth_generate(2, DIMS, SmoothnessProfile(sigma=0.3))
    state = init_state(p, "v1")
    state.y[:] = 1.0
    rng = RngStream(3)
    new, _ = step(state, p, rng, RunConfig(block_batch=3), "v1")
    from mmbopt.rng import sample_blocks
    chosen = set(sample_blocks(rng.child(0, "blocks"), 8, 3).tolist())
    for i in range(8):
        same = np.array_equal(new.y[i], state.y[i]) and np.array_equal(new.s[i], state.s[i])
        assert same == (i not in chosen)


def test_block_processing_order_does_not_matter():
    p = synth_generate(2, DIMS, SmoothnessProfile(sigma=0.3))
    rng = RngStream(11)
    cfg = RunConfig(block_batch=8)
    a, _ = step(init_state(p, "v1"), p, rng, cfg, "v1")
    b, _ = step(init_state(p, "v1"), p, rng, cfg, "v1", block_order=np.arange(8)[::-1])
    for name in ("x", "z", "alpha", "y", "s", "H"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_block_permutation_gives_same_trajectory(noiseless):
    perm = np.random.default_rng(0).permutation(8)
    cfg = RunConfig(eta0=0.01, block_batch=8, horizon=30)
    for variant in ("v1", "v2"):
        a = run(noiseless, cfg, variant).state.x
        b = run(noiseless.permuted(perm), cfg, variant).state.x
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-12)


def test_zero_horizon(noiseless):
    result = run(noiseless, RunConfig(horizon=0), "v1")
    assert result.trace == []
    np.testing.assert_array_equal(result.state.x, np.zeros(10))
    assert result.tau == 0


def test_psd_and_ball_invariants_along_stochastic_runs():
    p = synth_generate(4, DIMS, SmoothnessProfile(sigma=2.0))
    worst = []

    def check_s(t, state, rec):
        worst.append(min(np.linalg.eigvalsh(s)[0] for s in state.s))

    run(p, RunConfig(eta0=0.002, block_batch=3, beta1=0.7, horizon=300), "v1", [check_s])
    assert min(worst) >= p.profile.mu_g - 1e-10

    radius = 0.5
    norms = []
    run(p, RunConfig(eta0=0.002, block_batch=3, eta3=0.5, horizon=300, gamma_radius=radius), "v2",
        [lambda t, s, r: norms.append(np.linalg.norm(s.v, axis=1).max())])
    assert max(norms) <= radius * (1 + 1e-12)
    assert max(norms) == pytest.approx(radius)  # the projection is actually active


def test_dual_projection_invariant():
    p = NonnegDual(synth_generate(5, DIMS, SmoothnessProfile(sigma=0.5)))
    lows = []
    result = run(p, RunConfig(eta0=0.002, eta1=0.8, block_batch=4, horizon=200), "v1",
                 [lambda t, s, r: lows.append(s.alpha.min())])
    assert min(lows) >= 0.0
    assert result.trace[0].F is None  # no closed form: diagnostics skipped


def test_divergence_aborts():
    p = synth_generate(0, DIMS, SmoothnessProfile(sigma=0.1))
    result = run(p, RunConfig(eta0=50.0, block_batch=8, horizon=2000), "v1")
    assert result.diverged
    assert len(result.trace) < 2000 and result.state.is_finite()


def test_callback_can_stop_run(noiseless):
    result = run(noiseless, RunConfig(horizon=100), "v2", [lambda t, s, r: t == 9])
    assert result.status == "stopped" and result.state.t == 10


def test_theorem_step_sizes_scaling():
    a = theorem_step_sizes(0.1, 1.0, 2, 4, 8)
    b = theorem_step_sizes(0.1, 1.0, 4, 4, 8)
    assert b["eta0"] >= a["eta0"] and b["horizon"] <= a["horizon"]
    assert "beta1" in a and "eta3" in theorem_step_sizes(0.1, 1.0, 2, 4, 8, "v2")


def test_threshold_helpers():
    from mmbopt.optimizer import TraceRecord
    trace = [TraceRecord(0, grad_norm_sq=5.0), TraceRecord(10, grad_norm_sq=0.5), TraceRecord(20, grad_norm_sq=2.0)]
    assert iterations_to_threshold(trace, 1.0) == 10
    assert iterations_to_threshold(trace, 0.1) is None
    np.testing.assert_array_equal(running_min([3, 1, 2]), [3, 1, 1])


@pytest.mark.parametrize("bad", [dict(beta0=0.0), dict(beta1=1.5), dict(eta0=-1.0), dict(block_batch=0),
                                 dict(horizon=-1), dict(gamma_radius=-0.1)])
def test_run_config_validation(bad):
    with pytest.raises(ConfigurationError):
        RunConfig(**bad)
