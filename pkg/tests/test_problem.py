import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmbopt.errors import ConfigurationError, ContractViolation
from mmbopt.problem import (
    ORACLE_KINDS, OracleQuery, ProblemDims, SmoothnessProfile, SyntheticQuadraticProblem,
    dual_solution, exact_objective_F, lower_solution, make_problem, stochastic_oracle, synth_generate,
)

DIMS = ProblemDims(m=8, d_x=10, d_y=5)
PROFILE = SmoothnessProfile(sigma=0.1)
ARRAYS = ("A", "B", "c", "P", "Q", "r", "M", "s")


@pytest.fixture(scope="module")
def problem():
    return synth_generate(3, DIMS, PROFILE)


def _query(problem, i, x, alpha, y, b=1):
    return OracleQuery(i, x, alpha, y, np.arange(b))


def test_same_seed_is_bit_identical():
    a = synth_generate(11, DIMS, PROFILE)
    b = synth_generate(11, DIMS, PROFILE)
    for name in ARRAYS:
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = synth_generate(12, DIMS, PROFILE)
    assert not np.array_equal(a.B, c.B)


def test_scalar_lower_hessians_lie_in_interval():
    prof = SmoothnessProfile(mu_g=0.5, L_g=3.0)
    p = synth_generate(0, ProblemDims(m=20, d_x=3, d_y=1), prof)
    assert np.all(p.A >= 0.5) and np.all(p.A <= 3.0)


def test_min_eigenvalue_at_least_mu_g():
    prof = SmoothnessProfile(mu_g=0.7, L_g=2.0)
    p = synth_generate(7, ProblemDims(m=4, d_x=6, d_y=5), prof)
    eigs = np.concatenate([np.linalg.eigvalsh(a) for a in p.A])
    assert eigs.min() >= 0.7 - 1e-12
    assert eigs.max() <= 2.0 + 1e-12


def test_curvature_floor_and_indefinite_blocks():
    p = synth_generate(1, DIMS, PROFILE, min_curvature=0.5)
    assert np.linalg.eigvalsh(p.hessian_F())[0] == pytest.approx(0.5, abs=1e-10)
    # the floor is global: individual blocks stay nonconvex in x
    assert any(np.linalg.eigvalsh(m)[0] < 0 for m in p.M)


@pytest.mark.parametrize("bad", [dict(m=0, d_x=1, d_y=1), dict(m=1, d_x=0, d_y=1), dict(m=1, d_x=1, d_y=-2)])
def test_invalid_dims_rejected(bad):
    with pytest.raises(ConfigurationError):
        ProblemDims(**bad)


@pytest.mark.parametrize("bad", [dict(mu_g=5.0, L_g=4.0), dict(mu_f=-1.0), dict(sigma=-0.1), dict(mu_f=2.0, L_f=1.0)])
def test_invalid_profile_rejected(bad):
    with pytest.raises(ConfigurationError):
        SmoothnessProfile(**bad)


def test_lower_solution_identity():
    p = make_problem(d_x=2, d_y=2, B=np.eye(2))
    np.testing.assert_array_equal(lower_solution(p, 0, [1.0, 2.0]), [1.0, 2.0])


def test_lower_solution_diagonal():
    p = make_problem(d_x=2, d_y=2, A=2 * np.eye(2), c=[2.0, 2.0])
    np.testing.assert_allclose(lower_solution(p, 0, [5.0, -3.0]), [1.0, 1.0], rtol=0, atol=1e-15)


def test_lower_solution_is_optimal(problem):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal(DIMS.d_x)
        for i in range(DIMS.m):
            y = lower_solution(problem, i, x)
            assert np.linalg.norm(problem.exact("grad_y_g", i, x, None, y)) <= 1e-10


def test_dual_solution_constants_only():
    prof = SmoothnessProfile(mu_f=2.0)
    p = make_problem(profile=prof, r=2.0)
    assert dual_solution(p, 0, [0.3]) == pytest.approx(1.0)


def test_dual_solution_direct_arithmetic():
    prof = SmoothnessProfile(mu_f=2.0)
    p = make_problem(d_x=3, profile=prof, P=[[1.0, 0.0, 0.0]])
    assert dual_solution(p, 0, [1.0, 0.0, 0.0]) == pytest.approx(0.5)


def test_dual_solution_is_stationary(problem):
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal(DIMS.d_x)
        for i in range(DIMS.m):
            y, a = lower_solution(problem, i, x), dual_solution(problem, i, x)
            assert np.abs(problem.exact("grad_alpha_f", i, x, a, y)).max() <= 1e-10


def test_noiseless_oracle_equals_exact():
    p = synth_generate(2, DIMS, SmoothnessProfile(sigma=0.0))
    rng = np.random.default_rng(0)
    x, y, a = rng.standard_normal(10), rng.standard_normal(5), rng.standard_normal(1)
    for kind in ORACLE_KINDS:
        out = stochastic_oracle(p, _query(p, 3, x, a, y), kind, rng)
        np.testing.assert_array_equal(out, p.exact(kind, 3, x, a, y))


def _central(fun, z, h=1e-5):
    out = np.empty(z.size)
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = h
        out[j] = (fun(z + e) - fun(z - e)) / (2 * h)
    return out


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


def test_oracles_match_finite_differences(problem):
    """Analytic derivatives of f and g against central differences at 20 random points."""
    rng = np.random.default_rng(5)
    p = problem
    for _ in range(20):
        i = int(rng.integers(DIMS.m))
        x, y, a = rng.standard_normal(10), rng.standard_normal(5), rng.standard_normal(1)
        assert _rel(p.exact("grad_x_f", i, x, a, y), _central(lambda u: p.f(i, u, a, y), x)) <= 1e-6
        assert _rel(p.exact("grad_alpha_f", i, x, a, y), _central(lambda u: p.f(i, x, u, y), a)) <= 1e-6
        assert _rel(p.exact("grad_y_f", i, x, a, y), _central(lambda u: p.f(i, x, a, u), y)) <= 1e-6
        assert _rel(p.exact("grad_y_g", i, x, a, y), _central(lambda u: p.g(i, x, u), y)) <= 1e-6
        hess = np.stack([_central(lambda u: p.exact("grad_y_g", i, x, a, u)[k], y) for k in range(5)])
        assert _rel(p.exact("hess_yy_g", i, x, a, y), hess) <= 1e-6
        # jac_xy_g[j, k] = d/dx_j of (grad_y g)_k
        jac = np.stack([_central(lambda u: p.exact("grad_y_g", i, u, a, y)[k], x) for k in range(5)], axis=1)
        assert _rel(p.exact("jac_xy_g", i, x, a, y), jac) <= 1e-6


@pytest.mark.parametrize("kind", ["grad_x_f", "grad_alpha_f", "grad_y_f", "grad_y_g", "jac_xy_g", "hess_yy_g"])
def test_oracle_monte_carlo_mean(kind):
    sigma, N, calls = 1.0, 4, 100_000
    prof = SmoothnessProfile(mu_g=1.0, L_g=20.0, sigma=sigma)
    rng = np.random.default_rng(9)
    # spectrum far above mu_g keeps the Hessian clamp inactive, so its mean is unbiased too
    p = make_problem(d_x=2, d_y=2, profile=prof, A=[[9.0, 1.0], [1.0, 8.0]],
                     B=rng.standard_normal((2, 2)), P=rng.standard_normal((1, 2)), Q=rng.standard_normal((1, 2)),
                     M=[[1.0, 0.5], [0.5, -2.0]], s=[0.3, -0.2], c=[1.0, 0.0], r=[0.4])
    x, y, a = np.array([0.5, -1.0]), np.array([0.2, 0.1]), np.array([0.7])
    q = _query(p, 0, x, a, y, b=N)
    gen = np.random.default_rng(123)
    total = sum(p.oracle(q, kind, gen) for _ in range(calls))
    mean = total / calls
    bound = 4 * sigma / np.sqrt(N * calls)
    assert np.abs(mean - p.exact(kind, 0, x, a, y)).max() <= bound


@settings(max_examples=50, deadline=None)
@given(sigma=st.floats(0.0, 5.0), seed=st.integers(0, 2**32 - 1), b=st.integers(1, 8))
def test_hessian_oracle_is_symmetric_and_bounded_below(sigma, seed, b):
    prof = SmoothnessProfile(mu_g=1.0, L_g=1.5, sigma=sigma)
    p = synth_generate(seed % 1000, ProblemDims(2, 3, 4), prof)
    gen = np.random.default_rng(seed)
    h = p.oracle(_query(p, 1, np.zeros(3), np.zeros(1), np.zeros(4), b), "hess_yy_g", gen)
    np.testing.assert_array_equal(h, h.T)
    assert np.linalg.eigvalsh(h)[0] >= 1.0 - 1e-12


def test_oracle_contract_violations(problem):
    q = _query(problem, 0, np.zeros(10), np.zeros(1), np.zeros(5))
    with pytest.raises(ContractViolation):
        problem.oracle(q, "grad_z_f", np.random.default_rng())
    with pytest.raises(ContractViolation):
        problem.oracle(OracleQuery(8, q.x, q.alpha, q.y, q.batch), "grad_x_f", np.random.default_rng())
    with pytest.raises(ContractViolation):
        problem.oracle(OracleQuery(0, q.x, q.alpha, q.y, np.array([], dtype=int)), "grad_x_f",
                       np.random.default_rng())


def test_objective_decoupled_quadratic():
    p = make_problem(m=3, d_x=4, d_y=2, M=np.eye(4))
    x = np.array([1.0, -2.0, 0.5, 3.0])
    assert exact_objective_F(p, x) == pytest.approx(0.5 * x @ x)


def test_objective_scalar_hand_computation():
    # y = (1*2)/2 = 1, alpha = (2 + 1)/1 = 3, f = 3*3 - 9/2 - 4/2 + 1 = 3.5
    p = make_problem(A=2.0, B=1.0, P=1.0, Q=1.0, M=-1.0, s=1.0)
    assert exact_objective_F(p, [2.0]) == pytest.approx(3.5, abs=1e-14)


def test_objective_block_permutation_invariant(problem):
    x = np.random.default_rng(2).standard_normal(10)
    perm = np.random.default_rng(3).permutation(DIMS.m)
    assert exact_objective_F(problem.permuted(perm), x) == pytest.approx(exact_objective_F(problem, x), rel=1e-13)


def test_serialization_round_trip(tmp_path, problem):
    path = tmp_path / "problem.json"
    problem.save(path)
    back = SyntheticQuadraticProblem.load(path)
    assert back.dims == problem.dims and back.profile == problem.profile
    for name in ARRAYS:
        assert np.array_equal(getattr(back, name), getattr(problem, name))
