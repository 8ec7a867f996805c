import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ope_dope.attack import (
    AttackConfig,
    AttackError,
    AttackResult,
    _Evaluator,
    budget_size,
    dope_attack,
    fgsm_attack,
    line_search,
    optimal_delta,
    percent_error,
    project_ball,
    projected_dope,
    random_attack,
    random_dope,
    run_attack,
    sample_ball,
    select_influential_set,
)
from ope_dope.estimators import EstimatorSettings
from ope_dope.influence import fit_method, influence_scores, loss_input_gradient

from oracles import chain_instance

NORMS = (1.0, 2.0, np.inf)


def _dual(p):
    return {1.0: np.inf, 2.0: 2.0, np.inf: 1.0}[p]


# ------------------------------------------------------------ selection


def test_select_examples():
    np.testing.assert_array_equal(select_influential_set(np.array([3.0, 1.0, 2.0]), 2 / 3), [0, 2])
    np.testing.assert_array_equal(select_influential_set(np.ones(10), 0.3), [0, 1, 2])
    np.testing.assert_array_equal(select_influential_set(np.arange(5.0), 1.0), np.arange(5))
    assert select_influential_set(np.arange(5.0), 0.0).size == 0
    assert select_influential_set(np.arange(5.0), 0.01).size == 1


def test_budget_size_rounding():
    assert budget_size(0.07, 100) == 7
    assert budget_size(0.05, 1500) == 75
    assert budget_size(0.051, 100) == 6
    assert budget_size(1.0, 3) == 3


# --------------------------------------------------------- optimal delta


def test_optimal_delta_examples():
    d = optimal_delta(np.array([1.0, -2.0]), 0.5, np.inf)
    np.testing.assert_array_equal(d, [0.5, -0.5])
    assert np.array([1.0, -2.0]) @ d == 1.5
    np.testing.assert_allclose(optimal_delta(np.array([3.0, 4.0]), 1.0, 2), [0.6, 0.8])
    I = np.array([1.0, -3.0])
    d = optimal_delta(I, 1.0, 1)
    np.testing.assert_array_equal(d, [0.0, -1.0])
    extremes = [s * np.eye(2)[j] for j in range(2) for s in (1, -1)]
    assert I @ d == 3.0 == max(I @ e for e in extremes)
    np.testing.assert_array_equal(optimal_delta(np.zeros(3), 1.0, 2), 0.0)
    np.testing.assert_array_equal(optimal_delta(np.array([2.0, -2.0]), 1.0, 1), [1.0, 0.0])


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(NORMS), st.floats(0.0, 5.0))
def test_optimal_delta_dual_norm_identity(seed, p, eps):
    rng = np.random.default_rng(seed)
    I = rng.normal(size=rng.integers(1, 6)) * rng.exponential()
    d = optimal_delta(I, eps, p)
    assert np.linalg.norm(d, ord=p) <= eps * (1 + 1e-12)
    assert I @ d == pytest.approx(eps * np.linalg.norm(I, ord=_dual(p)), rel=1e-10, abs=1e-12)
    # no feasible sample beats it
    cand = sample_ball(rng, 500, I.size, eps, p)
    assert np.max(cand @ I) <= I @ d + 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(NORMS), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, p, c):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(12, 3))
    norms = np.linalg.norm(scores, ord=_dual(p), axis=1)
    np.testing.assert_array_equal(select_influential_set(norms, 0.25),
                                  select_influential_set(norms * c, 0.25))
    np.testing.assert_allclose(optimal_delta(scores, 0.7, p), optimal_delta(c * scores, 0.7, p), rtol=1e-12)


# ------------------------------------------------------------ projection


def _cvx_project(v, eps, p):
    import cvxpy as cp
    x = cp.Variable(v.size)
    prob = cp.Problem(cp.Minimize(cp.sum_squares(x - v)), [cp.norm(x, p) <= eps])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return x.value


@pytest.mark.parametrize("seed", range(8))
def test_project_l1_matches_qp(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=6) * 2
    eps = 0.8
    np.testing.assert_allclose(project_ball(v, eps, 1), _cvx_project(v, eps, 1), atol=1e-8)


def test_project_examples():
    v = np.array([0.1, -0.2])
    for p in NORMS:
        np.testing.assert_array_equal(project_ball(v, 1.0, p), v)
    np.testing.assert_array_equal(project_ball(np.array([3.0, -0.5, -7.0]), 1.0, np.inf), [1.0, -0.5, -1.0])
    np.testing.assert_allclose(project_ball(np.array([3.0, 4.0]), 1.0, 2), [0.6, 0.8])
    np.testing.assert_array_equal(project_ball(np.array([3.0, 4.0]), 0.0, 1), [0.0, 0.0])


# -------------------------------------------------------------- sampling


def test_sample_ball_statistics():
    rng = np.random.default_rng(0)
    n = 10_000
    for p in NORMS:
        x = sample_ball(rng, n, 3, 0.5, p)
        assert np.all(np.linalg.norm(x, ord=p, axis=1) <= 0.5 + 1e-12)
    x = sample_ball(rng, n, 2, 0.5, np.inf)
    from scipy import stats
    assert stats.kstest(x[:, 0], stats.uniform(-0.5, 1.0).cdf).pvalue > 1e-3
    # l2 in R^2: radius^2 / eps^2 is uniform
    x = sample_ball(rng, n, 2, 0.5, 2)
    assert stats.kstest((np.linalg.norm(x, axis=1) / 0.5) ** 2, "uniform").pvalue > 1e-3
    # l1 in R^1 is uniform on [-eps, eps]
    x = sample_ball(rng, n, 1, 0.5, 1)
    assert stats.kstest(x[:, 0], stats.uniform(-0.5, 1.0).cdf).pvalue > 1e-3
    # l1 in R^2: |x1| + |x2| has density 2t on [0, 1] after scaling
    x = sample_ball(rng, n, 2, 0.5, 1)
    assert stats.kstest((np.abs(x).sum(axis=1) / 0.5) ** 2, "uniform").pvalue > 1e-3


def test_sample_ball_seeded():
    a = sample_ball(np.random.default_rng(3), 5, 2, 1.0, 1)
    b = sample_ball(np.random.default_rng(3), 5, 2, 1.0, 1)
    np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------ config etc


def test_config_validation():
    for bad in (dict(epsilon=-1, alpha=0.1), dict(epsilon=1, alpha=1.5), dict(epsilon=1, alpha=0.1, p=3),
                dict(epsilon=1, alpha=0.1, direction=0), dict(epsilon=1, alpha=0.1, resolution=0)):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_percent_error():
    assert percent_error(-2.0, -3.0) == -50.0
    assert percent_error(4.0, 5.0) == 25.0
    with pytest.raises(AttackError):
        percent_error(0.0, 1.0)


# ---------------------------------------------------------- line search


class _ToyEvaluator:
    """rho(beta delta) = v0 + a . delta - b |delta|^2 without refits."""

    def __init__(self, a, b, v0=1.0):
        self.a, self.b, self.v_org = np.asarray(a), b, v0
        self.n_refits = 0

    def value(self, delta):
        self.n_refits += 1
        x = delta.reshape(-1)
        return self.v_org + self.a @ x - self.b * x @ x


def test_line_search_zero_delta():
    ev = _ToyEvaluator([1.0], 0.0)
    assert line_search(ev, np.zeros((1, 1))) == (0.0, 1.0)
    assert ev.n_refits == 0


def test_line_search_monotone_toy_accepts_full_step():
    ev = _ToyEvaluator([1.0, 1.0], 0.01)
    beta, v = line_search(ev, np.ones((2, 1)))
    assert beta == 1.0 and v == pytest.approx(2.98)


def test_line_search_overshoot_backs_off():
    # error positive only for small beta: 0.5 beta - beta^2 > 0 needs beta < 0.5
    ev = _ToyEvaluator([0.5], 1.0)
    beta, _ = line_search(ev, np.ones((1, 1)), resolution=20)
    assert beta == pytest.approx(0.45)


def test_line_search_threshold_and_direction():
    ev = _ToyEvaluator([1.0], 0.0)
    # error at beta is 100 beta; threshold 60 => largest grid point is 1.0, beta=0.6 fails (> not >=)
    beta, _ = line_search(ev, np.ones((1, 1)), 1, 10, min_threshold=60.0)
    assert beta == 1.0
    beta, v = line_search(ev, np.ones((1, 1)), 1, 10, min_threshold=150.0)
    assert beta == 0.0 and v == 1.0
    beta, _ = line_search(ev, np.ones((1, 1)), -1, 10)
    assert beta == 0.0


# --------------------------------------------------------------- attacks


@pytest.fixture(scope="module")
def chain():
    ds, pi = chain_instance(21, n_episodes=10, horizon=6, jitter=0.05)
    return ds, pi


ATTACK_FNS = (dope_attack, random_dope, projected_dope, random_attack, fgsm_attack)


@pytest.mark.parametrize("fn", ATTACK_FNS)
def test_zero_budget_gives_zero_error(chain, fn):
    ds, pi = chain
    for cfg in (AttackConfig(0.0, 0.2), AttackConfig(0.5, 0.0)):
        res = fn(ds, "pdis", "features", cfg, pi)
        assert res.pct_error == 0.0
        assert not np.any(res.delta)


def _check_invariants(res: AttackResult, cfg: AttackConfig, n):
    nz = np.flatnonzero(np.any(res.delta != 0, axis=1))
    assert nz.size <= budget_size(cfg.alpha, n)
    assert set(nz) <= set(res.selected.tolist())
    assert np.all(np.linalg.norm(res.delta, ord=cfg.p, axis=1) <= cfg.epsilon * (1 + 1e-12))


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["dope", "random", "random-dope", "fgsm", "projected-dope"]),
       st.sampled_from(["brm", "wis", "pdis", "cpdis", "dr", "wdr"]),
       st.sampled_from(["features", "rewards"]),
       st.sampled_from(NORMS), st.sampled_from([1, -1]),
       st.floats(0.01, 1.0), st.floats(0.0, 0.5), st.integers(0, 100))
def test_budget_sparsity_and_direction(attack, method, target, p, direction, eps, alpha, seed):
    ds, pi = chain_instance(seed % 7, n_episodes=4, horizon=4, jitter=0.05)
    cfg = AttackConfig(eps, alpha, p, direction, resolution=5, seed=seed)
    res = run_attack(attack, ds, method, target, cfg, pi)
    _check_invariants(res, cfg, ds.n)
    if attack in ("dope", "random-dope", "projected-dope"):
        assert direction * (res.v_pert - res.v_org) >= 0


def test_dope_uses_top_influence_set(chain):
    ds, pi = chain
    cfg = AttackConfig(0.3, 0.1, 1, -1)
    res = dope_attack(ds, "brm", "features", cfg, pi)
    rep = influence_scores("brm", ds, "features", pi, p=1)
    expected = select_influential_set(rep, 0.1)
    np.testing.assert_array_equal(res.selected, expected)
    np.testing.assert_allclose(res.delta[expected], res.beta * optimal_delta(-rep.scores[expected], 0.3, 1))
    assert res.pct_error < 0


def test_prepared_matches_fresh(chain):
    ds, pi = chain
    cfg = AttackConfig(0.3, 0.1, 2, 1)
    fitted = fit_method(ds, "wdr", pi)
    rep = influence_scores(fitted, target="features", p=2)
    a = dope_attack(ds, "wdr", "features", cfg, pi)
    b = dope_attack(ds, "wdr", "features", cfg, pi, prepared=(fitted, rep))
    np.testing.assert_array_equal(a.delta, b.delta)
    assert a.v_pert == b.v_pert


def test_random_dope_full_set_matches_dope(chain):
    ds, pi = chain
    cfg = AttackConfig(0.2, 1.0, np.inf, 1, seed=5)
    a, b = dope_attack(ds, "pdis", "features", cfg, pi), random_dope(ds, "pdis", "features", cfg, pi)
    np.testing.assert_array_equal(a.selected, b.selected)
    np.testing.assert_array_equal(a.delta, b.delta)


@pytest.mark.parametrize("fn", [random_dope, random_attack])
def test_seeded_reproducibility(chain, fn):
    ds, pi = chain
    cfg = AttackConfig(0.2, 0.1, 1, 1, seed=9)
    a, b = fn(ds, "wis", "features", cfg, pi), fn(ds, "wis", "features", cfg, pi)
    np.testing.assert_array_equal(a.delta, b.delta)
    c = fn(ds, "wis", "features", AttackConfig(0.2, 0.1, 1, 1, seed=10), pi)
    assert not np.array_equal(a.selected, c.selected) or not np.array_equal(a.delta, c.delta)


def test_random_attack_has_no_line_search(chain):
    ds, pi = chain
    res = random_attack(ds, "brm", "features", AttackConfig(0.2, 0.1, seed=1), pi)
    assert res.beta == 1.0 and res.n_refits == 1


def test_fgsm_brm_rewards_gradient_by_hand():
    ds, pi = chain_instance(0, n_episodes=1, horizon=2)
    f = fit_method(ds, "brm", pi)
    A = f.fm.Phi - f.fm.gamma * f.fm.PhiNext
    expected = -2 * (A @ f.q.eta - f.fm.rewards)
    np.testing.assert_allclose(loss_input_gradient(f, "rewards")[:, 0], expected, rtol=1e-12)


@pytest.mark.parametrize("method", ["brm", "wis", "dr"])
def test_fgsm_ascends_loss(chain, method):
    from ope_dope.influence import loss_grad_hessian  # noqa: F401
    from ope_dope.attack import perturb
    from ope_dope.estimators import cel_loss, msbr_loss
    from ope_dope.data import build_feature_matrices
    ds, pi = chain
    f = fit_method(ds, method, pi)

    def loss(d):
        P = d.n_actions * d.d
        out, off = 0.0, 0
        if f.behavior is not None:
            out += cel_loss(f.theta[:P], d.states, d.actions, d.n_actions, 1e-2)
            off = P
        if f.q is not None:
            out += msbr_loss(f.theta[off:off + P], build_feature_matrices(d, pi), 1e-2)
        return out

    res = fgsm_attack(ds, method, "features", AttackConfig(1e-3, 0.2, 2), pi)
    assert loss(perturb(ds, "features", res.delta)) >= loss(ds)


def test_projected_dope_interior_uses_raw_influence(chain):
    ds, pi = chain
    rep = influence_scores("pdis", ds, "features", pi, p=2)
    big = 10 * np.abs(rep.scores).max() + 1.0
    cfg = AttackConfig(big * 10, 0.1, 2, 1)
    res = projected_dope(ds, "pdis", "features", cfg, pi)
    sel = res.selected
    if res.beta > 0:
        np.testing.assert_allclose(res.delta[sel], res.beta * rep.scores[sel])


def test_iterations_never_reduce_error(chain):
    ds, pi = chain
    one = dope_attack(ds, "brm", "features", AttackConfig(0.3, 0.1, 1, -1), pi)
    three = dope_attack(ds, "brm", "features", AttackConfig(0.3, 0.1, 1, -1, iterations=3), pi)
    assert -three.pct_error >= -one.pct_error - 1e-9
    assert np.all(np.linalg.norm(three.delta, ord=1, axis=1) <= 0.3 + 1e-12)


def test_unknown_attack(chain):
    ds, pi = chain
    with pytest.raises(ValueError):
        run_attack("pgd", ds, "brm", "features", AttackConfig(0.1, 0.1), pi)


def test_evaluator_counts_refits(chain):
    ds, pi = chain
    ev = _Evaluator(ds, "brm", "rewards", pi, EstimatorSettings())
    assert ev.value(np.zeros((ds.n, 1))) == ev.v_org and ev.n_refits == 0
    d = np.zeros((ds.n, 1))
    d[0] = 1.0
    ev.value(d)
    assert ev.n_refits == 1
