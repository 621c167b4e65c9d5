import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imoc import oracle
from imoc.mdp import build_test_mdp


def instance(seed, n_states=5, n_opt=2):
    rng = np.random.default_rng(seed)
    mdp = build_test_mdp("random", n_states, rng)
    return mdp, oracle.random_option_params(n_states, n_opt, mdp.n_actions, rng)


def test_option_transition_rows_are_distributions():
    mdp, params = instance(0)
    model = oracle.build_model(mdp, params)
    assert np.allclose(model.p_option.sum(-1), 1.0)
    assert np.allclose(model.arrival.sum(-1), 1.0)


def test_always_terminating_option():
    mdp, params = instance(1)
    params = params.with_logits(np.full_like(params.beta_logits, 40.0))
    p = oracle.exact_option_transition(mdp, params, 0)
    assert np.allclose(p, oracle.policy_kernel(mdp, params.pi[0]))
    a = oracle.exact_option_transition(mdp, params, 0, first_step=False)
    assert np.allclose(a, np.eye(mdp.n_states))


def test_first_step_factorization():
    mdp, params = instance(2)
    a = oracle.exact_option_transition(mdp, params, 1, first_step=False)
    p = oracle.exact_option_transition(mdp, params, 1)
    assert np.allclose(p, oracle.policy_kernel(mdp, params.pi[1]) @ a)


def test_nonterminating_option_raises():
    mdp, params = instance(3)
    params = params.with_logits(np.full_like(params.beta_logits, -800.0))
    with pytest.raises(oracle.NonTerminatingOption):
        oracle.exact_option_transition(mdp, params, 0)


def test_simulation_matches_exact_transition():
    mdp, params = instance(4)
    rng = np.random.default_rng(0)
    n = 40_000
    emp = oracle.empirical_option_transition(mdp, params, 1, 2, n, rng)
    exact = oracle.exact_option_transition(mdp, params, 1)[2]
    se = np.sqrt(exact * (1 - exact) / n)
    assert np.all(np.abs(emp - exact) <= 5 * se + 1e-12)


def test_stationary_start_distribution_is_fixed_point():
    mdp, params = instance(5)
    model = oracle.build_model(mdp, params)
    assert np.allclose(model.d_start @ model.p_marginal, model.d_start)
    assert model.d_start.sum() == pytest.approx(1.0)


def test_identical_options_have_zero_mi():
    mdp, params = instance(6)
    same = oracle.TabularOptionParams(np.repeat(params.beta_logits[:1], 2, 0),
                                      np.repeat(params.pi[:1], 2, 0), params.mu)
    assert oracle.exact_conditional_mi(oracle.build_model(mdp, same)) == pytest.approx(0.0, abs=1e-12)


def test_inverse_model_is_posterior():
    mdp, params = instance(7, n_opt=3)
    model = oracle.build_model(mdp, params)
    inv = oracle.exact_inverse_model(model)
    assert np.allclose(np.nansum(inv, 0), 1.0)


def test_plugin_mi_converges_to_exact():
    mdp, params = instance(8, n_states=4)
    model = oracle.build_model(mdp, params)
    ex = oracle.simulate_options(mdp, params, model.d_start, 200_000, np.random.default_rng(1))
    est = oracle.plugin_conditional_mi(ex.x_s, ex.o, ex.x_f, mdp.n_states, params.n_options)
    assert est == pytest.approx(oracle.exact_conditional_mi(model), abs=5e-3)


@pytest.mark.parametrize("first_step", [True, False])
def test_termination_gradient_theorem(first_step):
    mdp, params = instance(9)
    for o in range(params.n_options):
        assert oracle.check_termination_gradient_theorem(mdp, params, o, first_step=first_step) < 1e-7


@pytest.mark.parametrize("first_step", [True, False])
def test_entropy_gradients_match_finite_differences(first_step):
    mdp, params = instance(10, n_opt=3)
    d = oracle.build_model(mdp, params, first_step=first_step).d_start
    g_marg, g_cond = oracle.exact_entropy_gradients(mdp, params, d, first_step)

    def ent(flat):
        p = params.with_logits(flat.reshape(params.beta_logits.shape))
        return np.array(oracle.conditional_entropies(oracle.build_model(mdp, p, d, first_step)))

    fd = oracle.finite_difference(ent, params.beta_logits.ravel())
    assert np.allclose(fd[:, 0], g_marg.ravel(), atol=1e-7)
    assert np.allclose(fd[:, 1], g_cond.ravel(), atol=1e-7)


def test_estimators_are_unbiased_at_moderate_n():
    mdp, params = instance(11, n_states=4)
    d = oracle.build_model(mdp, params).d_start
    exact = oracle.exact_mi_gradient(mdp, params, d)
    rng = np.random.default_rng(2)
    for est in ("inverse_model",):
        g = oracle.mc_gradient_estimate(mdp, params, est, 100_000, rng, d)
        z = np.abs(g.mean - exact) / np.maximum(g.stderr, 1e-12)
        assert np.all(z < 5)
    gm = oracle.mc_gradient_estimate(mdp, params, "score_marginal", 50_000, rng, d)
    g_marg, _ = oracle.exact_entropy_gradients(mdp, params, d)
    assert np.all(np.abs(gm.mean - g_marg) < 5 * gm.stderr + 1e-9)


def test_paired_gap_is_zero_per_sample():
    mdp, params = instance(12)
    gap, se = oracle.paired_estimator_gap(mdp, params, 5_000, np.random.default_rng(0))
    assert np.allclose(gap, 0.0, atol=1e-10)
    assert np.all(se > 0)


def test_unknown_estimator():
    mdp, params = instance(13)
    with pytest.raises(ValueError):
        oracle.mc_gradient_estimate(mdp, params, "bogus", 10, np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(2, 4), st.integers(0, 2 ** 31))
def test_mi_bounds(n_states, n_opt, seed):
    mdp, params = instance(seed, n_states, n_opt)
    model = oracle.build_model(mdp, params)
    mi = oracle.exact_conditional_mi(model)
    h_marg, h_cond = oracle.conditional_entropies(model)
    assert -1e-10 <= mi <= np.log(n_opt) + 1e-10
    assert h_cond <= h_marg + 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2 ** 31))
def test_termination_gradient_sums_to_zero(n_states, seed):
    # P^o rows stay normalized, so each gradient row sums to zero over x_f
    mdp, params = instance(seed, n_states)
    g = oracle.termination_gradient(mdp, params, 0)
    assert np.allclose(g.sum(1), 0.0, atol=1e-10)
