import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imoc import nn
from imoc.agent import (OptionCriticAgent, evaluate, select_option, uoae_advantage,
                        window_advantages)
from imoc.baselines import preset
from imoc.config import AgentConfig
from imoc.mdp import FourRoomsConfig, TabularMDP, build_four_rooms

SMALL = AgentConfig(n_actors=3, rollout_len=6, hidden=16, classifier_batch=16, buffer_capacity=64)


def make_agent(config=SMALL, seed=0, env=None):
    return OptionCriticAgent(config, env if env is not None else FourRoomsConfig(), seed)


def force_beta(agent, logit):
    agent.params["beta.W"][...] = 0.0
    agent.params["beta.b"][...] = logit


# ------------------------------------------------------------------ selection

def test_select_option_examples():
    assert select_option([0.5, 0.4], [0.9, 0.1], 0.5, current=0, b=True) == 1
    assert select_option([0.5, 0.4], [0.9, 0.1], 0.0, current=1, b=True) == 0
    assert select_option([0.5, 0.4], [0.9, 0.1], 0.5, current=0, b=False) == 0
    assert select_option([1.0, 1.0], [0.5, 0.5], 0.5, current=1, b=True) == 0
    assert select_option([0.0, 0.0], [1.0, 0.0], 1.0, current=0, b=True) == 1  # floored mu_hat


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(-100, 100), st.floats(0, 2),
       st.integers(0, 2 ** 31))
def test_select_option_shift_invariant(q, shift, c_mu, seed):
    mu = np.random.default_rng(seed).dirichlet(np.ones(len(q)))
    q = np.round(np.array(q), 3)
    a = select_option(q, mu, c_mu, 0, True)
    b = select_option(q + shift, mu, c_mu, 0, True)
    scores = q - c_mu * np.log(mu)
    assert a == b or np.isclose(scores[a], scores[b])


# ------------------------------------------------------------------ advantages

def test_uoae_worked_example():
    assert uoae_advantage([1, 1, 1, 1], k=2, v_at_k=10.0, v_end=0.0, u_end=None, q_start=0.0,
                          gamma=1.0) == pytest.approx(12.0)


def test_uoae_running_branch():
    assert uoae_advantage([0, 0, 0], k=None, v_at_k=None, v_end=None, u_end=5.0, q_start=1.0,
                          gamma=0.9) == pytest.approx(0.9 ** 3 * 5 - 1)


def test_uoae_reward_branch_dominates():
    adv = uoae_advantage([0, 0, 50, 50], k=2, v_at_k=0.1, v_end=0.0, u_end=None, q_start=0.0, gamma=1.0)
    assert adv == pytest.approx(100.0)


def test_uoae_modes_and_errors():
    args = dict(rewards=[1, 1, 1, 1], k=2, v_at_k=10.0, v_end=0.0, u_end=None, q_start=0.0, gamma=1.0)
    assert uoae_advantage(**args, mode="n_step") == pytest.approx(4.0)
    assert uoae_advantage(**args, mode="truncated") == pytest.approx(12.0)
    with pytest.raises(ValueError):
        uoae_advantage(**args, mode="gae")
    with pytest.raises(ValueError):
        uoae_advantage([1.0], None, None, None, None, 0.0, 0.9)


def reference_advantages(R, ends, terminal, term_next, vnr, v_next, v_last, u_last, q, gamma, mode):
    N, n = R.shape
    out = np.zeros_like(R)
    for i in range(n):
        for t in range(N):
            k = h = v_at_k = vend = uend = None
            for s in range(t, N):
                if ends[s, i]:
                    h = s - t + 1
                    vend = 0.0 if terminal[s, i] else vnr[s, i]
                    break
                if k is None and s < N - 1 and term_next[s, i]:
                    k, v_at_k = s - t + 1, v_next[s, i]
            if h is None:
                h, vend = N - t, v_last[i]
            if k is None:
                # still running at the horizon; an episode end forces termination (U = V)
                uend = vend if ends[t + h - 1, i] else u_last[i]
            out[t, i] = uoae_advantage(R[t:t + h, i], k, v_at_k, vend, uend, q[t, i], gamma, mode)
    return out


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2 ** 31), st.sampled_from(["uoae", "n_step", "truncated"]))
def test_window_recursion_matches_per_step_definition(N, seed, mode):
    rng = np.random.default_rng(seed)
    n = 3
    R = rng.normal(size=(N, n))
    ends = rng.random((N, n)) < 0.2
    terminal = ends & (rng.random((N, n)) < 0.5)
    tn = rng.random((N, n)) < 0.3
    tn[-1] = False
    vnr, vn, q = rng.normal(size=(3, N, n))
    vl, ul = rng.normal(size=(2, n))
    got = window_advantages(R, ends, terminal, tn, vnr, vn, vl, ul, q, 0.9, mode)
    assert np.allclose(got, reference_advantages(R, ends, terminal, tn, vnr, vn, vl, ul, q, 0.9, mode))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2 ** 31))
def test_uoae_never_below_truncated(N, seed):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(N, 2))
    ends = rng.random((N, 2)) < 0.2
    tn = rng.random((N, 2)) < 0.4
    tn[-1] = False
    arrays = (R, ends, ends & (rng.random((N, 2)) < 0.5), tn, *rng.normal(size=(2, N, 2)),
              *rng.normal(size=(2, 2)), rng.normal(size=(N, 2)))
    up = window_advantages(*arrays, 0.95, "uoae")
    tr = window_advantages(*arrays, 0.95, "truncated")
    assert np.all(up >= tr - 1e-12)


# ------------------------------------------------------------------ rollouts

def test_always_terminating_options_emit_one_transition_per_step():
    agent = make_agent()
    force_beta(agent, 50.0)
    agent.collect_rollout()
    ro = agent.collect_rollout()
    assert len(ro.transitions) == SMALL.rollout_len * SMALL.n_actors
    assert np.all(ro.terminated | ro.new_episode)


def test_never_terminating_options_emit_only_at_episode_ends():
    agent = make_agent(dataclasses.replace(SMALL, rollout_len=40))
    force_beta(agent, -50.0)
    for _ in range(4):
        ro = agent.collect_rollout()
        assert len(ro.transitions) == int(ro.ends.sum())
        assert not ro.terminated.any()


def test_option_changes_only_at_boundaries():
    agent = make_agent()
    for _ in range(3):
        ro = agent.collect_rollout()
        changed = ro.options != np.where(ro.prev_options < 0, -1, ro.prev_options)
        assert np.all(~changed | ro.terminated | ro.new_episode)


def test_every_completed_arrival_gives_one_term():
    agent = make_agent()
    for _ in range(5):
        carried = sum(len(a.arrivals) for a in agent.active if a is not None)
        ro = agent.collect_rollout()
        still_open = sum(len(a.arrivals) for a in agent.active if a is not None)
        assert len(ro.terms) == carried + int((~ro.new_episode).sum()) - still_open


def test_seeded_rollouts_identical():
    a, b = make_agent(seed=3), make_agent(seed=3)
    ra, rb = a.collect_rollout(), b.collect_rollout()
    assert np.array_equal(ra.actions, rb.actions) and np.array_equal(ra.states, rb.states)
    assert ra.transitions == rb.transitions


# ------------------------------------------------------------------ losses / training

def test_identical_option_policies_make_marginal_entropy_equal_entropy():
    agent = make_agent()
    w = agent.params["policy.W"].reshape(SMALL.hidden, SMALL.n_options, 4)
    w[:, 1:] = w[:, :1]
    agent.params["policy.b"][...] = 0.0
    ro = agent.collect_rollout()
    _, parts = agent.compute_losses(ro, nn.Net(agent.spec, agent.params))
    assert parts["marginal_entropy"] == pytest.approx(parts["entropy"], rel=1e-9)


def test_disable_mi_reg_drops_marginal_term():
    agent = make_agent(dataclasses.replace(SMALL, disable_mi_reg=True))
    _, parts = agent.compute_losses(agent.collect_rollout(), nn.Net(agent.spec, agent.params))
    assert "marginal_entropy" not in parts


def test_nonfinite_loss_names_component():
    agent = make_agent()
    ro = agent.collect_rollout()
    ro.rewards[0, 0] = np.nan
    with pytest.raises(nn.NonFiniteError, match="policy_loss|value_loss"):
        agent.compute_losses(ro, nn.Net(agent.spec, agent.params))


def test_train_iteration_stats():
    agent = make_agent()
    for _ in range(3):
        st_ = agent.train_iteration()
    assert st_.option_usage.sum() == pytest.approx(1.0, abs=1e-9)
    assert st_.clipped_grad_norm <= SMALL.max_grad_norm
    assert st_.env_steps == 3 * SMALL.n_actors * SMALL.rollout_len
    assert {"policy_loss", "value_loss", "termination_loss", "phat_loss", "muhat_loss"} <= set(st_.losses)


@pytest.mark.parametrize("kind", ["a2c", "aoc", "our_aoc", "a2imoc"])
def test_training_is_deterministic(kind):
    cfg = preset(kind, SMALL)
    a, b = make_agent(cfg, seed=7), make_agent(cfg, seed=7)
    for _ in range(2):
        a.train_iteration()
        b.train_iteration()
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    a = make_agent(seed=5)
    a.train_iteration()
    a.save(tmp_path / "c.bin")
    a.train_iteration()
    a.train_iteration()
    b = make_agent(seed=5)
    b.load_state(*nn.load_arrays(tmp_path / "c.bin"))
    b.train_iteration()
    b.train_iteration()
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert a.buffer.records() == b.buffer.records()


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        make_agent(dataclasses.replace(SMALL, c_mu=-1.0))


def bandit() -> TabularMDP:
    p = np.zeros((3, 2, 3))
    p[0, 0, 1] = p[0, 1, 2] = 1.0
    p[1, :, 1] = p[2, :, 2] = 1.0
    reward = np.array([[0.2, 1.0], [0.0, 0.0], [0.0, 0.0]])
    return TabularMDP(p, reward, 0.99, np.array([False, True, True]), np.array([1.0, 0.0, 0.0]))


def test_policy_gradient_picks_better_arm():
    cfg = preset("a2c", dataclasses.replace(SMALL, n_actors=4, rollout_len=5))
    agent = make_agent(cfg, seed=0, env=bandit())
    for _ in range(2000):
        agent.train_iteration()
    p = nn.forward(agent.spec, agent.params, np.array([0]))["policy"][0, 0, 1]
    assert p > 0.95


# ------------------------------------------------------------------ evaluation

def optimal_single_option(mdp):
    """Tabular network acting greedily on value iteration over ``mdp``."""
    n, n_act = mdp.n_states, mdp.n_actions
    v = np.zeros(n)
    r = mdp.arrival_reward
    for _ in range(500):
        q = (mdp.transition * (r + mdp.gamma * np.where(mdp.terminal, 0.0, v))).sum(-1)
        q[mdp.terminal] = 0.0
        v = q.max(1)
    spec = nn.NetworkSpec(n, n_act, 1, n, heads=("policy", "q"))
    params = {"enc.W": np.eye(n), "enc.b": np.zeros(n),
              "policy.W": 30.0 * np.eye(n_act)[q.argmax(1)], "policy.b": np.zeros(n_act),
              "q.W": v[:, None].copy(), "q.b": np.zeros(1)}
    return spec, params


def test_greedy_optimal_policy_reaches_best_goal():
    mdp = build_four_rooms(FourRoomsConfig(action_noise=0.0))
    spec, params = optimal_single_option(mdp)
    res = evaluate(spec, params, mdp, 10, 0.0, np.random.default_rng(0), record=True)
    assert np.all(res.returns > 1.9)


def test_eps_one_selects_options_uniformly():
    agent = make_agent(seed=1)
    force_beta(agent, 50.0)
    agent.params["q.b"][...] = [5.0, 0.0, 0.0, 0.0]
    res = evaluate(agent.spec, agent.params, agent.mdp, 50, 1.0, np.random.default_rng(0), record=True)
    freq = res.usage_counts.sum(1) / res.usage_counts.sum()
    assert np.allclose(freq, 0.25, atol=0.03)


def test_evaluation_reproducible():
    agent = make_agent(seed=2)
    a = agent.evaluate(8, rng=np.random.default_rng(4))
    b = agent.evaluate(8, rng=np.random.default_rng(4))
    assert a == b
