import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imoc import nn
from imoc.infomax import (OptionTransitionBuffer, TerminationTerms, fit_models, infomax_coefficients,
                          log_prob, network_coefficients, termination_loss)
from imoc.options import OptionTransition


def test_buffer_evicts_oldest():
    buf = OptionTransitionBuffer(3)
    for i in range(5):
        buf.push(OptionTransition(i, i + 10, i % 2))
    assert len(buf) == 3
    assert [r.x_s for r in buf.records()] == [2, 3, 4]


def test_buffer_sampling_and_empty():
    rng = np.random.default_rng(0)
    buf = OptionTransitionBuffer(10)
    assert buf.sample_batch(4, rng) is None
    buf.extend([OptionTransition(i, i, 0) for i in range(6)])
    batch = buf.sample_batch(4, rng)
    assert batch.shape == (4, 3) and len(set(batch[:, 0])) == 4
    assert len(buf.sample_batch(100, rng)) == 6


def test_buffer_state_roundtrip():
    buf = OptionTransitionBuffer(4)
    buf.extend([OptionTransition(i, 2 * i, i % 3) for i in range(7)])
    back = OptionTransitionBuffer.from_state(4, buf.state_dict()["contents"])
    assert back.records() == buf.records()
    with pytest.raises(ValueError):
        OptionTransitionBuffer(0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.lists(st.integers(0, 50), max_size=60))
def test_buffer_keeps_last_capacity(cap, xs):
    buf = OptionTransitionBuffer(cap)
    buf.extend([OptionTransition(x, x, 0) for x in xs])
    assert [r.x_s for r in buf.records()] == xs[-cap:] if xs else buf.records() == []


def test_log_prob_floor():
    p = np.array([[0.0, 1.0], [0.25, 0.75]])
    lp = log_prob(p, np.array([0, 0]))
    assert lp[0] == pytest.approx(np.log(1e-12)) and lp[1] == pytest.approx(np.log(0.25))


def test_termination_loss_gradient_formula():
    rng = np.random.default_rng(0)
    params = {"l": rng.normal(size=(5, 3))}
    opts = np.array([0, 2, 2, 1, 0])
    coef = rng.normal(size=5)
    tape = nn.Tape(params)
    loss = termination_loss(tape.param("l"), opts, coef, c_entropy=0.0, normalizer=10)
    g = tape.backward(loss)["l"]
    beta = 1 / (1 + np.exp(-params["l"][np.arange(5), opts]))
    expected = np.zeros((5, 3))
    expected[np.arange(5), opts] = -beta * coef / 10
    assert np.allclose(g, expected)


def test_termination_loss_without_beta_factor_and_entropy():
    params = {"l": np.zeros((2, 1))}
    tape = nn.Tape(params)
    loss = termination_loss(tape.param("l"), np.array([0, 0]), np.array([1.0, -3.0]), c_entropy=0.5,
                            beta_factor=False)
    g = tape.backward(loss)["l"]
    # entropy gradient vanishes at beta = 0.5
    assert np.allclose(g[:, 0], [-0.5, 1.5])


def test_infomax_coefficients():
    assert infomax_coefficients(np.log(0.5), np.log(0.25)) == pytest.approx(np.log(2))


def test_fit_models_reduces_loss():
    rng = np.random.default_rng(1)
    spec = nn.NetworkSpec(6, 2, 3, 16)
    params = nn.init_orthogonal(spec, rng)
    batch = np.stack([rng.integers(6, size=64), rng.integers(6, size=64), rng.integers(3, size=64)], 1)
    batch[:, 2] = batch[:, 1] % 3  # option identifiable from x_f
    opt = nn.OptimizerState("adam", 1e-2)
    first = fit_models(spec, params, opt, batch)
    for _ in range(200):
        last = fit_models(spec, params, opt, batch)
    assert last[0] < 0.2 * first[0]
    assert last[1] < first[1]
    with pytest.raises(ValueError):
        fit_models(spec, params, opt, np.zeros((0, 3), dtype=int))


def test_network_coefficients_use_phat():
    rng = np.random.default_rng(2)
    spec = nn.NetworkSpec(4, 2, 2, 8)
    params = nn.init_orthogonal(spec, rng)
    terms = TerminationTerms(np.array([1, 2]), np.array([0, 1]), np.array([0, 0]), np.array([3, 2]))
    coef = network_coefficients(spec, params, terms)
    probs = nn.phat_probs(spec, params, [0, 0, 0, 0], [1, 2, 3, 2])
    assert coef[0] == pytest.approx(np.log(probs[0, 0]) - np.log(probs[2, 0]))
    assert coef[1] == pytest.approx(0.0)  # x == x_f
    assert len(network_coefficients(spec, params, TerminationTerms.empty())) == 0
