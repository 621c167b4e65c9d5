"""Exact tabular option models and Monte Carlo checks of the termination
gradient estimators.

Conventions. An option picked at ``x_s`` always takes one action first; the
termination draw happens at every state it *arrives* at. The arrival model

    A(x_f | x) = beta(x) 1[x_f = x] + (1 - beta(x)) sum_x' p_pi(x'|x) A(x_f | x')

is therefore the distribution of terminating states given that the option
has just arrived at ``x``, and the option transition is P^o = p_pi A. With
``first_step=False`` the start state is itself checked and P^o = A.

Termination parameters are tabular logits ``l[o, x]`` with beta = logistic(l),
so gradients are (n_options, n_states) arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mdp import TabularMDP

ESTIMATORS = ("score_marginal", "score_conditional", "inverse_model")


class NonTerminatingOption(np.linalg.LinAlgError):
    pass


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class TabularOptionParams:
    beta_logits: np.ndarray  # (O, S)
    pi: np.ndarray  # (O, S, A)
    mu: np.ndarray  # (S, O) policy over options at option starts

    def __post_init__(self):
        if not np.allclose(self.pi.sum(-1), 1.0, atol=1e-9):
            raise ValueError("option policies must be distributions")
        if not np.allclose(self.mu.sum(-1), 1.0, atol=1e-9):
            raise ValueError("mu rows must be distributions")

    @property
    def n_options(self) -> int:
        return self.beta_logits.shape[0]

    @property
    def beta(self) -> np.ndarray:
        return logistic(self.beta_logits)

    def with_logits(self, logits: np.ndarray) -> "TabularOptionParams":
        return TabularOptionParams(logits, self.pi, self.mu)


def random_option_params(n_states: int, n_options: int, n_actions: int,
                         rng: np.random.Generator, beta_range=(0.2, 0.8),
                         policy_concentration: float = 1.0) -> TabularOptionParams:
    beta = rng.uniform(*beta_range, size=(n_options, n_states))
    pi = rng.dirichlet(np.full(n_actions, policy_concentration), size=(n_options, n_states))
    mu = rng.dirichlet(np.ones(n_options), size=n_states)
    return TabularOptionParams(np.log(beta / (1.0 - beta)), pi, mu)


def policy_kernel(mdp: TabularMDP, pi_o: np.ndarray) -> np.ndarray:
    """p_pi(x'|x) = sum_a pi(a|x) p(x'|x, a)."""
    return np.einsum("sa,sat->st", pi_o, mdp.transition)


def arrival_model(mdp: TabularMDP, beta_o: np.ndarray, pi_o: np.ndarray) -> np.ndarray:
    n = mdp.n_states
    cont = (1.0 - beta_o)[:, None] * policy_kernel(mdp, pi_o)
    radius = np.max(np.abs(np.linalg.eigvals(cont))) if n else 0.0
    if radius >= 1.0 - 1e-12:
        raise NonTerminatingOption(f"option does not terminate a.s. (spectral radius {radius:.6f})")
    return np.linalg.solve(np.eye(n) - cont, np.diag(beta_o))


def exact_option_transition(mdp: TabularMDP, params: TabularOptionParams, o: int,
                            first_step: bool = True) -> np.ndarray:
    beta = params.beta[o]
    a = arrival_model(mdp, beta, params.pi[o])
    if not first_step:
        return a
    return policy_kernel(mdp, params.pi[o]) @ a


def stationary_start_distribution(p_marginal: np.ndarray) -> np.ndarray:
    """Stationary law of the option-start chain x_s -> x_f (= next x_s)."""
    n = p_marginal.shape[0]
    lhs = np.vstack([p_marginal.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    d, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    d = np.clip(d, 0.0, None)
    return d / d.sum()


@dataclass
class ExactOptionModel:
    p_option: np.ndarray  # (O, S, S) P^o(x_f | x_s)
    arrival: np.ndarray  # (O, S, S) A^o(x_f | x)
    mu: np.ndarray  # (S, O)
    d_start: np.ndarray  # (S,)

    @property
    def p_marginal(self) -> np.ndarray:
        return np.einsum("so,osf->sf", self.mu, self.p_option)

    @property
    def d_joint(self) -> np.ndarray:
        """d(x_s, o) as an (S, O) table."""
        return self.d_start[:, None] * self.mu

    def inverse(self) -> np.ndarray:
        return exact_inverse_model(self)


def build_model(mdp: TabularMDP, params: TabularOptionParams, d_start: Optional[np.ndarray] = None,
                first_step: bool = True) -> ExactOptionModel:
    """Exact P^o for every option; ``d_start`` defaults to the stationary start law."""
    arrivals, p_opt = [], []
    for o in range(params.n_options):
        a = arrival_model(mdp, params.beta[o], params.pi[o])
        arrivals.append(a)
        p_opt.append(policy_kernel(mdp, params.pi[o]) @ a if first_step else a)
    model = ExactOptionModel(np.array(p_opt), np.array(arrivals), params.mu,
                             np.full(mdp.n_states, 1.0 / mdp.n_states))
    if d_start is None:
        model.d_start = stationary_start_distribution(model.p_marginal)
    else:
        model.d_start = np.asarray(d_start, dtype=np.float64)
    return model


def _plogp(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def _safe_log(p):
    with np.errstate(divide="ignore"):
        return np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)


def conditional_entropies(model: ExactOptionModel) -> tuple[float, float]:
    """(H(X_f | X_s), H(X_f | X_s, O)) under d(x_s, o)."""
    h_marg = -float(model.d_start @ _plogp(model.p_marginal).sum(-1))
    h_cond = -float((model.d_joint.T * _plogp(model.p_option).sum(-1)).sum())
    return h_marg, h_cond


def exact_conditional_mi(model: ExactOptionModel) -> float:
    h_marg, h_cond = conditional_entropies(model)
    return h_marg - h_cond


def exact_inverse_model(model: ExactOptionModel) -> np.ndarray:
    """p(o | x_s, x_f) as (O, S, S); NaN where P(x_f | x_s) = 0."""
    joint = model.mu.T[:, :, None] * model.p_option
    marg = joint.sum(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(marg > 0, joint / np.where(marg > 0, marg, 1.0), np.nan)


def exact_entropy_gradients(mdp: TabularMDP, params: TabularOptionParams,
                            d_start: np.ndarray, first_step: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of H(X_f|X_s) and H(X_f|X_s,O) with respect to the logits,
    by exact summation, holding d(x_s) and mu fixed."""
    m = build_model(mdp, params, d_start, first_step)
    p_marg = m.p_marginal
    log_marg = _safe_log(p_marg)
    log_opt = _safe_log(m.p_option)
    w = m.d_joint  # (S, O)
    g_marg = np.zeros_like(params.beta_logits)
    g_cond = np.zeros_like(params.beta_logits)
    for o in range(params.n_options):
        occ = m.p_option[o]  # (xs, y): P^o(y|xs)
        a = m.arrival[o]  # (y, xf)
        # bracket[xs, y] = log P(y|xs) - sum_xf A(xf|y) log P(xf|xs)   (+1 terms cancel)
        br_marg = log_marg - log_marg @ a.T
        br_cond = log_opt[o] - log_opt[o] @ a.T
        g_marg[o] = -(w[:, o][:, None] * occ * br_marg).sum(0)
        g_cond[o] = -(w[:, o][:, None] * occ * br_cond).sum(0)
    return g_marg, g_cond


def exact_mi_gradient(mdp, params, d_start, first_step: bool = True) -> np.ndarray:
    g_marg, g_cond = exact_entropy_gradients(mdp, params, d_start, first_step)
    return g_marg - g_cond


def finite_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar or array-valued ``fn`` in every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    out = None
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        d = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2 * h)
        if out is None:
            out = np.zeros(x.shape + d.shape)
        out[idx] = d
    return out


def termination_gradient(mdp, params, o: int, first_step: bool = True) -> np.ndarray:
    """d P^o(x_f|x_s) / d l[o, y] as (S_xs, S_xf, S_y)."""
    a = arrival_model(mdp, params.beta[o], params.pi[o])
    p = policy_kernel(mdp, params.pi[o]) @ a if first_step else a
    n = mdp.n_states
    # P^o(y|xs) * (1[xf = y] - A(xf|y))
    return p[:, None, :] * (np.eye(n)[None, :, :] - a.T[None, :, :])


def check_termination_gradient_theorem(mdp, params, o: int, h: float = 1e-5,
                                       first_step: bool = True) -> float:
    """Max abs deviation between the closed-form termination gradient and
    central finite differences of the exact P^o."""
    analytic = termination_gradient(mdp, params, o, first_step)

    def p_of(row):
        logits = params.beta_logits.copy()
        logits[o] = row
        return exact_option_transition(mdp, params.with_logits(logits), o, first_step)

    fd = finite_difference(p_of, params.beta_logits[o], h)  # (y, xs, xf)
    return float(np.max(np.abs(np.moveaxis(fd, 0, -1) - analytic)))


# ------------------------------------------------------------- Monte Carlo

@dataclass
class OptionExecutions:
    """Vectorised samples of option executions.

    Arrival k of sample i visited ``arrival_state[k]``; ``arrival_sample[k] = i``.
    """
    x_s: np.ndarray
    o: np.ndarray
    x_f: np.ndarray
    arrival_sample: np.ndarray
    arrival_state: np.ndarray

    @property
    def n(self) -> int:
        return len(self.x_s)


def _sample_rows(cum: np.ndarray, rows: np.ndarray, rng) -> np.ndarray:
    u = rng.random(len(rows))
    return (u[:, None] >= cum[rows]).sum(1).clip(max=cum.shape[1] - 1)


def simulate_options(mdp: TabularMDP, params: TabularOptionParams, d_start: np.ndarray, n: int,
                     rng: np.random.Generator, first_step: bool = True,
                     max_steps: int = 100_000) -> OptionExecutions:
    n_opt, n_states = params.n_options, mdp.n_states
    cum_d = np.cumsum(d_start)
    cum_d[-1] = 1.0
    x_s = np.searchsorted(cum_d, rng.random(n), side="right")
    cum_mu = np.cumsum(params.mu, -1)
    cum_mu[:, -1] = 1.0
    o = _sample_rows(cum_mu, x_s, rng)
    kernels = np.array([policy_kernel(mdp, params.pi[k]) for k in range(n_opt)])
    cum_k = np.cumsum(kernels, -1).reshape(n_opt * n_states, n_states)
    cum_k[:, -1] = 1.0
    beta = params.beta
    x = x_s.copy()
    x_f = np.full(n, -1)
    active = np.arange(n)
    samples, states = [], []
    if not first_step:
        stop = rng.random(n) < beta[o, x]
        samples.append(active.copy())
        states.append(x.copy())
        x_f[stop] = x[stop]
        active = active[~stop]
    for _ in range(max_steps):
        if active.size == 0:
            break
        cur = x[active]
        nxt = _sample_rows(cum_k, o[active] * n_states + cur, rng)
        x[active] = nxt
        samples.append(active.copy())
        states.append(nxt)
        stop = rng.random(active.size) < beta[o[active], nxt]
        x_f[active[stop]] = nxt[stop]
        active = active[~stop]
    else:
        raise NonTerminatingOption("simulation exceeded max_steps")
    return OptionExecutions(x_s, o, x_f, np.concatenate(samples), np.concatenate(states))


def estimator_coefficients(model: ExactOptionModel, ex: OptionExecutions, estimator: str) -> np.ndarray:
    """Per-arrival bracketed coefficient for the chosen estimator."""
    i, x = ex.arrival_sample, ex.arrival_state
    xs, o, xf = ex.x_s[i], ex.o[i], ex.x_f[i]
    if estimator == "score_marginal":
        lp = np.log(model.p_marginal)
        return -(lp[xs, x] - lp[xs, xf])
    if estimator == "score_conditional":
        lp = np.log(model.p_option)
        return -(lp[o, xs, x] - lp[o, xs, xf])
    if estimator == "inverse_model":
        lp = np.log(exact_inverse_model(model))
        return lp[o, xs, x] - lp[o, xs, xf]
    raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")


def per_sample_gradients(model: ExactOptionModel, params: TabularOptionParams,
                         ex: OptionExecutions, estimator: str) -> np.ndarray:
    """(n, O*S) matrix of per-execution gradient contributions."""
    n_opt, n_states = params.beta_logits.shape
    i, x = ex.arrival_sample, ex.arrival_state
    o = ex.o[i]
    contrib = params.beta[o, x] * estimator_coefficients(model, ex, estimator)
    out = np.zeros((ex.n, n_opt * n_states))
    np.add.at(out, (i, o * n_states + x), contrib)
    return out


@dataclass
class GradientEstimate:
    mean: np.ndarray  # (O, S)
    stderr: np.ndarray  # (O, S)
    n: int


def mc_gradient_estimate(mdp, params, estimator: str, n_samples: int, rng: np.random.Generator,
                         d_start: Optional[np.ndarray] = None, first_step: bool = True,
                         chunk: int = 50_000) -> GradientEstimate:
    """Average of the per-execution estimator terms with exact models plugged in."""
    model = build_model(mdp, params, d_start, first_step)
    shape = params.beta_logits.shape
    s1 = np.zeros(np.prod(shape))
    s2 = np.zeros_like(s1)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        ex = simulate_options(mdp, params, model.d_start, m, rng, first_step)
        g = per_sample_gradients(model, params, ex, estimator)
        s1 += g.sum(0)
        s2 += (g * g).sum(0)
        done += m
    mean = s1 / n_samples
    var = np.maximum(s2 / n_samples - mean ** 2, 0.0) * n_samples / max(n_samples - 1, 1)
    return GradientEstimate(mean.reshape(shape), np.sqrt(var / n_samples).reshape(shape), n_samples)


def paired_estimator_gap(mdp, params, n_samples: int, rng, d_start=None,
                         first_step: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Difference (score_marginal - score_conditional) - inverse_model on shared samples,
    and the pooled standard error of the two estimates, per coordinate."""
    model = build_model(mdp, params, d_start, first_step)
    ex = simulate_options(mdp, params, model.d_start, n_samples, rng, first_step)
    diff_est = (per_sample_gradients(model, params, ex, "score_marginal")
                - per_sample_gradients(model, params, ex, "score_conditional"))
    inv_est = per_sample_gradients(model, params, ex, "inverse_model")
    shape = params.beta_logits.shape
    gap = (diff_est.mean(0) - inv_est.mean(0)).reshape(shape)
    pooled = np.sqrt(diff_est.var(0, ddof=1) / n_samples + inv_est.var(0, ddof=1) / n_samples)
    return gap, pooled.reshape(shape)


def empirical_option_transition(mdp, params, o: int, x_s: int, n: int, rng,
                                first_step: bool = True) -> np.ndarray:
    d = np.zeros(mdp.n_states)
    d[x_s] = 1.0
    mu = np.zeros_like(params.mu)
    mu[:, o] = 1.0
    ex = simulate_options(mdp, TabularOptionParams(params.beta_logits, params.pi, mu), d, n, rng, first_step)
    return np.bincount(ex.x_f, minlength=mdp.n_states) / n


def plugin_conditional_mi(x_s: np.ndarray, o: np.ndarray, x_f: np.ndarray, n_states: int,
                          n_options: int) -> float:
    """Plug-in estimate of I(X_f; O | X_s) from sampled triples."""
    counts = np.zeros((n_states, n_options, n_states))
    np.add.at(counts, (x_s, o, x_f), 1.0)
    total = counts.sum()
    p_sof = counts / total
    p_so = p_sof.sum(2, keepdims=True)
    p_sf = p_sof.sum(1, keepdims=True)
    p_s = p_sof.sum((1, 2), keepdims=True)
    mask = p_sof > 0
    num = np.broadcast_to(p_sof * p_s, p_sof.shape)[mask]
    den = np.broadcast_to(p_so * p_sf, p_sof.shape)[mask]
    return float((p_sof[mask] * np.log(num / den)).sum())
