"""Synchronous advantage-actor option critic with infomax terminations (A2IMOC).

One learner drives ``n_actors`` environments for ``rollout_len`` steps, then
takes a single clipped RMSProp step on

    policy gradient (UOAE advantages) - entropy/MI regularisers
    + value regression + termination loss,

and finally one classifier step for p_hat / mu_hat on the option-transition
buffer. The same class runs the A2C and AOC baselines (see ``baselines``).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .baselines import aoc_termination_loss
from .config import AgentConfig
from .infomax import (OptionTransitionBuffer, TerminationTerms, fit_models, network_coefficients,
                      termination_loss)
from .mdp import FourRoomsConfig, GridEnv, TabularMDP, build_four_rooms
from .options import ActiveOption, OptionTransition, greedy_mu, u_omega, uncertainty_scores

MU_FLOOR = 1e-12


# ------------------------------------------------------------------ selection

def select_option(q_row, mu_hat_row, c_mu: float, current: int, b: bool) -> int:
    """Keep ``current`` while the option continues (b = 0); otherwise pick
    argmax_o Q(o) - c_mu log mu_hat(o), lowest index on ties."""
    if not b:
        return int(current)
    return int(np.argmax(uncertainty_scores(q_row, mu_hat_row, c_mu, MU_FLOOR)))


def selection_distribution(config: AgentConfig, q: np.ndarray, muhat: Optional[np.ndarray]) -> np.ndarray:
    """mu(o | x) of the behaviour selector, row-wise."""
    n_opt = q.shape[-1]
    if n_opt == 1:
        return np.ones_like(q)
    if config.eps_greedy_selection:
        return (1.0 - config.selection_epsilon) * greedy_mu(q) + config.selection_epsilon / n_opt
    return greedy_mu(uncertainty_scores(q, muhat, config.c_mu, MU_FLOOR))


def marginal_value(config: AgentConfig, q: np.ndarray, muhat: Optional[np.ndarray]) -> np.ndarray:
    if config.v_omega_mu == "estimate" and muhat is not None:
        mu = muhat
    else:
        mu = selection_distribution(config, q, muhat)
    return (q * mu).sum(-1)


# ------------------------------------------------------------------ advantages

def uoae_advantage(rewards, k: Optional[int], v_at_k: Optional[float], v_end: Optional[float],
                   u_end: Optional[float], q_start: float, gamma: float, mode: str = "uoae") -> float:
    """Option advantage for the step t that starts a horizon of ``len(rewards)`` steps.

    ``rewards`` are R_t..R_{t+h-1}. ``k`` is the offset at which o_t terminated
    (None if it is still running at the horizon). ``v_at_k`` = V_Omega(x_{t+k}),
    ``v_end`` = V_Omega(x_{t+h}) and ``u_end`` = U_Omega(x_{t+h}, o_t).
    """
    r = np.asarray(rewards, dtype=np.float64)
    h = len(r)
    disc = gamma ** np.arange(h)
    if k is None or k >= h:
        if u_end is None:
            raise ValueError("running option needs the U_Omega bootstrap")
        return float((disc * r).sum() + gamma ** h * u_end - q_start)
    if v_at_k is None or v_end is None:
        raise ValueError("terminated option needs V_Omega bootstraps")
    head = float((disc[:k] * r[:k]).sum())
    reward_arm = float((disc[k:] * r[k:]).sum()) + gamma ** h * v_end
    boot_arm = gamma ** k * v_at_k
    if mode == "uoae":
        tail = max(reward_arm, boot_arm)
    elif mode == "n_step":
        tail = reward_arm
    elif mode == "truncated":
        tail = boot_arm
    else:
        raise ValueError(f"unknown advantage mode {mode!r}")
    return head + tail - q_start


def window_advantages(rewards, ends, terminal, term_next, v_next_raw, v_next, v_last, u_last,
                      q_taken, gamma: float, mode: str = "uoae") -> np.ndarray:
    """Vectorised option advantages over an (N, n_actors) window.

    ``ends[t]``: episode ended after step t (``terminal[t]`` if at a goal);
    ``term_next[t]``: the option used at t terminated on arrival at x_{t+1};
    ``v_next_raw[t]`` = V_Omega at the pre-reset next state (used for
    truncation); ``v_next[t]`` = V_Omega(x_{t+1}); ``v_last``/``u_last``:
    V_Omega(x_N) and U_Omega(x_N, o_{N-1}) at the window end.
    """
    n_steps = rewards.shape[0]
    adv = np.empty_like(rewards)
    full = np.zeros_like(v_last)  # reward arm with V bootstrap
    trunc = np.zeros_like(v_last)  # bootstrap arm
    cont = np.zeros_like(v_last)  # option still running: U bootstrap
    k_fin = np.zeros(v_last.shape, bool)
    for t in range(n_steps - 1, -1, -1):
        v_end_ep = np.where(terminal[t], 0.0, v_next_raw[t])
        last = t == n_steps - 1
        nxt_full = v_last if last else full
        full = rewards[t] + gamma * np.where(ends[t], v_end_ep, nxt_full)
        if last:
            stop_here = ends[t]
            fin_here = ends[t]
            trunc_new = rewards[t] + gamma * v_end_ep
            cont = rewards[t] + gamma * u_last
            k_fin = fin_here.copy()
            trunc = np.where(fin_here, trunc_new, 0.0)
        else:
            by_beta = term_next[t] & ~ends[t]
            stop_here = ends[t] | by_beta
            trunc_new = rewards[t] + gamma * np.where(ends[t], v_end_ep, v_next[t])
            trunc_prop = rewards[t] + gamma * trunc
            cont = rewards[t] + gamma * cont
            trunc = np.where(stop_here, trunc_new, trunc_prop)
            k_fin = stop_here | k_fin
        if mode == "uoae":
            arm = np.maximum(full, trunc)
        elif mode == "n_step":
            arm = full
        elif mode == "truncated":
            arm = trunc
        else:
            raise ValueError(f"unknown advantage mode {mode!r}")
        adv[t] = np.where(k_fin, arm, cont) - q_taken[t]
    return adv


# ------------------------------------------------------------------ rollout

@dataclass
class Rollout:
    states: np.ndarray  # (N, n) x_t
    options: np.ndarray  # (N, n) option acting at x_t
    actions: np.ndarray
    rewards: np.ndarray
    new_episode: np.ndarray  # x_t is an episode start
    terminated: np.ndarray  # b_t: previous option terminated on arrival at x_t
    prev_options: np.ndarray  # option active on arrival at x_t (-1 at episode starts)
    ends: np.ndarray  # episode ended after step t
    terminal: np.ndarray  # ... at a terminal state
    next_raw: np.ndarray  # pre-reset next state
    q: np.ndarray  # (N, n, O) Q_Omega(x_t, .)
    v: np.ndarray  # (N, n) V_Omega(x_t)
    v_next_raw: np.ndarray  # (N, n) V_Omega at next_raw
    mu_reg: np.ndarray  # (N, n, O) mu used in the marginal policy pi_mu
    last_states: np.ndarray  # x_N
    v_last: np.ndarray
    u_last: np.ndarray
    transitions: list = field(default_factory=list)
    terms: TerminationTerms = field(default_factory=TerminationTerms.empty)
    episode_returns: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.rewards.size


@dataclass
class TrainingStats:
    env_steps: int = 0
    iteration: int = 0
    episode_returns: list = field(default_factory=list)
    losses: dict = field(default_factory=dict)
    grad_norm: float = 0.0
    clipped_grad_norm: float = 0.0
    option_usage: np.ndarray = field(default_factory=lambda: np.zeros(1))
    mean_option_duration: float = float("nan")
    n_option_transitions: int = 0


class OptionCriticAgent:
    def __init__(self, config: AgentConfig, env_config: FourRoomsConfig | TabularMDP, seed: int):
        errors = config.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.config = config
        self.seed = int(seed)
        if isinstance(env_config, TabularMDP):
            self.env_config = None
            mdp, schedule = env_config, []
        else:
            self.env_config = env_config
            mdp = build_four_rooms(env_config)
            schedule = [(t, build_four_rooms(env_config, g)) for t, g in env_config.goal_relocation]
        self.mdp = mdp
        ss = np.random.SeedSequence(self.seed)
        init_ss, agent_ss, env_ss, clf_ss, eval_ss = ss.spawn(5)
        self.rng = np.random.default_rng(agent_ss)
        self.clf_rng = np.random.default_rng(clf_ss)
        self.eval_seq = eval_ss
        self.envs = [GridEnv(mdp, np.random.default_rng(s), list(schedule))
                     for s in env_ss.spawn(config.n_actors)]

        heads = ["policy", "q"]
        if config.n_options > 1 and config.termination != "none":
            heads.append("beta")
        if config.uses_phat:
            heads.append("phat")
        if config.uses_mu_hat:
            heads.append("muhat")
        self.spec = nn.NetworkSpec(mdp.n_states, mdp.n_actions, config.n_options, config.hidden,
                                   tuple(heads), config.split_encoder)
        self.params = nn.init_orthogonal(self.spec, np.random.default_rng(init_ss))
        self.opt = nn.OptimizerState(config.optimizer, config.learning_rate)
        self.clf_opt = nn.OptimizerState(config.optimizer, config.learning_rate)
        self.buffer = OptionTransitionBuffer(config.buffer_capacity)
        self.grad_buffer = {k: np.zeros_like(v) for k, v in self.params.items()}

        n = config.n_actors
        self.states = np.array([e.state for e in self.envs], dtype=np.int64)
        self.active: list[Optional[ActiveOption]] = [None] * n
        self.returns_acc = np.zeros(n)
        self.env_steps = 0
        self.iteration = 0

    # -------------------------------------------------------------- helpers

    @property
    def has_beta(self) -> bool:
        return "beta" in self.spec.heads

    def _values(self, out: dict) -> np.ndarray:
        return marginal_value(self.config, out["q"], out.get("muhat"))

    def _mu_reg(self, out: dict) -> np.ndarray:
        if self.config.policy_reg_mu == "estimate" and "muhat" in out:
            return out["muhat"]
        return selection_distribution(self.config, out["q"], out.get("muhat"))

    def _select(self, out: dict, rows: np.ndarray) -> np.ndarray:
        q = out["q"][rows]
        n_opt = q.shape[-1]
        if n_opt == 1:
            return np.zeros(len(rows), dtype=np.int64)
        if self.config.eps_greedy_selection:
            greedy = np.argmax(q, -1)
            explore = self.rng.random(len(rows)) < self.config.selection_epsilon
            rand = self.rng.integers(n_opt, size=len(rows))
            return np.where(explore, rand, greedy)
        scores = uncertainty_scores(q, out["muhat"][rows], self.config.c_mu, MU_FLOOR)
        return np.argmax(scores, -1)

    def _sample_actions(self, probs: np.ndarray) -> np.ndarray:
        cum = np.cumsum(probs, -1)
        u = self.rng.random(len(probs))[:, None]
        return np.minimum((u >= cum).sum(-1), probs.shape[-1] - 1)

    # -------------------------------------------------------------- rollout

    def collect_rollout(self) -> Rollout:
        cfg = self.config
        n, big_n, n_opt = cfg.n_actors, cfg.rollout_len, cfg.n_options
        rows = np.arange(n)
        shape = (big_n, n)
        rec = {k: np.zeros(shape, dtype=np.int64) for k in
               ("states", "options", "actions", "prev_options", "next_raw")}
        recb = {k: np.zeros(shape, dtype=bool) for k in ("new_episode", "terminated", "ends", "terminal")}
        rewards = np.zeros(shape)
        q_rec = np.zeros(shape + (n_opt,))
        v_rec = np.zeros(shape)
        mu_rec = np.zeros(shape + (n_opt,))
        transitions: list[OptionTransition] = []
        term_x, term_o, term_s, term_f = [], [], [], []
        episode_returns = []

        def finish_segment(i: int, x_f: int):
            act = self.active[i]
            transitions.append(OptionTransition(act.start, int(x_f), act.option))
            if act.arrivals:
                term_x.extend(act.arrivals)
                m = len(act.arrivals)
                term_o.extend([act.option] * m)
                term_s.extend([act.start] * m)
                term_f.extend([int(x_f)] * m)
            self.active[i] = None

        for t in range(big_n):
            x = self.states.copy()
            out = nn.forward(self.spec, self.params, x)
            new = np.array([a is None for a in self.active])
            prev = np.array([-1 if a is None else a.option for a in self.active], dtype=np.int64)
            b = np.zeros(n, dtype=bool)
            cont_rows = np.flatnonzero(~new)
            if self.has_beta and cont_rows.size:
                beta = out["beta"][cont_rows, prev[cont_rows]]
                b[cont_rows] = self.rng.random(cont_rows.size) < beta
            for i in cont_rows:
                act = self.active[i]
                if self.has_beta:
                    act.arrivals.append(int(x[i]))
                act.steps += 1
                if b[i]:
                    finish_segment(i, x[i])
            select = np.flatnonzero(new | b)
            if select.size:
                chosen = self._select(out, select)
                for i, o in zip(select, chosen):
                    self.active[i] = ActiveOption(int(o), int(x[i]))
            opts = np.array([a.option for a in self.active], dtype=np.int64)
            probs = out["policy"][rows, opts]
            acts = self._sample_actions(probs)

            q_rec[t] = out["q"]
            v_rec[t] = self._values(out)
            mu_rec[t] = self._mu_reg(out)
            rec["states"][t], rec["options"][t], rec["actions"][t] = x, opts, acts
            rec["prev_options"][t] = prev
            recb["new_episode"][t], recb["terminated"][t] = new, b
            for i, env in enumerate(self.envs):
                st = env.step(int(acts[i]))
                rewards[t, i] = st.reward
                rec["next_raw"][t, i] = st.next_state
                self.returns_acc[i] += st.reward
                if st.done or st.truncated:
                    recb["ends"][t, i] = True
                    recb["terminal"][t, i] = st.done
                    finish_segment(i, st.next_state)
                    episode_returns.append(float(self.returns_acc[i]))
                    self.returns_acc[i] = 0.0
                self.states[i] = env.state
        self.env_steps += n * big_n

        last = self.states.copy()
        out_last = nn.forward(self.spec, self.params, last)
        v_last = self._values(out_last)
        cur = np.array([a.option if a is not None else 0 for a in self.active])
        q_cur = out_last["q"][rows, cur]
        if self.has_beta:
            u_last = u_omega(q_cur, v_last, out_last["beta"][rows, cur])
        else:
            u_last = q_cur
        v_next_raw = np.zeros(shape)
        ends = recb["ends"]
        if ends.any():
            raw = rec["next_raw"][ends]
            out_raw = nn.forward(self.spec, self.params, raw)
            v_next_raw[ends] = self._values(out_raw)

        terms = TerminationTerms(*(np.array(v, dtype=np.int64) for v in (term_x, term_o, term_s, term_f)))
        return Rollout(rec["states"], rec["options"], rec["actions"], rewards, recb["new_episode"],
                       recb["terminated"], rec["prev_options"], ends, recb["terminal"],
                       rec["next_raw"], q_rec, v_rec, v_next_raw, mu_rec, last, v_last, u_last,
                       transitions, terms, episode_returns)

    # -------------------------------------------------------------- losses

    def advantages(self, ro: Rollout, mode: Optional[str] = None) -> np.ndarray:
        n_steps = ro.rewards.shape[0]
        v_next = np.concatenate([ro.v[1:], ro.v_last[None]], 0)
        term_next = np.concatenate([ro.terminated[1:], np.zeros((1,) + ro.terminated.shape[1:], bool)], 0)
        q_taken = np.take_along_axis(ro.q, ro.options[..., None], -1)[..., 0]
        # an option running at the window end is bootstrapped with U(x_N, o);
        # an option picked at t < N-1 that is still running shares that option.
        return window_advantages(ro.rewards, ro.ends, ro.terminal, term_next, ro.v_next_raw,
                                 v_next, ro.v_last, ro.u_last, q_taken, self.config.gamma,
                                 mode or self.config.advantage_mode)

    def compute_losses(self, ro: Rollout, net: nn.Net) -> tuple[nn.Node, dict]:
        cfg = self.config
        s = ro.states.reshape(-1)
        o = ro.options.reshape(-1)
        a = ro.actions.reshape(-1)
        batch = len(s)
        adv = self.advantages(ro).reshape(-1)
        q_taken = np.take_along_axis(ro.q, ro.options[..., None], -1)[..., 0].reshape(-1)
        target = adv + q_taken

        logits = net.policy_logits(s)
        logp = nn.log_softmax(logits)
        logp_o = nn.gather(logp, o)
        logp_a = nn.gather(logp_o, a)
        pg = nn.scale(nn.total(nn.mul(logp_a, adv)), -1.0 / batch)
        ent = nn.mean(nn.entropy(nn.gather(logits, o)))
        loss = pg - nn.scale(ent, cfg.c_H)
        parts = {"policy_loss": float(pg.value), "entropy": float(ent.value)}

        c_mi = 0.0 if cfg.disable_mi_reg else cfg.c_H_mu
        if c_mi > 0 and cfg.n_options > 1:
            mu = ro.mu_reg.reshape(batch, -1)
            mix = nn.weighted_sum(nn.softmax(logits), mu[:, :, None], axis=1)
            plogp = nn.mul(mix, nn.log(mix, floor=MU_FLOOR))
            h_mu = nn.scale(nn.total(plogp), -1.0 / batch)
            loss = loss - nn.scale(h_mu, c_mi)
            parts["marginal_entropy"] = float(h_mu.value)

        q = nn.gather(net.head("q", s), o)
        vloss = nn.mean(nn.square(q - target))
        loss = loss + nn.scale(vloss, cfg.value_coef)
        parts["value_loss"] = float(vloss.value)

        if self.has_beta:
            if cfg.termination == "infomax" and len(ro.terms):
                coef = network_coefficients(self.spec, self.params, ro.terms)
                tl = termination_loss(net.head("beta", ro.terms.x), ro.terms.o, coef, cfg.c_H_beta,
                                      normalizer=batch, beta_factor=cfg.beta_factor)
                loss = loss + tl
                parts["termination_loss"] = float(tl.value)
            elif cfg.termination == "aoc":
                arrive = ~ro.new_episode.reshape(-1)
                xs = s[arrive]
                if xs.size:
                    po = ro.prev_options.reshape(-1)[arrive]
                    q_prev = ro.q.reshape(batch, -1)[arrive, po]
                    v_here = ro.v.reshape(-1)[arrive]
                    tl = aoc_termination_loss(net.head("beta", xs), po, q_prev, v_here, cfg.gamma,
                                              normalizer=batch)
                    loss = loss + tl
                    parts["termination_loss"] = float(tl.value)
        parts["loss"] = float(loss.value)
        for name, value in parts.items():
            if not math.isfinite(value):
                raise nn.NonFiniteError(f"non-finite {name}: {value}")
        return loss, parts

    # -------------------------------------------------------------- training

    def train_iteration(self) -> TrainingStats:
        cfg = self.config
        ro = self.collect_rollout()
        self.buffer.extend(ro.transitions)
        parts = {}

        def loss_fn(net):
            loss, p = self.compute_losses(ro, net)
            parts.update(p)
            return loss

        nn.accumulate_gradient(self.spec, self.params, loss_fn, self.grad_buffer, name="agent loss")
        norm = nn.apply_gradients(self.params, self.grad_buffer, self.opt, cfg.max_grad_norm)
        if cfg.uses_phat or cfg.uses_mu_hat:
            batch = self.buffer.sample_batch(cfg.classifier_batch, self.clf_rng)
            if batch is not None:
                lp, lm = fit_models(self.spec, self.params, self.clf_opt, batch, cfg.max_grad_norm,
                                    fit_phat=cfg.uses_phat, fit_mu=cfg.uses_mu_hat)
                parts["phat_loss"], parts["muhat_loss"] = lp, lm
        self.iteration += 1
        usage = np.bincount(ro.options.reshape(-1), minlength=cfg.n_options) / ro.size
        n_tr = len(ro.transitions)
        steps_per_option = ro.size / n_tr if n_tr else float("nan")
        return TrainingStats(self.env_steps, self.iteration, ro.episode_returns, parts, norm,
                             min(norm, cfg.max_grad_norm), usage, steps_per_option, n_tr)

    # -------------------------------------------------------------- evaluation

    def evaluate(self, n_episodes: int, eps_opt: Optional[float] = None,
                 rng: Optional[np.random.Generator] = None, mdp: Optional[TabularMDP] = None,
                 record: bool = False):
        mdp = mdp or self.envs[0].mdp
        rng = rng or np.random.default_rng(self.eval_seq.spawn(1)[0])
        eps = self.config.eps_opt if eps_opt is None else eps_opt
        return evaluate(self.spec, self.params, mdp, n_episodes, eps, rng, record=record)

    # -------------------------------------------------------------- checkpoints

    def state_arrays(self) -> tuple[dict, dict]:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        for prefix, opt in (("opt", self.opt), ("clf_opt", self.clf_opt)):
            arrays.update({f"{prefix}/{k}": v for k, v in opt.moments.items()})
        arrays["buffer"] = self.buffer.contents()
        arrays["states"] = self.states
        arrays["returns_acc"] = self.returns_acc
        meta = {
            "config": dataclasses.asdict(self.config),
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "env_steps": self.env_steps,
            "iteration": self.iteration,
            "opt_step": self.opt.step,
            "clf_opt_step": self.clf_opt.step,
            "rng": self.rng.bit_generator.state,
            "clf_rng": self.clf_rng.bit_generator.state,
            "env_rngs": [e.rng.bit_generator.state for e in self.envs],
            "env_counters": [[e.env_steps, e.elapsed] for e in self.envs],
            "active": [None if a is None else [a.option, a.start, a.steps, a.arrivals]
                       for a in self.active],
        }
        return arrays, json.loads(json.dumps(meta, default=_jsonable))

    def save(self, path) -> None:
        arrays, meta = self.state_arrays()
        nn.save_arrays(path, arrays, meta)

    def load_state(self, arrays: dict, meta: dict) -> None:
        for k in self.params:
            self.params[k][...] = arrays[f"param/{k}"]
        for prefix, opt in (("opt", self.opt), ("clf_opt", self.clf_opt)):
            opt.moments = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items()
                           if k.startswith(prefix + "/")}
        self.opt.step = meta["opt_step"]
        self.clf_opt.step = meta["clf_opt_step"]
        self.buffer = OptionTransitionBuffer.from_state(self.config.buffer_capacity, arrays["buffer"])
        self.states = arrays["states"].astype(np.int64).copy()
        self.returns_acc = arrays["returns_acc"].copy()
        self.env_steps = meta["env_steps"]
        self.iteration = meta["iteration"]
        self.rng.bit_generator.state = meta["rng"]
        self.clf_rng.bit_generator.state = meta["clf_rng"]
        for env, st, (steps, elapsed), s in zip(self.envs, meta["env_rngs"], meta["env_counters"],
                                                self.states):
            env.rng.bit_generator.state = st
            env.env_steps, env.elapsed, env.state = steps, elapsed, int(s)
            while env.schedule and env.env_steps >= env.schedule[0][0]:
                env.mdp = env.schedule.pop(0)[1]
        self.active = [None if a is None else ActiveOption(a[0], a[1], a[2], list(a[3]))
                       for a in meta["active"]]


def _jsonable(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x)}")


def load_params(path) -> tuple[nn.NetworkSpec, dict, dict]:
    arrays, meta = nn.load_arrays(path)
    spec = nn.NetworkSpec.from_dict(meta["spec"])
    params = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("param/")}
    return spec, params, meta


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalResult:
    mean_return: float
    returns: np.ndarray
    # per option and state: beta-driven terminations (episode ends excluded)
    # and steps executed
    termination_counts: Optional[np.ndarray] = None
    usage_counts: Optional[np.ndarray] = None


def evaluate(spec: nn.NetworkSpec, params: dict, mdp: TabularMDP, n_episodes: int, eps_opt: float,
             rng: np.random.Generator, record: bool = False):
    """Run ``n_episodes`` in parallel with epsilon-greedy options over Q_Omega
    and sampled actions. Returns the mean undiscounted return, or an
    EvalResult with termination statistics when ``record`` is set."""
    n_opt = spec.n_options
    seeds = rng.integers(2 ** 63, size=n_episodes)
    envs = [GridEnv(mdp, np.random.default_rng(int(s))) for s in seeds]
    returns = np.zeros(n_episodes)
    state = np.array([e.state for e in envs], dtype=np.int64)
    option = np.full(n_episodes, -1)
    alive = np.ones(n_episodes, dtype=bool)
    term_counts = np.zeros((n_opt, mdp.n_states))
    usage = np.zeros((n_opt, mdp.n_states))
    has_beta = "beta" in spec.heads
    limit = mdp.max_episode_len or 10_000
    for _ in range(limit):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        out = nn.forward(spec, params, state[idx])
        cur = option[idx]
        b = cur < 0
        if has_beta:
            cont = ~b
            beta = out["beta"][np.arange(idx.size), np.where(cont, cur, 0)]
            stop = cont & (rng.random(idx.size) < beta)
            if record:
                np.add.at(term_counts, (cur[stop], state[idx][stop]), 1.0)
            b |= stop
        sel = np.flatnonzero(b)
        if sel.size:
            q = out["q"][sel]
            greedy = np.argmax(q, -1)
            explore = rng.random(sel.size) < eps_opt
            cur[sel] = np.where(explore, rng.integers(n_opt, size=sel.size), greedy)
        option[idx] = cur
        probs = out["policy"][np.arange(idx.size), cur]
        u = rng.random(idx.size)[:, None]
        acts = np.minimum((u >= np.cumsum(probs, -1)).sum(-1), spec.n_actions - 1)
        if record:
            np.add.at(usage, (cur, state[idx]), 1.0)
        for j, i in enumerate(idx):
            st = envs[i].step(int(acts[j]))
            returns[i] += st.reward
            if st.done or st.truncated:
                alive[i] = False
            else:
                state[i] = st.next_state
    mean = float(returns.mean())
    if record:
        return EvalResult(mean, returns, term_counts, usage)
    return mean

