"""A2C and option-critic (AOC) baselines on the shared agent code path.

``our_aoc`` is A2IMOC with the termination objective swapped for the
option-critic one; ``aoc`` additionally uses epsilon-greedy option selection,
truncated advantages and no policy regularization.
"""
from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from . import nn
from .config import AgentConfig


def preset(kind: str, base: Optional[AgentConfig] = None) -> AgentConfig:
    cfg = dataclasses.replace(base) if base is not None else AgentConfig()
    if kind == "a2imoc":
        return cfg
    if kind == "a2c":
        return dataclasses.replace(cfg, n_options=1, termination="none", advantage_mode="n_step",
                                   c_H_mu=0.0, c_mu=0.0, eps_greedy_selection=True,
                                   selection_epsilon=0.0)
    if kind == "aoc":
        return dataclasses.replace(cfg, termination="aoc", eps_greedy_selection=True,
                                   selection_epsilon=0.1, advantage_mode="truncated",
                                   c_H_mu=0.0)
    if kind == "our_aoc":
        return dataclasses.replace(cfg, termination="aoc")
    raise ValueError(f"unknown baseline {kind!r}")


def a2c_policy_gradient(rewards, values, bootstrap: float, gamma: float,
                        dones=None) -> np.ndarray:
    """N-step advantages over one window.

    A_t = sum_{i<N-t} gamma^i R_{t+i} + gamma^{N-t} V(x_N) - V(x_t); returns are
    cut at ``dones[t]`` (episode ended after step t, bootstrap 0).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.zeros(len(rewards), bool) if dones is None else np.asarray(dones, bool)
    out = np.empty_like(rewards)
    ret = float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        ret = rewards[t] + gamma * (0.0 if dones[t] else ret)
        out[t] = ret - values[t]
    return out


def aoc_termination_loss(beta_logits, options: np.ndarray, q: np.ndarray, v: np.ndarray,
                         gamma: float = 0.99, margin: float = 0.0,
                         normalizer: Optional[float] = None):
    """Loss with gradient gamma * grad beta(x) * (Q(x, o) - V(x) + margin).

    Descending it lowers beta where continuing the option is better than the
    marginal value. ``q`` and ``v`` are constants.
    """
    n = len(options)
    norm = float(normalizer if normalizer is not None else max(n, 1))
    beta = nn.logistic(nn.gather(beta_logits, options))
    adv = np.asarray(q, dtype=np.float64) - np.asarray(v, dtype=np.float64) + margin
    return nn.scale(nn.total(nn.mul(beta, adv)), gamma / norm)


def aoc_option_selection(q_row, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    q_row = np.asarray(q_row)
    if rng.random() < epsilon:
        return int(rng.integers(len(q_row)))
    return int(np.argmax(q_row))
