"""Upgoing generalized option-advantage estimation and the clipped termination
loss used for PPO-style multi-epoch updates of the termination logits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class TdSequences:
    """TD errors along a window starting at t (index 0 here is step t).

    ``delta``: marginal TD errors R + gamma V(x') - V(x); ``delta_o``: option TD
    errors R + gamma Q(x', o) - Q(x, o); ``k``: offset at which the option
    terminates (None if it does not within the window). ``tail`` is
    R_{t+N} + gamma U(x_{t+N+1}, o) - Q(x_{t+N}, o), needed only when it
    does not terminate.
    """
    delta: np.ndarray
    delta_o: np.ndarray
    k: Optional[int]
    n: int
    gamma: float
    lam: float
    tail: float = 0.0


def ugoae(seq: TdSequences) -> float:
    gl = seq.gamma * seq.lam
    d, do, n, k = np.asarray(seq.delta, float), np.asarray(seq.delta_o, float), seq.n, seq.k
    if not 0.0 <= seq.lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if k is not None and k < n:
        if len(do) < k + 1 or len(d) < n + 1:
            raise ValueError(f"need len(delta_o) > k={k} and len(delta) > n={n}")
        head = sum(gl ** i * do[i] for i in range(k + 1))
        up = sum(gl ** i * d[i] for i in range(k + 1, n + 1))
        return float(head + max(up, 0.0))
    if len(do) < n:
        raise ValueError(f"need len(delta_o) >= n={n}")
    head = sum(gl ** i * do[i] for i in range(n))
    return float(head + gl ** n * seq.tail)


def clipped_beta_term(l, l_old, eps_beta: float, beta_old, coef):
    """Surrogate value clip(l - l_old, -eps, eps) * beta_old * coef and its
    gradient with respect to the logit ``l`` (ascent direction)."""
    if eps_beta <= 0:
        raise ValueError("eps_beta must be positive")
    diff = np.asarray(l, float) - np.asarray(l_old, float)
    inside = (diff >= -eps_beta) & (diff <= eps_beta)
    value = np.clip(diff, -eps_beta, eps_beta) * beta_old * coef
    grad = np.where(inside, np.asarray(beta_old, float) * coef, 0.0)
    if np.ndim(value) == 0:
        return float(value), float(grad)
    return value, grad
