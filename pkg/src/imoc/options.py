"""Option semantics: marginal/arrival option values, termination sampling and
per-actor option bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class OptionTransition(NamedTuple):
    x_s: int
    x_f: int
    o: int


@dataclass
class ActiveOption:
    option: int
    start: int
    steps: int = 0
    # states where termination was checked while this option was active
    arrivals: list = field(default_factory=list)


def v_omega(q_values, mu) -> np.ndarray:
    """Marginal option value sum_o mu(o|x) Q(x, o); works row-wise on batches."""
    q = np.asarray(q_values, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if q.shape != mu.shape:
        raise ValueError(f"shape mismatch: q {q.shape} vs mu {mu.shape}")
    if not np.allclose(mu.sum(-1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("mu must sum to 1")
    return (q * mu).sum(-1)


def u_omega(q, v, beta):
    """Option value upon arrival: (1 - beta) Q + beta V."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0) or np.any(beta > 1):
        raise ValueError("beta must lie in [0, 1]")
    return (1.0 - beta) * q + beta * v


def sample_termination(beta, rng: np.random.Generator):
    """Bernoulli(beta) draws; scalar in, bool out; array in, bool array out."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0) or np.any(beta > 1):
        raise ValueError("beta must lie in [0, 1]")
    b = rng.random(beta.shape) < beta
    return bool(b) if b.ndim == 0 else b


def uncertainty_scores(q, mu_hat, c_mu: float, floor: float = 1e-12) -> np.ndarray:
    return np.asarray(q) - c_mu * np.log(np.maximum(mu_hat, floor))


def greedy_mu(scores) -> np.ndarray:
    """One-hot distribution on the argmax (lowest index on ties), row-wise."""
    scores = np.asarray(scores)
    mu = np.zeros_like(scores, dtype=np.float64)
    idx = np.argmax(scores, axis=-1)
    np.put_along_axis(mu, idx[..., None], 1.0, axis=-1)
    return mu


def epsilon_greedy_mu(q, epsilon: float) -> np.ndarray:
    q = np.asarray(q)
    return (1.0 - epsilon) * greedy_mu(q) + epsilon / q.shape[-1]
