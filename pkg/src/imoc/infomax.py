"""Infomax termination machinery: the option-transition buffer, the inverse
model p_hat(o | x_s, x_f) and mu_hat(o | x_s) classifiers, and the
termination loss whose gradient ascends I(X_f; O | X_s)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .options import OptionTransition

LOG_FLOOR = 1e-12


class OptionTransitionBuffer:
    """Bounded buffer of (x_s, x_f, o) keeping the most recent ``capacity`` records."""

    def __init__(self, capacity: int = 480):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data = np.zeros((capacity, 3), dtype=np.int64)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, transition) -> None:
        self._data[self._next] = tuple(transition)
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, transitions) -> None:
        for tr in transitions:
            self.push(tr)

    def contents(self) -> np.ndarray:
        """Records oldest first, as an (n, 3) array of (x_s, x_f, o)."""
        if self._size < self.capacity:
            return self._data[:self._size].copy()
        return np.roll(self._data, -self._next, axis=0)

    def records(self) -> list[OptionTransition]:
        return [OptionTransition(*map(int, r)) for r in self.contents()]

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Optional[np.ndarray]:
        """Uniform sample without replacement; None when the buffer is empty."""
        if self._size == 0:
            return None
        idx = rng.choice(self._size, size=min(batch_size, self._size), replace=False)
        return self.contents()[idx]

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "contents": self.contents()}

    @classmethod
    def from_state(cls, capacity: int, contents: np.ndarray) -> "OptionTransitionBuffer":
        buf = cls(capacity)
        for row in np.asarray(contents).reshape(-1, 3):
            buf.push(row)
        return buf


def classifier_loss(net: nn.Net, batch: np.ndarray, fit_phat: bool = True, fit_mu: bool = True):
    """Mean cross-entropies of o given (x_s, x_f) and of o given x_s."""
    xs, xf, o = batch[:, 0], batch[:, 1], batch[:, 2]
    losses = {}
    if fit_phat:
        losses["phat"] = nn.mean(nn.softmax_cross_entropy(net.phat_logits(xs, xf), o))
    if fit_mu:
        losses["muhat"] = nn.mean(nn.softmax_cross_entropy(net.head("muhat", xs), o))
    return losses


def fit_models(spec: nn.NetworkSpec, params: dict, opt: nn.OptimizerState, batch: np.ndarray,
               max_grad_norm: Optional[float] = 1.0, fit_phat: bool = True,
               fit_mu: bool = True) -> tuple[float, float]:
    """One gradient step on the p_hat and mu_hat cross-entropies. Returns both losses."""
    if batch is None or len(batch) == 0:
        raise ValueError("fit_models needs a nonempty batch")
    buffer = {k: np.zeros_like(v) for k, v in params.items()}
    parts = {}

    def loss_fn(net):
        terms = classifier_loss(net, batch, fit_phat, fit_mu)
        parts.update({k: float(v.value) for k, v in terms.items()})
        total = None
        for v in terms.values():
            total = v if total is None else total + v
        return total

    nn.accumulate_gradient(spec, params, loss_fn, buffer, name="classifier loss")
    nn.apply_gradients(params, buffer, opt, max_grad_norm)
    return parts.get("phat", float("nan")), parts.get("muhat", float("nan"))


def log_prob(probs: np.ndarray, options: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(probs[np.arange(len(options)), options], LOG_FLOOR))


@dataclass
class TerminationTerms:
    """Flat list of (visited state x, option o, start x_s, final x_f) for
    completed option segments. ``x`` are the states where termination was
    checked; the final state of a segment may appear as its own x."""
    x: np.ndarray
    o: np.ndarray
    x_s: np.ndarray
    x_f: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def empty(cls) -> "TerminationTerms":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z)


def infomax_coefficients(log_p_visit: np.ndarray, log_p_final: np.ndarray) -> np.ndarray:
    """log p(o | x_s, x) - log p(o | x_s, x_f)."""
    return log_p_visit - log_p_final


def termination_loss(beta_logits, options: np.ndarray, coef: np.ndarray, c_entropy: float = 0.0,
                     normalizer: Optional[float] = None, beta_factor: bool = True):
    """Loss whose negative gradient is
        sum_x grad l(x) * sg(beta(x)) * coef  +  c_entropy * grad H(beta(x)),
    divided by ``normalizer`` (default: number of terms).

    ``beta_logits`` is an (n, O) node of termination logits at the visited
    states; ``coef`` is the constant infomax coefficient per term.
    """
    n = len(options)
    norm = float(normalizer if normalizer is not None else max(n, 1))
    logit = nn.gather(beta_logits, options)
    weight = np.asarray(coef, dtype=np.float64)
    if beta_factor:
        beta = 0.5 * (1.0 + np.tanh(0.5 * logit.value))
        weight = weight * beta
    loss = nn.scale(nn.total(nn.mul(logit, weight)), -1.0 / norm)
    if c_entropy:
        loss = loss + nn.scale(nn.total(nn.bernoulli_entropy(logit)), -c_entropy / norm)
    return loss


def network_coefficients(spec: nn.NetworkSpec, params: dict, terms: TerminationTerms) -> np.ndarray:
    """Infomax coefficients using the learned p_hat (no gradient)."""
    if len(terms) == 0:
        return np.zeros(0)
    starts = np.concatenate([terms.x_s, terms.x_s])
    ends = np.concatenate([terms.x, terms.x_f])
    probs = nn.phat_probs(spec, params, starts, ends)
    opts = np.concatenate([terms.o, terms.o])
    lp = log_prob(probs, opts)
    n = len(terms)
    return infomax_coefficients(lp[:n], lp[n:])
