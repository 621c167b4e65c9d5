"""Run and agent configuration. Defaults follow the gridworld hyperparameters."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .mdp import FourRoomsConfig

ADVANTAGE_MODES = ("uoae", "n_step", "truncated")
TERMINATIONS = ("infomax", "aoc", "none")
ALGORITHMS = ("a2imoc", "a2c", "aoc", "our_aoc")


@dataclass
class AgentConfig:
    gamma: float = 0.99
    rollout_len: int = 20
    n_actors: int = 12
    n_options: int = 4
    hidden: int = 128
    c_mu: float = 0.5
    c_H_mu: float = 0.04
    c_H: float = 0.01
    c_H_beta: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    learning_rate: float = 2e-3
    optimizer: str = "rmsprop"
    eps_opt: float = 0.01
    buffer_capacity: int = 480
    classifier_batch: int = 240
    termination: str = "infomax"
    eps_greedy_selection: bool = False
    selection_epsilon: float = 0.1
    disable_mi_reg: bool = False
    advantage_mode: str = "uoae"
    # which mu defines V_Omega / the marginal policy: the selector's own
    # distribution ("greedy") or the learned estimate mu_hat ("estimate")
    v_omega_mu: str = "greedy"
    policy_reg_mu: str = "estimate"
    beta_factor: bool = True
    split_encoder: bool = False

    def validate(self) -> list[str]:
        errors = []
        for name in ("gamma", "c_mu", "c_H_mu", "c_H", "c_H_beta", "value_coef",
                     "max_grad_norm", "learning_rate", "eps_opt", "selection_epsilon"):
            if getattr(self, name) < 0:
                errors.append(f"agent.{name} must be >= 0")
        for name in ("rollout_len", "n_actors", "n_options", "hidden", "buffer_capacity",
                     "classifier_batch"):
            if getattr(self, name) < 1:
                errors.append(f"agent.{name} must be >= 1")
        if self.advantage_mode not in ADVANTAGE_MODES:
            errors.append(f"agent.advantage_mode must be one of {ADVANTAGE_MODES}")
        if self.termination not in TERMINATIONS:
            errors.append(f"agent.termination must be one of {TERMINATIONS}")
        if self.optimizer not in ("rmsprop", "adam"):
            errors.append("agent.optimizer must be rmsprop or adam")
        for name in ("v_omega_mu", "policy_reg_mu"):
            if getattr(self, name) not in ("greedy", "estimate"):
                errors.append(f"agent.{name} must be greedy or estimate")
        return errors

    @property
    def uses_mu_hat(self) -> bool:
        reg = self.c_H_mu > 0 and not self.disable_mi_reg and self.policy_reg_mu == "estimate"
        return self.n_options > 1 and (not self.eps_greedy_selection or reg
                                       or self.v_omega_mu == "estimate")

    @property
    def uses_phat(self) -> bool:
        return self.n_options > 1 and self.termination == "infomax"


@dataclass
class RunConfig:
    algorithm: str = "a2imoc"
    env: FourRoomsConfig = field(default_factory=FourRoomsConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    total_env_steps: int = 2_000_000
    eval_interval: int = 100_000
    eval_episodes: int = 20
    final_eval_episodes: int = 100
    seed: int = 0
    output_dir: str = "runs/default"
    n_options: int | None = None
    oracle_attach: bool = False

    def validate(self) -> list[str]:
        errors = []
        if self.algorithm not in ALGORITHMS:
            errors.append(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.total_env_steps <= 0:
            errors.append("total_env_steps must be > 0")
        if self.eval_interval <= 0:
            errors.append("eval_interval must be > 0")
        if self.eval_episodes < 1 or self.final_eval_episodes < 1:
            errors.append("eval episode counts must be >= 1")
        if not isinstance(self.seed, int):
            errors.append("seed must be an integer")
        if not 0.0 <= self.env.action_noise <= 1.0:
            errors.append("env.action_noise must lie in [0, 1]")
        errors.extend(self.agent.validate())
        return errors

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        d = self.to_dict()
        d["env"]["goal_rewards"] = {str(k): v for k, v in d["env"]["goal_rewards"].items()}
        d["env"]["goal_relocation"] = [[t, {str(k): v for k, v in g.items()}]
                                       for t, g in d["env"]["goal_relocation"]]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        env = dict(d.pop("env", {}))
        if "goal_rewards" in env:
            env["goal_rewards"] = {int(k): float(v) for k, v in env["goal_rewards"].items()}
        if "goal_relocation" in env:
            env["goal_relocation"] = tuple((int(t), {int(k): float(v) for k, v in g.items()})
                                           for t, g in env["goal_relocation"])
        agent = d.pop("agent", {})
        _check_keys(env, FourRoomsConfig, "env")
        _check_keys(agent, AgentConfig, "agent")
        return cls(env=FourRoomsConfig(**env), agent=AgentConfig(**agent), **d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def _check_keys(d: dict, klass, prefix: str) -> None:
    unknown = set(d) - {f.name for f in dataclasses.fields(klass)}
    if unknown:
        raise ValueError(f"unknown {prefix} keys: {sorted(unknown)}")


def _coerce(value: str, current: Any):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(float(value))
    if isinstance(current, float):
        return float(value)
    if current is None:
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            return value
    if isinstance(current, (dict, list, tuple)):
        return json.loads(value)
    return value


def apply_override(config: RunConfig, assignment: str) -> RunConfig:
    """Apply ``dotted.key=value`` (e.g. ``agent.c_mu=0.2``) in place."""
    if "=" not in assignment:
        raise ValueError(f"override must look like key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    target = config
    parts = key.strip().split(".")
    for p in parts[:-1]:
        if not hasattr(target, p):
            raise ValueError(f"unknown config key {key!r}")
        target = getattr(target, p)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise ValueError(f"unknown config key {key!r}")
    setattr(target, leaf, _coerce(value, getattr(target, leaf)))
    return config
