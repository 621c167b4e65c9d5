"""Experiment runner.

    python -m imoc train --config run.json [--seed S] [--override agent.c_mu=0.2]
    python -m imoc eval --checkpoint ckpt.bin --episodes 100
    python -m imoc viz --checkpoint ckpt.bin --out viz.json
    python -m imoc ablate --config run.json --variants eps_greedy_selection,n_step_advantage
    python -m imoc sweep --config run.json --n-options 2,4,6,8
    python -m imoc oracle-check --instances 30

Relative output directories are resolved under $IMOC_OUTPUT_ROOT (default: cwd).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn, oracle
from .agent import OptionCriticAgent, evaluate, load_params
from .baselines import preset
from .config import RunConfig, apply_override
from .mdp import TabularMDP, build_four_rooms

OUTPUT_ROOT_ENV = "IMOC_OUTPUT_ROOT"
LOG_NAME = "log.csv"
CONFIG_NAME = "config.json"
CHECKPOINT_NAME = "checkpoint.bin"
SUMMARY_NAME = "summary.json"
TIMING_NAME = "timing.json"

ABLATIONS = {
    "eps_greedy_selection": {"eps_greedy_selection": True},
    "disable_mi_reg": {"disable_mi_reg": True},
    "n_step_advantage": {"advantage_mode": "n_step"},
    "truncated_advantage": {"advantage_mode": "truncated"},
}
LOSS_COLUMNS = ("loss", "policy_loss", "value_loss", "termination_loss", "entropy",
                "marginal_entropy", "phat_loss", "muhat_loss")


def output_dir(path: str) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def resolve_agent_config(config: RunConfig):
    agent = dataclasses.replace(config.agent)
    if config.n_options is not None:
        agent.n_options = config.n_options
    return preset(config.algorithm, agent)


def build_agent(config: RunConfig) -> OptionCriticAgent:
    errors = config.validate()
    if errors:
        raise ValueError("invalid config:\n  " + "\n  ".join(errors))
    return OptionCriticAgent(resolve_agent_config(config), config.env, config.seed)


def eval_rng(seed: int, index: int) -> np.random.Generator:
    # independent of the training streams so evaluation never perturbs training
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1_000_003, index)))


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# ------------------------------------------------------------------ oracle hook

def network_option_params(agent: OptionCriticAgent) -> oracle.TabularOptionParams:
    """Tabular view of the current networks (mu = the behaviour selector)."""
    from .agent import selection_distribution
    states = np.arange(agent.spec.n_states)
    out = nn.forward(agent.spec, agent.params, states)
    mu = selection_distribution(agent.config, out["q"], out.get("muhat"))
    return oracle.TabularOptionParams(out["beta_logits"].T.copy(), out["policy"].transpose(1, 0, 2).copy(), mu)


def exact_mi(agent: OptionCriticAgent) -> float:
    if not agent.has_beta:
        return float("nan")
    model = oracle.build_model(agent.mdp, network_option_params(agent))
    return oracle.exact_conditional_mi(model)


# ------------------------------------------------------------------ training

@dataclass
class RunLog:
    path: Path
    columns: list
    rows: list = field(default_factory=list)


def run_training(config: RunConfig, out_dir: Optional[str | Path] = None, verbose: bool = False) -> RunLog:
    """Train until ``total_env_steps``, evaluating every ``eval_interval`` env steps.

    Writes log.csv (flushed per row), config.json, checkpoint.bin and
    summary.json into the output directory.
    """
    agent = build_agent(config)
    out = Path(out_dir) if out_dir is not None else output_dir(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(config.to_json() + "\n")

    n_opt = agent.config.n_options
    columns = (["env_step", "iteration", "eval_return", "train_return"] + list(LOSS_COLUMNS)
               + ["grad_norm", "mean_option_duration"] + [f"usage_{o}" for o in range(n_opt)]
               + (["exact_mi"] if config.oracle_attach else []))
    log = RunLog(out / LOG_NAME, columns)
    recent: list[float] = []
    usage = np.zeros(n_opt)
    usage_n = 0
    durations: list[float] = []
    next_eval = config.eval_interval
    eval_index = 0
    final_return = float("nan")

    with open(log.path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        fh.flush()
        try:
            while agent.env_steps < config.total_env_steps:
                stats = agent.train_iteration()
                recent.extend(stats.episode_returns)
                usage += stats.option_usage
                usage_n += 1
                if np.isfinite(stats.mean_option_duration):
                    durations.append(stats.mean_option_duration)
                done = agent.env_steps >= config.total_env_steps
                if agent.env_steps < next_eval and not done:
                    continue
                while next_eval <= agent.env_steps:
                    next_eval += config.eval_interval
                episodes = config.final_eval_episodes if done else config.eval_episodes
                ret = evaluate(agent.spec, agent.params, agent.envs[0].mdp, episodes,
                               agent.config.eps_opt, eval_rng(config.seed, eval_index))
                eval_index += 1
                if done:
                    final_return = ret
                row = {"env_step": agent.env_steps, "iteration": agent.iteration, "eval_return": ret,
                       "train_return": float(np.mean(recent)) if recent else float("nan"),
                       "grad_norm": stats.grad_norm,
                       "mean_option_duration": float(np.mean(durations)) if durations else float("nan")}
                row.update({k: stats.losses.get(k, float("nan")) for k in LOSS_COLUMNS})
                row.update({f"usage_{o}": u for o, u in enumerate(usage / max(usage_n, 1))})
                if config.oracle_attach:
                    row["exact_mi"] = exact_mi(agent)
                writer.writerow([_fmt(row[c]) for c in columns])
                fh.flush()
                log.rows.append(row)
                if verbose:
                    print(f"step {agent.env_steps:>9d}  eval {ret:+.3f}  train {row['train_return']:+.3f}",
                          flush=True)
                recent, usage, usage_n, durations = [], np.zeros(n_opt), 0, []
        finally:
            fh.flush()

    save_checkpoint(agent, config, out / CHECKPOINT_NAME)
    summary = {"algorithm": config.algorithm, "seed": config.seed, "env_steps": agent.env_steps,
               "final_return": final_return}
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return log


def cached_run(config: RunConfig, out_dir, fresh: bool = False) -> dict:
    """Summary of a finished run in ``out_dir``, training it first unless a run
    with a byte-identical config already completed there. Training is
    deterministic, so a reused run equals a fresh one. Wall-clock seconds are
    kept in timing.json (not in the summary, which must stay reproducible)."""
    out = Path(out_dir)
    done = all((out / f).exists() for f in (CONFIG_NAME, SUMMARY_NAME, CHECKPOINT_NAME, TIMING_NAME))
    if fresh or not done or (out / CONFIG_NAME).read_text() != config.to_json() + "\n":
        t0 = time.time()
        run_training(config, out)
        (out / TIMING_NAME).write_text(json.dumps({"seconds": time.time() - t0}) + "\n")
    summary = json.loads((out / SUMMARY_NAME).read_text())
    summary["seconds"] = json.loads((out / TIMING_NAME).read_text())["seconds"]
    return summary


def save_checkpoint(agent: OptionCriticAgent, config: RunConfig, path) -> None:
    arrays, meta = agent.state_arrays()
    meta["run_config"] = json.loads(config.to_json())
    nn.save_arrays(path, arrays, meta)


def load_agent(path) -> tuple[OptionCriticAgent, RunConfig]:
    arrays, meta = nn.load_arrays(path)
    config = RunConfig.from_dict(meta["run_config"])
    agent = build_agent(config)
    agent.load_state(arrays, meta)
    return agent, config


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ------------------------------------------------------------------ evaluation / viz

def checkpoint_env(path) -> TabularMDP:
    _, _, meta = load_params(path)
    return build_four_rooms(RunConfig.from_dict(meta["run_config"]).env)


def evaluate_checkpoint(path, episodes: int, seed: int = 0, eps_opt: Optional[float] = None) -> float:
    spec, params, meta = load_params(path)
    config = RunConfig.from_dict(meta["run_config"])
    eps = config.agent.eps_opt if eps_opt is None else eps_opt
    return evaluate(spec, params, build_four_rooms(config.env), episodes, eps, eval_rng(seed, 10 ** 6))


def export_visualization(checkpoint, out_path=None, mdp: Optional[TabularMDP] = None,
                         episodes: int = 100, seed: int = 0) -> dict:
    """Per option and free cell: action probabilities, beta, Q_Omega and the
    empirical terminating-state frequency over ``episodes`` evaluation episodes."""
    spec, params, meta = load_params(checkpoint)
    config = RunConfig.from_dict(meta["run_config"])
    mdp = mdp if mdp is not None else build_four_rooms(config.env)
    if mdp.grid is None:
        raise ValueError("visualization export needs a grid environment")
    states = np.arange(mdp.n_states)
    out = nn.forward(spec, params, states)
    res = evaluate(spec, params, mdp, episodes, config.agent.eps_opt, eval_rng(seed, 2 * 10 ** 6),
                   record=True)
    term = res.termination_counts
    term_freq = term / np.maximum(term.sum(1, keepdims=True), 1.0)
    beta = out["beta"] if "beta" in out else np.ones((mdp.n_states, spec.n_options))
    doc = {"n_options": spec.n_options, "actions": ["up", "down", "left", "right"],
           "grid_shape": list(mdp.grid.shape), "episodes": episodes,
           "mean_return": res.mean_return, "options": []}
    for o in range(spec.n_options):
        cells = []
        for s, (r, c) in enumerate(mdp.grid.cells):
            cells.append({"cell": [r, c], "action_probs": out["policy"][s, o].tolist(),
                          "beta": float(beta[s, o]), "q": float(out["q"][s, o]),
                          "termination_freq": float(term_freq[o, s])})
        doc["options"].append({"option": o, "usage": float(res.usage_counts[o].sum()),
                               "termination_mass": float(term[o].sum()), "cells": cells})
    if out_path is not None:
        Path(out_path).write_text(json.dumps(doc, indent=1) + "\n")
    return doc


def termination_diversity(doc: dict) -> dict:
    """Pairwise TV distances between per-option terminating-state distributions
    and each option's termination mass relative to its usage."""
    dists = np.array([[c["termination_freq"] for c in o["cells"]] for o in doc["options"]])
    n = len(dists)
    tv = {(i, j): 0.5 * float(np.abs(dists[i] - dists[j]).sum()) for i in range(n) for j in range(i + 1, n)}
    ratio = [o["termination_mass"] / o["usage"] if o["usage"] > 0 else 0.0 for o in doc["options"]]
    return {"tv": tv, "mean_tv": float(np.mean(list(tv.values()))) if tv else float("nan"),
            "termination_ratio": ratio}


# ------------------------------------------------------------------ ablations / sweeps

def variant_config(base: RunConfig, variant: str) -> RunConfig:
    if variant not in ABLATIONS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {sorted(ABLATIONS)}")
    cfg = RunConfig.from_json(base.to_json())
    cfg.agent = dataclasses.replace(cfg.agent, **ABLATIONS[variant])
    return cfg


def _run_seeds(cfg: RunConfig, name: str, seeds: Sequence[int], root: Path, verbose: bool) -> list[dict]:
    rows = []
    for seed in seeds:
        run = RunConfig.from_json(cfg.to_json())
        run.seed = seed
        log = run_training(run, root / name / f"seed{seed}", verbose=verbose)
        rows.append({"config": name, "seed": seed, "final_return": log.rows[-1]["eval_return"]})
    return rows


def _table(rows: list[dict], path: Path) -> list[dict]:
    names = list(dict.fromkeys(r["config"] for r in rows))
    summary = []
    for name in names:
        vals = np.array([r["final_return"] for r in rows if r["config"] == name])
        summary.append({"config": name, "n": len(vals), "mean": float(vals.mean()), "std": float(vals.std())})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["config", "seed", "final_return"])
        w.writeheader()
        w.writerows(rows)
    return summary


def run_ablation(base: RunConfig, variants: Sequence[str], seeds: Sequence[int] = range(5),
                 root: Optional[Path] = None, verbose: bool = False) -> list[dict]:
    """Base configuration and each variant over the same seeds; returns mean/std rows."""
    for v in variants:
        if v not in ABLATIONS:
            raise ValueError(f"unknown ablation variant {v!r}; choose from {sorted(ABLATIONS)}")
    root = root or output_dir(base.output_dir)
    rows = _run_seeds(base, "base", seeds, root, verbose)
    for v in variants:
        rows += _run_seeds(variant_config(base, v), v, seeds, root, verbose)
    return _table(rows, root / "ablation.csv")


def run_sweep(base: RunConfig, n_options: Sequence[int], seeds: Sequence[int] = range(5),
              root: Optional[Path] = None, verbose: bool = False) -> list[dict]:
    root = root or output_dir(base.output_dir)
    rows = []
    for k in n_options:
        cfg = RunConfig.from_json(base.to_json())
        cfg.n_options = int(k)
        rows += _run_seeds(cfg, f"options{k}", seeds, root, verbose)
    return _table(rows, root / "sweep.csv")


# ------------------------------------------------------------------ oracle checks

def oracle_check(instances: int = 30, seed: int = 0, tol: float = 1e-5) -> dict:
    """Termination-gradient theorem and exact entropy gradients against finite
    differences on random small instances. Returns the worst deviations."""
    from .mdp import build_test_mdp
    rng = np.random.default_rng(seed)
    worst_theorem = worst_entropy = 0.0
    for _ in range(instances):
        n_states = int(rng.integers(4, 7))
        n_opt = int(rng.integers(2, 4))
        mdp = build_test_mdp("random", n_states, rng)
        params = oracle.random_option_params(n_states, n_opt, mdp.n_actions, rng)
        for o in range(n_opt):
            worst_theorem = max(worst_theorem, oracle.check_termination_gradient_theorem(mdp, params, o))
        d = oracle.build_model(mdp, params).d_start
        g_marg, g_cond = oracle.exact_entropy_gradients(mdp, params, d)

        def entropies(flat):
            m = oracle.build_model(mdp, params.with_logits(flat.reshape(params.beta_logits.shape)), d)
            return np.array(oracle.conditional_entropies(m))

        fd = oracle.finite_difference(entropies, params.beta_logits.ravel())
        dev = max(np.abs(fd[:, 0] - g_marg.ravel()).max(), np.abs(fd[:, 1] - g_cond.ravel()).max())
        worst_entropy = max(worst_entropy, float(dev))
    return {"termination_gradient": worst_theorem, "entropy_gradient": worst_entropy,
            "passed": worst_theorem <= tol and worst_entropy <= tol}


# ------------------------------------------------------------------ entry point

def load_config(path, seed: Optional[int] = None, overrides: Sequence[str] = ()) -> RunConfig:
    config = RunConfig.from_json(Path(path).read_text())
    for item in overrides:
        apply_override(config, item)
    if seed is not None:
        config.seed = seed
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="imoc")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--override", action="append", default=[])
    p.add_argument("--out")
    p.add_argument("--verbose", action="store_true")
    p = sub.add_parser("eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("viz")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=100)
    for name in ("ablate", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seeds", default="0,1,2,3,4")
        p.add_argument("--override", action="append", default=[])
        p.add_argument("--verbose", action="store_true")
        if name == "ablate":
            p.add_argument("--variants", default="")
        else:
            p.add_argument("--n-options", default="2,4,6,8")
    p = sub.add_parser("oracle-check")
    p.add_argument("--instances", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    try:
        if args.command == "train":
            config = load_config(args.config, args.seed, args.override)
            log = run_training(config, args.out, verbose=args.verbose)
            print(f"final eval return {log.rows[-1]['eval_return']:.4f} -> {log.path.parent}")
        elif args.command == "eval":
            print(f"mean return {evaluate_checkpoint(args.checkpoint, args.episodes, args.seed):.4f}")
        elif args.command == "viz":
            doc = export_visualization(args.checkpoint, args.out, episodes=args.episodes)
            div = termination_diversity(doc)
            print(f"wrote {args.out}; mean pairwise TV {div['mean_tv']:.3f}")
        elif args.command in ("ablate", "sweep"):
            config = load_config(args.config, None, args.override)
            seeds = [int(s) for s in args.seeds.split(",") if s]
            if args.command == "ablate":
                variants = [v for v in args.variants.split(",") if v]
                table = run_ablation(config, variants, seeds, verbose=args.verbose)
            else:
                counts = [int(k) for k in args.n_options.split(",") if k]
                table = run_sweep(config, counts, seeds, verbose=args.verbose)
            for row in table:
                print(f"{row['config']:<22s} n={row['n']}  {row['mean']:+.3f} +- {row['std']:.3f}")
        elif args.command == "oracle-check":
            res = oracle_check(args.instances, args.seed)
            for key in ("termination_gradient", "entropy_gradient"):
                print(f"{key}: max deviation {res[key]:.2e}")
            print("PASS" if res["passed"] else "FAIL")
            return 0 if res["passed"] else 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
