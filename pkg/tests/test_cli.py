import json

import numpy as np
import pytest

from imoc import cli
from imoc.config import AgentConfig, RunConfig, apply_override
from imoc.mdp import FourRoomsConfig


def tiny(tmp_path, **kw) -> RunConfig:
    agent = AgentConfig(n_actors=2, rollout_len=5, hidden=8, classifier_batch=8, buffer_capacity=32)
    cfg = RunConfig(agent=agent, total_env_steps=400, eval_interval=100, eval_episodes=2,
                    final_eval_episodes=3, output_dir=str(tmp_path / "run"), **kw)
    return cfg


def test_config_json_roundtrip():
    cfg = RunConfig(env=FourRoomsConfig(goal_relocation=((10, {0: 2.0, 1: 1.0, 2: 1.0}),)))
    back = RunConfig.from_json(cfg.to_json())
    assert back == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"algo": "a2c"})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"agent": {"lr": 1.0}})


def test_validation_lists_all_errors():
    cfg = RunConfig(algorithm="dqn", total_env_steps=0)
    cfg.agent.rollout_len = 0
    errors = cfg.validate()
    assert len(errors) == 3


def test_overrides():
    cfg = RunConfig()
    apply_override(cfg, "agent.c_mu=0.2")
    apply_override(cfg, "agent.disable_mi_reg=true")
    apply_override(cfg, "n_options=6")
    apply_override(cfg, "total_env_steps=1e5")
    assert cfg.agent.c_mu == 0.2 and cfg.agent.disable_mi_reg and cfg.n_options == 6
    assert cfg.total_env_steps == 100_000
    with pytest.raises(ValueError):
        apply_override(cfg, "agent.nope=1")
    with pytest.raises(ValueError):
        apply_override(cfg, "agent.c_mu")


def test_run_training_outputs(tmp_path):
    cfg = tiny(tmp_path, oracle_attach=True)
    log = cli.run_training(cfg)
    out = tmp_path / "run"
    rows = cli.read_log(out / cli.LOG_NAME)
    steps = [r["env_step"] for r in rows]
    assert steps == sorted(set(steps)) and steps[-1] >= 400
    assert all(np.isfinite(r["exact_mi"]) and r["exact_mi"] >= -1e-9 for r in rows)
    assert RunConfig.from_json((out / cli.CONFIG_NAME).read_text()) == cfg
    assert json.loads((out / cli.SUMMARY_NAME).read_text())["final_return"] == log.rows[-1]["eval_return"]


def test_training_is_byte_identical(tmp_path):
    a = tiny(tmp_path)
    cli.run_training(a, tmp_path / "a")
    cli.run_training(a, tmp_path / "b")
    for name in (cli.LOG_NAME, cli.CHECKPOINT_NAME, cli.CONFIG_NAME):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.output_dir("x/y") == tmp_path / "x" / "y"
    assert cli.output_dir("/abs") == type(tmp_path)("/abs")


def test_eval_and_viz(tmp_path):
    cfg = tiny(tmp_path)
    cli.run_training(cfg)
    ckpt = tmp_path / "run" / cli.CHECKPOINT_NAME
    r = cli.evaluate_checkpoint(ckpt, 3)
    assert r == cli.evaluate_checkpoint(ckpt, 3)
    doc = cli.export_visualization(ckpt, tmp_path / "viz.json", episodes=5)
    n_free = len(doc["options"][0]["cells"])
    assert sum(len(o["cells"]) for o in doc["options"]) == cfg.agent.n_options * n_free
    for o in doc["options"]:
        for c in o["cells"]:
            assert sum(c["action_probs"]) == pytest.approx(1.0, abs=1e-6)
            assert 0.0 <= c["beta"] <= 1.0
    assert json.loads((tmp_path / "viz.json").read_text()) == json.loads(json.dumps(doc))
    div = cli.termination_diversity(doc)
    assert len(div["tv"]) == 6 and all(0 <= v <= 1 for v in div["tv"].values())


def test_ablation_table(tmp_path):
    cfg = tiny(tmp_path)
    cfg.total_env_steps = 100
    table = cli.run_ablation(cfg, [], seeds=[0, 1], root=tmp_path / "abl")
    assert [r["config"] for r in table] == ["base"] and table[0]["n"] == 2
    with pytest.raises(ValueError):
        cli.run_ablation(cfg, ["warp_drive"], seeds=[0], root=tmp_path / "abl")
    assert set(cli.ABLATIONS) == {"eps_greedy_selection", "disable_mi_reg", "n_step_advantage",
                                  "truncated_advantage"}
    assert cli.variant_config(cfg, "truncated_advantage").agent.advantage_mode == "truncated"


def test_sweep_sets_option_count(tmp_path):
    cfg = tiny(tmp_path)
    cfg.total_env_steps = 50
    table = cli.run_sweep(cfg, [2, 3], seeds=[0], root=tmp_path / "sw")
    assert [r["config"] for r in table] == ["options2", "options3"]


def test_main_commands(tmp_path, capsys):
    cfg = tiny(tmp_path)
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    out = tmp_path / "m"
    assert cli.main(["train", "--config", str(path), "--seed", "3", "--out", str(out),
                     "--override", "agent.c_mu=0.1"]) == 0
    assert json.loads((out / cli.CONFIG_NAME).read_text())["seed"] == 3
    assert cli.main(["eval", "--checkpoint", str(out / cli.CHECKPOINT_NAME), "--episodes", "2"]) == 0
    assert cli.main(["viz", "--checkpoint", str(out / cli.CHECKPOINT_NAME), "--out",
                     str(tmp_path / "v.json"), "--episodes", "2"]) == 0
    assert cli.main(["oracle-check", "--instances", "3"]) == 0
    assert "PASS" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"algorithm": "dqn"}))
    assert cli.main(["train", "--config", str(bad)]) == 2


def test_cached_run_reuses_only_identical_config(tmp_path):
    cfg = tiny(tmp_path)
    out = tmp_path / "cached"
    first = cli.cached_run(cfg, out)
    stamp = (out / cli.CHECKPOINT_NAME).stat().st_mtime_ns
    again = cli.cached_run(cfg, out)
    assert (out / cli.CHECKPOINT_NAME).stat().st_mtime_ns == stamp
    assert again == first
    cfg.seed = 5
    changed = cli.cached_run(cfg, out)
    assert changed["seed"] == 5
    assert json.loads((out / cli.CONFIG_NAME).read_text())["seed"] == 5
