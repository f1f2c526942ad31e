import json
import os
import subprocess
import sys

import numpy as np
import pytest

import sacflow.cli as cli
import sacflow.envs as envs
import sacflow.sac as sac
from sacflow.cli import ConfigError, load_checkpoint, resolve_config, restore_state, save_checkpoint

TINY = ["env=bandit", "steps=300", "learning_starts=64", "batch=32", "buffer=2048",
        "k_steps=2", "critic_hidden=16,16", "log_interval=100"]


def run_cli(args, cwd):
    env = dict(os.environ, OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1")
    return subprocess.run([sys.executable, "-m", "sacflow.cli", *args],
                          capture_output=True, text=True, cwd=cwd, env=env)


def sets(pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


# --- config resolution ---


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        resolve_config(None, ["bogus_key=1"])
    with pytest.raises(ConfigError, match="unknown config key"):
        resolve_config({"nope": 2})


def test_defaults_match_common_table():
    cfg = resolve_config()
    assert cfg["actor_lr"] == 3e-4
    assert cfg["critic_lr"] == 1e-3
    assert cfg["batch"] == 512
    assert cfg["buffer"] == 1_000_000
    assert cfg["gamma"] == 0.99
    assert cfg["learning_starts"] == 50_000
    assert cfg["adam_b1_actor"] == 0.5
    assert cfg["init_alpha"] == 0.2
    assert cfg["tau"] == 1.0  # flow actor default
    assert cfg["k_steps"] == 4
    assert cfg["noise_mode"] == "learned"


def test_gaussian_actor_preset_values():
    cfg = resolve_config(None, ["actor=gaussian"])
    assert cfg["tau"] == 0.005
    tc = cli.train_config(cfg, action_dim=3)
    assert tc.target_entropy == -3.0


def test_o2o_preset_resolves_robomimic_beta():
    cfg = resolve_config(None, ["preset=o2o"])
    assert cfg["beta_offline"] == 10_000.0 and cfg["beta_online"] == 1_000.0
    assert cfg["batch"] == 256 and cfg["tau"] == 0.005
    assert cfg["noise_mode"] == "fixed" and cfg["fixed_sigma"] == 0.10
    assert cfg["flow_t.d_model"] == 128
    assert cfg["flow_g.cand_hidden"] == (512, 512, 512, 512)
    assert cfg["flow_g.gate_hidden"] == (256,)


def test_beta_presets_for_cube_tasks():
    cube = resolve_config(None, ["preset=o2o", "beta_preset=cube-double"])
    assert cube["beta_offline"] == 300.0 and cube["beta_online"] == 300.0
    triple = resolve_config(None, ["preset=o2o", "beta_preset=cube-triple"])
    assert triple["beta_offline"] == 100.0
    with pytest.raises(ConfigError, match="beta_preset"):
        resolve_config(None, ["beta_preset=lift-only"])


def test_explicit_beta_overrides_preset():
    cfg = resolve_config(None, ["preset=o2o", "beta_preset=robomimic", "beta_offline=42"])
    assert cfg["beta_offline"] == 42.0 and cfg["beta_online"] == 1_000.0


def test_bad_value_names_key():
    with pytest.raises(ConfigError, match="batch"):
        resolve_config(None, ["batch=many"])


# --- CLI subprocess behavior ---


def test_config_error_exit_code(tmp_path):
    r = run_cli(["train-scratch", "--set", "bogus=1"], tmp_path)
    assert r.returncode == 2
    assert "bogus" in r.stderr


def test_missing_demos_is_config_error(tmp_path):
    r = run_cli(["train-o2o", *sets(TINY), "--set", "l_off=10", "--set", "l_on=0",
                 "--set", "env=sparse-reach", "--set", "out_dir=o"], tmp_path)
    assert r.returncode == 2
    assert "demos" in r.stderr


def test_numerical_abort_exit_code(tmp_path):
    # an absurd initial temperature overflows the actor loss immediately
    r = run_cli(["train-scratch", *sets(TINY), "--set", "init_alpha=1e308",
                 "--set", "out_dir=boom"], tmp_path)
    assert r.returncode == 3
    assert "non-finite" in r.stderr


def test_gradcheck_command_exit_zero(tmp_path):
    r = run_cli(["gradcheck"], tmp_path)
    assert r.returncode == 0, r.stderr
    assert r.stdout.count("PASS") == 7 and "FAIL" not in r.stdout


def test_gen_demos_and_file_format(tmp_path):
    r = run_cli(["gen-demos", "--set", "env=sparse-reach", "--set", "dataset_size=5",
                 "--set", "out_dir=d.txt", "--seed", "3"], tmp_path)
    assert r.returncode == 0, r.stderr
    ds = envs.load_demos(tmp_path / "d.txt")
    assert ds.env_name == "sparse-reach" and len(ds) > 0


def test_train_writes_all_artifacts_and_is_deterministic(tmp_path):
    args = ["train-scratch", *sets(TINY), "--seed", "7"]
    r1 = run_cli([*args, "--set", "out_dir=runA"], tmp_path)
    r2 = run_cli([*args, "--set", "out_dir=runB"], tmp_path)
    assert r1.returncode == 0, r1.stderr
    a, b = tmp_path / "runA", tmp_path / "runB"
    for f in ("run.json", "metrics.csv", "gradnorms.csv", "checkpoint-300.bin", "replay-300.bin"):
        assert (a / f).exists(), f
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "gradnorms.csv").read_bytes() == (b / "gradnorms.csv").read_bytes()
    assert (a / "replay-300.bin").read_bytes() == (b / "replay-300.bin").read_bytes()


def test_run_json_is_self_describing(tmp_path):
    r = run_cli(["train-scratch", *sets(TINY), "--set", "out_dir=run", "--seed", "5"], tmp_path)
    assert r.returncode == 0, r.stderr
    stored = json.load(open(tmp_path / "run" / "run.json"))
    # a restarted run resolving the stored config reproduces it exactly
    assert cli.resolve_config(stored) == cli.resolve_config(stored)
    resolved = cli.resolve_config({k: tuple(v) if isinstance(v, list) else v
                                   for k, v in stored.items()})
    assert resolved["seed"] == 5 and resolved["env"] == "bandit"


def test_checkpoint_restore_continues_identically(tmp_path):
    base = ["train-scratch", *sets(TINY), "--seed", "11"]
    r_full = run_cli([*base, "--set", "out_dir=full"], tmp_path)
    r_half = run_cli(["train-scratch", *sets(TINY[:-1]), "--set", "log_interval=100",
                      "--set", "steps=150", "--set", "out_dir=half", "--seed", "11"], tmp_path)
    assert r_full.returncode == 0 and r_half.returncode == 0
    r_resume = run_cli([*base, "--set", "out_dir=resumed",
                        "--set", "resume=half/checkpoint-150.bin"], tmp_path)
    assert r_resume.returncode == 0, r_resume.stderr
    full_rows = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
    res_rows = (tmp_path / "resumed" / "metrics.csv").read_text().splitlines()
    tail_full = [r for r in full_rows[1:] if int(r.split(",")[0]) > 150]
    assert tail_full == res_rows[1:]
    m1, a1 = load_checkpoint(tmp_path / "full" / "checkpoint-300.bin")
    m2, a2 = load_checkpoint(tmp_path / "resumed" / "checkpoint-300.bin")
    assert all(np.array_equal(a1[k], a2[k]) for k in a1)
    assert m1["rng"] == m2["rng"]


def test_eval_command(tmp_path):
    r = run_cli(["train-scratch", *sets(TINY), "--set", "out_dir=run"], tmp_path)
    assert r.returncode == 0
    r = run_cli(["eval", "--checkpoint", "run/checkpoint-300.bin", "--set",
                 "eval_episodes=5"], tmp_path)
    assert r.returncode == 0, r.stderr
    stats = json.loads(r.stdout)
    assert "mean_return" in stats and "success_rate" in stats


def test_diag_grads_linear_mode(tmp_path):
    r = run_cli(["diag-grads", "--mode", "linear", "--w", "0.5",
                 "--set", "out_dir=diag", "--set", "k_steps=8"], tmp_path)
    assert r.returncode == 0, r.stderr
    lines = (tmp_path / "diag" / "gradnorms.csv").read_text().splitlines()
    assert lines[0] == "step,k,norm" and len(lines) == 9
    norms = [float(l.split(",")[2]) for l in lines[1:]]
    assert all(a > b for a, b in zip(norms, norms[1:]))  # monotone in k


def test_run_lock_rejects_second_writer(tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / "run.lock").touch()
    r = run_cli(["train-scratch", *sets(TINY), "--set", "out_dir=locked"], tmp_path)
    assert r.returncode == 1
    assert "another writer" in r.stderr


# --- checkpoint unit-level ---


def test_checkpoint_array_mismatch_detected(tmp_path):
    cfg = resolve_config(None, TINY + ["out_dir=x"], 0)
    env = envs.make_env("bandit")
    state = cli.build_state(cfg, env)
    p = tmp_path / "c.bin"
    save_checkpoint(state, cfg, p)
    other = resolve_config(None, TINY + ["actor=flow_t"], 0)
    with pytest.raises(ValueError, match="does not match"):
        restore_state(other, env, p)
