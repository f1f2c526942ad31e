"""Config-driven experiment runner and artifact I/O.

Subcommands: pretrain-fm, train-scratch, train-o2o, gen-demos, gradcheck,
diag-grads, eval, export-plots. Training runs populate an output directory
with run.json (resolved config), metrics.csv, gradnorms.csv,
checkpoint-<step>.bin and replay-<step>.bin. Exit codes: 0 success,
2 config error, 3 numerical abort (NaN), 1 anything else.

Config files are flat JSON with dotted keys; `--set key=value` overrides.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import struct
import sys

import numpy as np

from . import autodiff as ad
from . import diagnostics, envs, rollout, sac, velocity

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


def _parse_int_tuple(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).split(",") if x != "")


def _parse_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


# key -> (parser, default). Defaults follow the from-scratch hyperparameter
# table; the "o2o" preset overrides the offline-to-online entries below.
CONFIG_SCHEMA = {
    "preset": (str, "scratch"),
    "env": (str, "point-mass"),
    "actor": (str, "flow_g"),  # classic | flow_g | flow_t | gaussian
    "seed": (int, 0),
    "steps": (int, 1_000_000),
    "out_dir": (str, ""),
    "k_steps": (int, 4),
    "noise_mode": (str, ""),  # "" = preset default (learned / fixed)
    "fixed_sigma": (float, 0.10),
    "batch": (int, 512),
    "gamma": (float, 0.99),
    "tau": (float, -1.0),  # -1 = preset default (1.0 flow, 0.005 gaussian)
    "actor_lr": (float, 3e-4),
    "critic_lr": (float, 1e-3),
    "alpha_lr": (float, 3e-4),
    "adam_b1_actor": (float, 0.5),
    "learning_starts": (int, 50_000),
    "buffer": (int, 1_000_000),
    "num_critics": (int, 2),
    "critic_hidden": (_parse_int_tuple, (256, 256)),
    "init_alpha": (float, 0.2),
    "target_entropy": (str, "auto"),  # auto = 0 flow, -action_dim gaussian
    "l_off": (int, 0),
    "l_on": (int, 0),
    "beta_preset": (str, ""),  # robomimic | cube-double | cube-triple
    "beta_offline": (float, 10_000.0),
    "beta_online": (float, 1_000.0),
    "fm_lr": (float, 3e-4),
    "fm_steps": (int, 2000),
    "fm_batch": (int, 256),
    "demos": (str, ""),
    "dataset": (str, "bandit"),
    "dataset_size": (int, 8192),
    "log_interval": (int, 1000),
    "checkpoint_interval": (int, 0),
    "record_wallclock": (_parse_bool, False),
    "resume": (str, ""),
    "eval_episodes": (int, 20),
    "classic.hidden": (_parse_int_tuple, (256, 256)),
    "flow_g.gate_hidden": (_parse_int_tuple, (128,)),
    "flow_g.cand_hidden": (_parse_int_tuple, (128,)),
    "flow_t.d_model": (int, 64),
    "flow_t.n_heads": (int, 4),
    "flow_t.n_layers": (int, 2),
    "flow_t.ffn_mult": (int, 4),
    "flow_t.self_attention": (_parse_bool, True),
    "time_dim": (int, 16),
    "logstd_hidden": (_parse_int_tuple, (64,)),
}

# offline-to-online preset: hidden 512x4 actors, d=128 decoder, fixed sigma,
# batch 256, tau 0.005, robomimic-style beta schedule
O2O_PRESET = {
    "batch": 256,
    "tau": 0.005,
    "noise_mode": "fixed",
    "classic.hidden": (512, 512, 512, 512),
    "flow_g.cand_hidden": (512, 512, 512, 512),
    "flow_g.gate_hidden": (256,),
    "flow_t.d_model": 128,
    "beta_offline": 10_000.0,
    "beta_online": 1_000.0,
}

BETA_PRESETS = {
    "robomimic": (10_000.0, 1_000.0),
    "cube-double": (300.0, 300.0),
    "cube-triple": (100.0, 100.0),
}


def resolve_config(file_cfg: dict | None = None, sets: list[str] | None = None,
                   seed: int | None = None) -> dict:
    """Merge schema defaults, preset, config file and --set overrides.

    Unknown keys are rejected; every value is parsed through the schema.
    """
    merged: dict = {}
    file_cfg = dict(file_cfg or {})
    overrides = {}
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    for source in (file_cfg, overrides):
        for k in source:
            if k not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")

    preset = str(overrides.get("preset", file_cfg.get("preset", "scratch")))
    if preset not in ("scratch", "o2o"):
        raise ConfigError(f"unknown preset {preset!r}")
    for key, (parse, default) in CONFIG_SCHEMA.items():
        val = default
        if preset == "o2o" and key in O2O_PRESET:
            val = O2O_PRESET[key]
        if key in file_cfg:
            val = file_cfg[key]
        if key in overrides:
            val = overrides[key]
        try:
            merged[key] = parse(val) if not isinstance(val, tuple) else val
        except (TypeError, ValueError) as e:
            raise ConfigError(f"config key {key!r}: {e}") from e
    if seed is not None:
        merged["seed"] = int(seed)

    bp = merged["beta_preset"]
    if bp:
        if bp not in BETA_PRESETS:
            raise ConfigError(f"unknown beta_preset {bp!r}; choose from {sorted(BETA_PRESETS)}")
        if "beta_offline" not in file_cfg and "beta_offline" not in overrides:
            merged["beta_offline"] = BETA_PRESETS[bp][0]
        if "beta_online" not in file_cfg and "beta_online" not in overrides:
            merged["beta_online"] = BETA_PRESETS[bp][1]
    if merged["noise_mode"] == "":
        merged["noise_mode"] = "fixed" if preset == "o2o" else "learned"
    if merged["noise_mode"] not in ("fixed", "learned"):
        raise ConfigError(f"bad noise_mode {merged['noise_mode']!r}")
    if merged["tau"] < 0:
        merged["tau"] = 0.005 if merged["actor"] == "gaussian" else 1.0
    if merged["actor"] not in ("classic", "flow_g", "flow_t", "gaussian"):
        raise ConfigError(f"unknown actor {merged['actor']!r}")
    return merged


def velocity_config(cfg: dict, state_dim: int, action_dim: int) -> velocity.VelocityConfig:
    return velocity.VelocityConfig(
        kind=cfg["actor"],
        state_dim=state_dim,
        action_dim=action_dim,
        trunk_hidden=cfg["classic.hidden"],
        gate_hidden=cfg["flow_g.gate_hidden"],
        cand_hidden=cfg["flow_g.cand_hidden"],
        d_model=cfg["flow_t.d_model"],
        n_heads=cfg["flow_t.n_heads"],
        n_layers=cfg["flow_t.n_layers"],
        ffn_mult=cfg["flow_t.ffn_mult"],
        include_self_attention=cfg["flow_t.self_attention"],
        time_dim=cfg["time_dim"],
        logstd_hidden=cfg["logstd_hidden"],
        noise=velocity.StepNoise(cfg["noise_mode"], cfg["fixed_sigma"]),
    )


def train_config(cfg: dict, action_dim: int) -> sac.TrainConfig:
    te = 0.0 if cfg["actor"] != "gaussian" else -float(action_dim)
    if cfg["target_entropy"] != "auto":
        te = float(cfg["target_entropy"])
    return sac.TrainConfig(
        total_steps=cfg["steps"],
        batch=cfg["batch"],
        gamma=cfg["gamma"],
        tau=cfg["tau"],
        actor_lr=cfg["actor_lr"],
        critic_lr=cfg["critic_lr"],
        alpha_lr=cfg["alpha_lr"],
        adam_b1_actor=cfg["adam_b1_actor"],
        learning_starts=cfg["learning_starts"],
        buffer_capacity=cfg["buffer"],
        k_steps=cfg["k_steps"],
        num_critics=cfg["num_critics"],
        critic_hidden=cfg["critic_hidden"],
        init_alpha=cfg["init_alpha"],
        target_entropy=te,
        l_off=cfg["l_off"],
        l_on=cfg["l_on"],
        beta_offline=cfg["beta_offline"],
        beta_online=cfg["beta_online"],
        fm_lr=cfg["fm_lr"],
        log_interval=cfg["log_interval"],
        checkpoint_interval=cfg["checkpoint_interval"],
        record_wallclock=cfg["record_wallclock"],
    )


# ---------------------------------------------------------------------------
# checkpoints


def _state_arrays(state: sac.SacState) -> dict:
    arrays = {}
    for name, p in state.actor.params.items():
        arrays[f"p.actor.{name}"] = p.values
    for name, p in state.critic.params.items():
        arrays[f"p.critic.{name}"] = p.values
    for name, p in state.critic.target_params.items():
        arrays[f"p.target.{name}"] = p.values
    arrays["p.alpha.log_alpha"] = state.temp.log_alpha.values
    for tag, adam in (("actor", state.actor_adam), ("critic", state.critic_adam),
                      ("fm", state.fm_adam), ("alpha", state.temp.adam)):
        for name, m in adam.first_moment.items():
            arrays[f"adam.{tag}.m.{name}"] = m
        for name, v in adam.second_moment.items():
            arrays[f"adam.{tag}.v.{name}"] = v
    return arrays


def save_checkpoint(state: sac.SacState, cfg: dict, path) -> None:
    """Binary checkpoint: params, optimizer states, alpha, step, rng state."""
    arrays = _state_arrays(state)
    rng_state = state.rng.bit_generator.state
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "step": state.step,
        "rng": json.loads(json.dumps(rng_state, default=str)),
        "env_state": None if state.env_state is None else list(state.env_state),
        "episode_return": state.episode_return,
        "episode_len": state.episode_len,
        "ret_sum": state.ret_sum, "ret_n": state.ret_n,
        "succ_sum": state.succ_sum, "succ_n": state.succ_n,
        "last_actor_loss": state.last_actor_loss,
        "last_critic_loss": state.last_critic_loss,
        "last_mean_log_pc": state.last_mean_log_pc,
        "adam_steps": {tag: adam.step_count for tag, adam in
                       (("actor", state.actor_adam), ("critic", state.critic_adam),
                        ("fm", state.fm_adam), ("alpha", state.temp.adam))},
        "runtime_stats": dict(ad.runtime_stats),
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, a in arrays.items():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(f.read(blob_len))
        arrays = {}
        for name, shape in meta["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            buf = np.frombuffer(f.read(8 * n), dtype="<f8")
            arrays[name] = buf.reshape(shape) if shape else buf.reshape(())
    return meta, arrays


def _restore_rng(spec: dict) -> np.random.Generator:
    gen = np.random.default_rng()
    st = {"bit_generator": spec["bit_generator"],
          "state": {k: int(v) for k, v in spec["state"].items()},
          "has_uint32": int(spec["has_uint32"]),
          "uinteger": int(spec["uinteger"])}
    gen.bit_generator.state = st
    return gen


def build_state(cfg: dict, env) -> sac.SacState:
    rng = np.random.default_rng(cfg["seed"])
    spec = env.spec
    vc = None if cfg["actor"] == "gaussian" else velocity_config(cfg, spec.state_dim, spec.action_dim)
    actor_rng = np.random.default_rng(rng.integers(0, 2**31 - 1))
    actor = sac.make_actor(cfg["actor"] if cfg["actor"] == "gaussian" else cfg["actor"],
                           vc, spec.state_dim, spec.action_dim, cfg["k_steps"], actor_rng)
    return sac.init_state(train_config(cfg, spec.action_dim), env, actor, rng)


def restore_state(cfg: dict, env, checkpoint_path, replay_path=None) -> sac.SacState:
    meta, arrays = load_checkpoint(checkpoint_path)
    state = build_state(cfg, env)
    named = _state_arrays(state)
    adams = {"actor": state.actor_adam, "critic": state.critic_adam,
             "fm": state.fm_adam, "alpha": state.temp.adam}
    for name, a in arrays.items():
        if name in named:
            named[name][...] = a
        elif name.startswith("adam."):
            _, tag, kind, pname = name.split(".", 3)
            store = adams[tag].first_moment if kind == "m" else adams[tag].second_moment
            store[pname] = np.array(a)
        else:
            raise ValueError(f"checkpoint array {name!r} does not match the configured model")
    for tag, adam in adams.items():
        adam.step_count = meta["adam_steps"][tag]
    state.step = meta["step"]
    state.rng = _restore_rng(meta["rng"])
    state.env_state = None if meta["env_state"] is None else np.array(meta["env_state"])
    state.episode_return = meta["episode_return"]
    state.episode_len = meta["episode_len"]
    state.ret_sum, state.ret_n = meta["ret_sum"], meta["ret_n"]
    state.succ_sum, state.succ_n = meta["succ_sum"], meta["succ_n"]
    state.last_actor_loss = meta["last_actor_loss"]
    state.last_critic_loss = meta["last_critic_loss"]
    state.last_mean_log_pc = meta["last_mean_log_pc"]
    ad.runtime_stats.update(meta["runtime_stats"])
    if replay_path is not None:
        state.replay = sac.ReplayBuffer.restore(replay_path, cfg["buffer"])
    return state


# ---------------------------------------------------------------------------
# subcommands


def _require_out_dir(cfg: dict, default: str) -> str:
    out = cfg["out_dir"] or default
    os.makedirs(out, exist_ok=True)
    return out


def _run_training(cfg: dict, mode: str) -> int:
    env = envs.make_env(cfg["env"])
    out = _require_out_dir(cfg, f"runs/{mode}")
    lock = diagnostics.SingleWriterLock(os.path.join(out, "run.lock"))
    try:
        ad.reset_runtime_stats()
        with open(os.path.join(out, "run.json"), "w") as f:
            json.dump({k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
                      f, indent=2, sort_keys=True)
        tc = train_config(cfg, env.spec.action_dim)
        if cfg["resume"]:
            replay = cfg["resume"].replace("checkpoint-", "replay-")
            state = restore_state(cfg, env, cfg["resume"],
                                  replay if os.path.exists(replay) else None)
        else:
            state = build_state(cfg, env)

        def on_checkpoint(st):
            save_checkpoint(st, cfg, os.path.join(out, f"checkpoint-{st.step}.bin"))
            st.replay.snapshot(os.path.join(out, f"replay-{st.step}.bin"))

        def on_phase_switch(st):
            print(f"beta switch at step {st.step}: {tc.beta_offline} -> {tc.beta_online}")

        with diagnostics.metrics_writer(os.path.join(out, "metrics.csv"), tc.k_steps) as metrics, \
                diagnostics.gradnorm_writer(os.path.join(out, "gradnorms.csv")) as gradnorms:
            if mode == "train-o2o":
                if not cfg["demos"]:
                    raise ConfigError("train-o2o requires the 'demos' key (path to a demo file)")
                demos = envs.load_demos(cfg["demos"])
                sac.train_offline_to_online(tc, env, state, demos, metrics, gradnorms,
                                            on_checkpoint, on_phase_switch)
            else:
                sac.train_from_scratch(tc, env, state, metrics, gradnorms, on_checkpoint)
        print(f"done: {state.step} steps -> {out}")
        return 0
    finally:
        lock.release()


def _run_pretrain_fm(cfg: dict) -> int:
    out = _require_out_dir(cfg, "runs/pretrain-fm")
    rng = np.random.default_rng(cfg["seed"])
    if cfg["demos"]:
        ds = envs.load_demos(cfg["demos"])
        states = np.stack([t.s for t in ds.transitions])
        actions = np.stack([t.a for t in ds.transitions])
        env = envs.make_env(ds.env_name)
    elif cfg["dataset"] == "bandit":
        env = envs.make_env("bandit")
        states, actions = envs.bandit_dataset(cfg["dataset_size"], rng)
    else:
        raise ConfigError(f"unknown dataset {cfg['dataset']!r} (use 'bandit' or pass demos=...)")
    cfg = dict(cfg, env=env.spec.name)
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump({k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
                  f, indent=2, sort_keys=True)
    state = build_state(cfg, env)
    losses: list[float] = []
    sac.pretrain_flow_matching(state.actor.model, states, actions, cfg["fm_steps"],
                               cfg["fm_batch"], cfg["fm_lr"], cfg["adam_b1_actor"],
                               state.rng, losses)
    save_checkpoint(state, cfg, os.path.join(out, f"checkpoint-{cfg['fm_steps']}.bin"))
    print(f"flow-matching loss: first {losses[0]:.4f} last {losses[-1]:.4f} -> {out}")
    return 0


def _run_gen_demos(cfg: dict) -> int:
    if cfg["env"] != "sparse-reach":
        raise ConfigError("gen-demos supports env=sparse-reach")
    out = cfg["out_dir"] or "demos.txt"
    env = envs.make_env("sparse-reach")
    ds = envs.generate_demos(env, cfg["dataset_size"], np.random.default_rng(cfg["seed"]))
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    envs.save_demos(ds, out)
    print(f"wrote {len(ds)} transitions over {cfg['dataset_size']} episodes -> {out}")
    return 0


def _gradcheck_cases(seed: int):
    """(name, builder, params, tolerance) finite-difference cases at desk dims."""
    from .rollout import TimeGrid, log_path_density, noisy_rollout, squash_with_logdet
    from .velocity import StepNoise, VelocityConfig, VelocityModel

    cases = []
    rng = np.random.default_rng(seed)

    def tiny(kind, noise_mode="learned"):
        return VelocityModel(
            VelocityConfig(kind=kind, state_dim=3, action_dim=2, trunk_hidden=(8,),
                           gate_hidden=(8,), cand_hidden=(8,), d_model=8, n_heads=2,
                           n_layers=1, logstd_hidden=(6,), noise=StepNoise(noise_mode)),
            rng)

    for kind in ("classic", "flow_g", "flow_t"):
        model = tiny(kind)
        if kind == "flow_t":
            for name, p in model.params.items():
                if name.endswith(".o.w") or name.endswith("ffn.l1.w"):
                    p.values[...] = rng.standard_normal(p.values.shape) * 0.2
        A = ad.constant(rng.standard_normal((2, 2)))
        s = ad.constant(rng.standard_normal((2, 3)))

        def build(model=model, A=A, s=s):
            v = model.velocity(0.3, A, s)
            return ad.add(ad.mean_all(ad.square(v)), ad.mean_all(ad.square(model.step_std(0.3, A, s))))

        cases.append((f"velocity[{kind}]", build, model.params, 1e-4))

    u = ad.parameter(rng.standard_normal((3, 2)) * 2.0)

    def build_squash(u=u):
        a, corr = squash_with_logdet(u)
        return ad.add(ad.mean_all(ad.square(a)), ad.mean_all(corr))

    cases.append(("squash", build_squash, {"u": u}, 1e-4))

    model_lp = tiny("flow_g")
    s_lp = ad.constant(rng.standard_normal((2, 3)))
    grid = TimeGrid(2)
    with ad.no_grad():
        path = noisy_rollout(s_lp, grid, model_lp, rng=np.random.default_rng(seed + 1))

    def build_lp(model=model_lp, s=s_lp, path=path, grid=grid):
        return ad.mean_all(log_path_density(path, s, grid, model))

    cases.append(("log-density", build_lp, model_lp.params, 1e-4))

    for name, beta in (("actor-loss", None), ("actor-loss-o2o", 300.0)):
        actor = sac.FlowActor(tiny("flow_g"), k_steps=2)
        critic = sac.Critic(3, 2, (8,), 1, rng)
        states = rng.standard_normal((2, 3))
        buf_actions = rng.uniform(-0.5, 0.5, (2, 2))

        def build_al(actor=actor, critic=critic, states=states, beta=beta, buf=buf_actions, s2=seed + 2):
            if beta is None:
                loss, _ = sac.actor_loss(actor, critic, states, 0.2, np.random.default_rng(s2))
            else:
                loss, _ = sac.actor_loss_o2o(actor, critic, states, buf, 0.2, beta,
                                             np.random.default_rng(s2))
            return loss

        cases.append((name, build_al, actor.params, 1e-3))
    return cases


def _run_gradcheck(cfg: dict) -> int:
    failed = False
    for name, build, params, tol in _gradcheck_cases(cfg["seed"]):
        err = ad.finite_diff_check(build, params, h=1e-5)
        ok = err < tol
        failed = failed or not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e} (tol {tol:g})")
    return 1 if failed else 0


def _run_diag_grads(cfg: dict, mode: str, w: float, sigma: float, seeds: int) -> int:
    out = _require_out_dir(cfg, "runs/diag-grads")
    grid = rollout.TimeGrid(cfg["k_steps"])
    if mode == "linear":
        model = _LinearVelocity(w, sigma)
        s = ad.constant(np.zeros((64, 1)))
        path = rollout.noisy_rollout(s, grid, model, rng=np.random.default_rng(cfg["seed"]))
        ad.backward(ad.sum_all(path.pre_actions[-1]))
        prof = diagnostics.record_step_grad_norms(path)
        analytic = diagnostics.linear_chain_profile(w, grid, sigma)
        diff = float(np.max(np.abs(prof.norms - analytic)))
        with diagnostics.gradnorm_writer(os.path.join(out, "gradnorms.csv")) as gw:
            diagnostics.write_profile(gw, prof)
        print(f"linear diagnostic: max |measured - analytic| = {diff:.3e}")
        return 0 if diff < 1e-10 else 1
    # network mode: seed-averaged profiles for the three kinds plus gain-5 classic
    env = envs.make_env(cfg["env"])
    d_s, d_a = env.spec.state_dim, env.spec.action_dim
    seed_list = [cfg["seed"] + i for i in range(seeds)]
    rows = []
    for label, kind, gain in (("classic", "classic", 1.0), ("classic-gain5", "classic", 5.0),
                              ("flow_g", "flow_g", 1.0), ("flow_t", "flow_t", 1.0)):
        vc = velocity.scratch_config(kind, d_s, d_a)
        profs = [sac.measure_gradnorm_profile(kind, vc, d_s, d_a, cfg["k_steps"], s,
                                              weight_scale=gain) for s in seed_list]
        mean_prof = np.mean(profs, axis=0)
        sub = os.path.join(out, label)
        os.makedirs(sub, exist_ok=True)
        with diagnostics.gradnorm_writer(os.path.join(sub, "gradnorms.csv")) as gw:
            diagnostics.write_profile(gw, diagnostics.GradNormProfile(0, mean_prof))
        ratio = float(mean_prof.max() / mean_prof.min())
        rows.append((label, ratio))
        print(f"{label:14s} seed-averaged profile {np.round(mean_prof, 5)} ratio {ratio:.3f}")
    return 0


class _LinearVelocity:
    def __init__(self, w, sigma):
        self.cfg = velocity.VelocityConfig(kind="classic", state_dim=1, action_dim=1,
                                           noise=velocity.StepNoise("fixed", sigma))
        self.w = ad.parameter(np.asarray(w))
        self.params = {"w": self.w}

    def velocity(self, t, A, s):
        return ad.mul(A, self.w)

    def step_std(self, t, A, s):
        return self.cfg.noise.fixed_sigma


def _run_eval(cfg: dict, checkpoint: str) -> int:
    meta, _ = load_checkpoint(checkpoint)
    run_cfg = resolve_config(meta["config"])
    env = envs.make_env(run_cfg["env"])
    state = restore_state(run_cfg, env, checkpoint)
    stats = sac.evaluate_policy(state.actor, env, cfg["eval_episodes"], seed=cfg["seed"])
    print(json.dumps(stats, sort_keys=True))
    return 0


def _run_export_plots(argv: list[str]) -> int:
    try:
        from sacflow_report.cli import main as report_main
    except ImportError:
        print("export-plots needs the sacflow-report package (see report/ in the repo)",
              file=sys.stderr)
        return 1
    return report_main(argv)


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    p = argparse.ArgumentParser(prog="sacflow", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("pretrain-fm", "train-scratch", "train-o2o", "gen-demos", "gradcheck",
                 "diag-grads", "eval"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="flat JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int, default=None)
        if name == "diag-grads":
            sp.add_argument("--mode", choices=("linear", "network"), default="linear")
            sp.add_argument("--w", type=float, default=0.5)
            sp.add_argument("--sigma", type=float, default=0.1)
            sp.add_argument("--seeds", type=int, default=30)
        if name == "eval":
            sp.add_argument("--checkpoint", required=True)
    sub.add_parser("export-plots", add_help=False)
    return p


def run_command(argv: list[str]) -> int:
    if argv and argv[0] == "export-plots":
        return _run_export_plots(argv[1:])
    args = _build_parser().parse_args(argv)
    file_cfg = None
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
    cfg = resolve_config(file_cfg, args.set, args.seed)
    if args.command in ("train-scratch", "train-o2o"):
        return _run_training(cfg, args.command)
    if args.command == "pretrain-fm":
        return _run_pretrain_fm(cfg)
    if args.command == "gen-demos":
        return _run_gen_demos(cfg)
    if args.command == "gradcheck":
        return _run_gradcheck(cfg)
    if args.command == "diag-grads":
        return _run_diag_grads(cfg, args.mode, args.w, args.sigma, args.seeds)
    if args.command == "eval":
        return _run_eval(cfg, args.checkpoint)
    raise ConfigError(f"unknown command {args.command!r}")


def main() -> None:
    # single-threaded BLAS: faster at these sizes and keeps runs bit-reproducible
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    try:
        code = run_command(sys.argv[1:])
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        code = 2
    except sac.TrainingAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        code = 3
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        code = 1
    sys.exit(code)


if __name__ == "__main__":
    main()
