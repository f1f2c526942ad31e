"""Desk-scale experiment recipes shared by the acceptance suite and scripts/.

Each recipe returns plain dicts of measurements so callers can assert or
print them. Multi-seed training fans out over worker processes (each pinned
to single-threaded BLAS; runs are fully deterministic per seed).
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cli, envs, sac, velocity
from .rollout import TimeGrid, deterministic_rollout, noisy_rollout
from .velocity import StepNoise, VelocityModel

# desk-scale overrides for the 30k-step point-mass runs: paper defaults are
# kept except where the 2-core CPU budget forces smaller pieces (batch,
# critic width, decoder width). target_entropy=10: the benchmark-scale
# default of 0 is unattainable for a d_a=2, K=4 joint path density (its
# achievable log-density tops out near -10), so the temperature decays to
# zero and, once nothing anchors the pre-actions, optimizer drift saturates
# them and the policy collapses late in training; 10 sits inside the healthy
# entropy band observed on this task. Everything remains overridable.
DESK_SCRATCH = [
    "env=point-mass",
    "steps=30000",
    "learning_starts=1000",
    "buffer=100000",
    "batch=128",
    "critic_hidden=64,64",
    "flow_t.d_model=32",
    "target_entropy=10",
    # soft target updates: with the hard-copy default the critic churns and
    # late training (once alpha is small) intermittently collapses on this
    # task; 0.005 is the paper's own offline-to-online setting
    "tau=0.005",
    "log_interval=1000",
]

EVAL_SEED = 123
EVAL_EPISODES = 20


def desk_scratch_cfg(actor: str, seed: int, extra: list[str] | None = None) -> dict:
    return cli.resolve_config(None, DESK_SCRATCH + [f"actor={actor}"] + (extra or []), seed)


def point_mass_baselines(n_episodes: int = EVAL_EPISODES, seed: int = EVAL_SEED) -> dict:
    """Oracle (proportional controller) and uniform-random returns on the
    shared evaluation start set."""
    env = envs.make_env("point-mass")
    oracle = sac.evaluate_controller(envs.expert_action, env, n_episodes, seed)
    rng = np.random.default_rng(0)
    rand = sac.evaluate_controller(lambda s: rng.uniform(-1.0, 1.0, 2), env, n_episodes, seed)
    return {"oracle": oracle["mean_return"], "random": rand["mean_return"]}


def normalized_score(mean_return: float, baselines: dict) -> float:
    return (mean_return - baselines["random"]) / (baselines["oracle"] - baselines["random"])


def run_desk_scratch(job) -> dict:
    """One from-scratch training run; returns the normalized final score."""
    actor, seed, extra = job
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    cfg = desk_scratch_cfg(actor, seed, extra)
    env = envs.make_env(cfg["env"])
    state = cli.build_state(cfg, env)
    sac.train_from_scratch(cli.train_config(cfg, env.spec.action_dim), env, state)
    stats = sac.evaluate_policy(state.actor, env, EVAL_EPISODES, EVAL_SEED)
    base = point_mass_baselines()
    return {"actor": actor, "seed": seed, "mean_return": stats["mean_return"],
            "normalized": normalized_score(stats["mean_return"], base)}


def run_jobs_parallel(fn, jobs, workers: int | None = None) -> list:
    workers = workers or max(1, min(len(jobs), os.cpu_count() or 1))
    if workers == 1 or len(jobs) == 1:
        return [fn(j) for j in jobs]
    ctx = mp.get_context("fork")
    with ctx.Pool(workers) as pool:
        return pool.map(fn, jobs)


# ---------------------------------------------------------------------------
# offline-to-online


DESK_O2O = [
    "preset=o2o",
    "env=sparse-reach",
    "actor=flow_g",
    "batch=128",
    "critic_hidden=64,64",
    "buffer=100000",
    "log_interval=250",
    # desk-sized actor; the o2o preset's 512x4 backbone is a benchmark-scale setting
    "flow_g.cand_hidden=128",
    "flow_g.gate_hidden=128",
]


def run_desk_o2o(seed: int, l_off: int, l_on: int, beta_offline: float, beta_online: float,
                 n_demos: int = 200, eval_episodes: int = 50, extra: list[str] | None = None) -> dict:
    """Offline phase on scripted-expert demos, then online fine-tuning.

    Returns success rates evaluated after each phase plus the phase-switch
    step recorded by the loop callback.
    """
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    sets = DESK_O2O + [f"l_off={l_off}", f"l_on={l_on}", f"beta_offline={beta_offline}",
                       f"beta_online={beta_online}"] + (extra or [])
    cfg = cli.resolve_config(None, sets, seed)
    env = envs.make_env("sparse-reach")
    demos = envs.generate_demos(env, n_demos, np.random.default_rng(seed + 10_000))
    state = cli.build_state(cfg, env)
    tc = cli.train_config(cfg, env.spec.action_dim)
    result = {"switch_step": None}

    def on_switch(st):
        result["switch_step"] = st.step
        result["offline_success"] = sac.evaluate_policy(
            st.actor, env, eval_episodes, EVAL_SEED)["success_rate"]

    sac.train_offline_to_online(tc, env, state, demos, on_phase_switch=on_switch)
    result["online_success"] = sac.evaluate_policy(
        state.actor, env, eval_episodes, EVAL_SEED)["success_rate"]
    result["seed"] = seed
    return result


# ---------------------------------------------------------------------------
# multimodality


BASIN_RADIUS = 0.25
MODES = (0.6, -0.6)


def basin_fractions(actions: np.ndarray) -> dict:
    a = actions.reshape(-1)
    return {f"{m:+.1f}": float(np.mean(np.abs(a - m) <= BASIN_RADIUS)) for m in MODES}


def flow_matched_bandit_actor(seed: int = 0, fm_steps: int = 16_000, n_data: int = 8192,
                              kind: str = "classic", fm_batch: int = 64) -> tuple:
    """Flow actor flow-matched on the bimodal bandit dataset, plus the dataset.

    Small batches cover many more time draws per sample budget (the loss
    draws one t per evaluation), which matters for the late-time field that
    sharpens the modes.
    """
    rng = np.random.default_rng(seed)
    states, actions = envs.bandit_dataset(n_data, rng)
    vc = velocity.scratch_config(kind, 1, 1)
    vc.noise = StepNoise("fixed", 0.10)
    model = VelocityModel(vc, np.random.default_rng(seed + 1))
    sac.pretrain_flow_matching(model, states, actions, fm_steps, fm_batch, 3e-4, 0.5,
                               np.random.default_rng(seed + 2))
    return model, (states, actions)


def sample_flow_actions(model: VelocityModel, n: int, seed: int = 0, k_steps: int = 4) -> np.ndarray:
    """Generative sampling: deterministic rollout from A_0 ~ N(0, I), squashed."""
    rng = np.random.default_rng(seed)
    with ad.no_grad():
        s = ad.constant(np.zeros((n, 1)))
        A0 = ad.constant(rng.standard_normal((n, 1)))
        A = deterministic_rollout(s, A0, TimeGrid(k_steps), model)
    return np.tanh(A.values)


def gaussian_mle_bandit_actor(states: np.ndarray, actions: np.ndarray, seed: int = 0,
                              steps: int = 2000) -> sac.GaussianActor:
    """Max-likelihood fit of the tanh-squashed diagonal Gaussian on the same data."""
    actor = sac.GaussianActor(1, 1, np.random.default_rng(seed), hidden=(64, 64))
    adam = ad.AdamState(lr=1e-3)
    rng = np.random.default_rng(seed + 1)
    n = states.shape[0]
    targets_u = np.arctanh(np.clip(actions, -(1 - 1e-6), 1 - 1e-6))
    for _ in range(steps):
        idx = rng.integers(0, n, 256)
        s = ad.constant(states[idx])
        mean, std = actor._heads(s)
        nll = ad.mul(ad.mean_all(ad.gaussian_log_density(ad.constant(targets_u[idx]), mean, std)), -1.0)
        ad.zero_grads(actor.params)
        ad.backward(nll)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.values))
                 for k, p in actor.params.items()}
        ad.adam_step(adam, actor.params, grads)
    return actor


def sample_gaussian_actions(actor: sac.GaussianActor, n: int, seed: int = 0) -> np.ndarray:
    return actor.sample_base(np.zeros((n, 1)), np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# marginal preservation


def marginal_preservation_stats(m: float = 1.0, tau: float = 0.5, sigma: float = 0.1,
                                k_steps: int = 128, n: int = 100_000, seed: int = 0) -> dict:
    """Terminal-moment comparison: noisy rollout vs deterministic rollout vs target."""
    model = envs.OracleGaussianVelocity(m, tau)
    rng = np.random.default_rng(seed)
    A0 = rng.standard_normal((n, 1))
    s = ad.constant(np.zeros((n, 1)))
    grid = TimeGrid(k_steps)
    with ad.no_grad():
        det = deterministic_rollout(s, ad.constant(A0), grid, model).values
        path = noisy_rollout(s, grid, model, noise=StepNoise("fixed", sigma),
                             rng=np.random.default_rng(seed + 1))
    noisy = path.pre_actions[-1].values
    return {
        "target_mean": m, "target_std": tau,
        "det_mean": float(det.mean()), "det_std": float(det.std()),
        "noisy_mean": float(noisy.mean()), "noisy_std": float(noisy.std()),
        "mean_gap": abs(float(noisy.mean()) - float(det.mean())),
        "std_gap": abs(float(noisy.std()) - float(det.std())),
    }


# ---------------------------------------------------------------------------
# gradient-stability ablation


ABLATION_CONFIGS = (
    ("classic", "classic", 1.0),
    ("classic-gain5", "classic", 5.0),
    ("flow_g", "flow_g", 1.0),
    ("flow_t", "flow_t", 1.0),
)


def gradient_stability_ratios(n_seeds: int = 30, k_steps: int = 4, seed0: int = 0,
                              state_dim: int = 2, action_dim: int = 2) -> dict:
    """Seed-averaged per-step grad-norm profiles and their max/min ratios at
    paper inits on the point-mass dims; classic additionally at gain 5 (the
    provoked exploding regime)."""
    seeds = [seed0 + i for i in range(n_seeds)]
    out = {}
    for label, kind, gain in ABLATION_CONFIGS:
        vc = velocity.scratch_config(kind, state_dim, action_dim)
        profs = [sac.measure_gradnorm_profile(kind, vc, state_dim, action_dim, k_steps,
                                              s, weight_scale=gain) for s in seeds]
        mean_prof = np.mean(profs, axis=0)
        out[label] = {"profile": mean_prof.tolist(),
                      "ratio": float(mean_prof.max() / mean_prof.min())}
    return out
