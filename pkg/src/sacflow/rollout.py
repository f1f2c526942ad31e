"""Flow-policy sampling: Euler rollout, noise-augmented rollout, squashing, path density.

The noisy rollout adds per-step Gaussian noise with a compensating drift so
the terminal marginal matches the deterministic rollout, while making every
step a tractable Gaussian transition. The joint path log-density

    log p_c = log zeta(A_0) + sum_i log eta_i - sum_j log(1 - a_j^2)

is the entropy surrogate used by all the actor-critic losses (standard
change-of-variables sign for the tanh correction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .velocity import StepNoise, VelocityModel

# float64 tanh saturates to exactly 1.0 near |u| = 19, which would break the
# open-interval action contract; 18 keeps a strictly inside (-1, 1)
PRE_SQUASH_CLAMP = 18.0


@dataclass
class TimeGrid:
    """Uniform knots 0 = t_0 < ... < t_K = 1; velocity is only evaluated at t_0..t_{K-1}."""

    k_steps: int

    def __post_init__(self):
        if self.k_steps < 1:
            raise ValueError("TimeGrid needs at least one step")

    @property
    def dt(self) -> float:
        return 1.0 / self.k_steps

    @property
    def knots(self) -> np.ndarray:
        return np.arange(self.k_steps + 1) / self.k_steps


@dataclass
class FlowPath:
    """Full record of one noisy rollout batch (tensors stay attached to the graph)."""

    pre_actions: list  # K+1 tensors (B, d)
    noises: list  # K arrays (B, d)
    per_step_logp: list  # K tensors (B,)
    base_logp: Tensor  # (B,)
    squash_correction: Tensor  # (B,)
    action: Tensor  # (B, d), in (-1, 1)
    log_pc: Tensor  # (B,)


def corrected_drift(t: float, A: Tensor, s: Tensor, sigma, model: VelocityModel) -> Tensor:
    """Marginal-preserving drift b = c1(t) v - c2(t) A.

    c1 = (1 - t + t sigma^2/2) / (1 - t), c2 = sigma^2 / (2 (1 - t)); the
    c2 term equals (sigma^2/2) grad log p_t for the straight-path marginals,
    so it is kept at t = 0 as well.
    """
    return _drift_from_v(t, A, sigma, model.velocity(t, A, s))


def _drift_from_v(t: float, A: Tensor, sigma, v: Tensor) -> Tensor:
    if t >= 1.0:
        raise ValueError(f"corrected_drift: t={t} must be < 1")
    if isinstance(sigma, Tensor):
        half_var = ad.mul(ad.square(sigma), 0.5 / (1.0 - t))
        c1v = ad.add(v, ad.mul(ad.mul(half_var, v), t))
        return ad.sub(c1v, ad.mul(half_var, A))
    half_var = 0.5 * sigma * sigma / (1.0 - t)
    c1 = 1.0 + t * half_var
    return ad.sub(ad.mul(v, c1), ad.mul(A, half_var))


def deterministic_rollout(s: Tensor, A0: Tensor, grid: TimeGrid, model: VelocityModel) -> Tensor:
    """K Euler steps of the learned velocity; returns the final pre-action (no squash)."""
    A = A0
    dt = grid.dt
    ctx: dict | None = {} if isinstance(model, VelocityModel) else None
    for i in range(grid.k_steps):
        t = i * dt
        v = model.velocity(t, A, s, ctx) if ctx is not None else model.velocity(t, A, s)
        A = ad.add(A, ad.mul(v, dt))
        if np.isnan(A.values).any():
            raise FloatingPointError(f"deterministic_rollout: NaN at step {i}")
    return A


def noisy_rollout(s: Tensor, grid: TimeGrid, model: VelocityModel,
                  noise: StepNoise | None = None, rng=None, A0: np.ndarray | None = None,
                  need_logp: bool = True) -> FlowPath:
    """Noise-augmented rollout with per-step Gaussian transition log-densities.

    A_0 ~ N(0, I); A_{i+1} = A_i + b dt + sigma sqrt(dt) eps_i. Reparameterized:
    gradients flow through the means and (learned) sigma into the model.
    `need_logp=False` skips the density bookkeeping (environment acting).
    """
    if noise is None:
        noise = model.cfg.noise
    if noise.mode == "fixed" and noise.fixed_sigma <= 0.0:
        raise ValueError("noisy_rollout: sigma must be positive (density undefined at 0)")
    b = s.values.shape[0]
    d = model.cfg.action_dim
    dt = grid.dt
    sqrt_dt = math.sqrt(dt)
    fused = hasattr(model, "step_outputs")

    if A0 is None:
        A0 = rng.standard_normal((b, d))
    # leaf kept grad-enabled so per-step gradient norms are observable at k=0
    A = Tensor(A0, requires_grad=True, op="A0")
    base_logp = ad.gaussian_log_density(A, ad.constant(np.zeros((b, d))), 1.0) if need_logp else None

    pre_actions = [A]
    noises = []
    per_step = []
    ctx: dict = {}
    for i in range(grid.k_steps):
        t = i * dt
        if fused:
            v, sigma = model.step_outputs(t, A, s, ctx)
            if noise.mode == "fixed":
                sigma = noise.fixed_sigma
        else:
            v = model.velocity(t, A, s)
            sigma = noise.fixed_sigma if noise.mode == "fixed" else model.step_std(t, A, s)
        drift = _drift_from_v(t, A, sigma, v)
        mean = ad.add(A, ad.mul(drift, dt))
        eps = rng.standard_normal((b, d))
        # log eta at the sample itself, in reparameterized form: the
        # (x - mean) terms cancel exactly, leaving -sum log(sigma sqrt(dt))
        # - ||eps||^2/2 - (d/2) log(2 pi). Same value and same parameter
        # gradient as the raw Gaussian density, but intermediate pre-action
        # nodes no longer collect the offsetting +-eps/sigma pairs, so the
        # per-step gradient-norm diagnostic sees only the Jacobian chain.
        if isinstance(sigma, Tensor):
            scale = ad.mul(sigma, sqrt_dt)
            A_next = ad.add(mean, ad.mul(scale, ad.constant(eps)))
        else:
            scale = sigma * sqrt_dt
            A_next = ad.add(mean, ad.constant(scale * eps))
        if np.isnan(A_next.values).any():
            raise FloatingPointError(f"noisy_rollout: NaN at step {i}")
        if need_logp:
            lp_const = -0.5 * (eps * eps).sum(axis=1) - 0.5 * d * math.log(2.0 * math.pi)
            if isinstance(sigma, Tensor):
                lp = ad.add(ad.mul(ad.sum_axis(ad.log(scale), 1), -1.0), ad.constant(lp_const))
            else:
                lp = ad.constant(lp_const - d * math.log(scale))
            per_step.append(lp)
        noises.append(eps)
        pre_actions.append(A_next)
        A = A_next

    if not need_logp:
        return FlowPath(pre_actions, noises, per_step, None,
                        None, ad.tanh(A), None)
    # keep the Jacobian correction well conditioned; clamp events are counted
    action, correction = squash_with_logdet(ad.clamp(A, -PRE_SQUASH_CLAMP, PRE_SQUASH_CLAMP,
                                                     count_as="preaction_clamp"))
    log_pc = ad.sub(base_logp, correction)
    for lp in per_step:
        log_pc = ad.add(log_pc, lp)
    return FlowPath(pre_actions, noises, per_step, base_logp, correction, action, log_pc)


def squash_with_logdet(A_K: Tensor):
    """tanh squash with the stable log-Jacobian identity.

    Returns (a, correction) with correction = sum_j log(1 - a_j^2), computed
    as 2 (log 2 - u - softplus(-2u)) so huge |u| stays finite; the caller
    subtracts it from the pre-squash log-density.
    """
    u = A_K
    a = ad.tanh(u)
    per_elem = ad.mul(ad.add(ad.sub(ad.mul(u, -1.0), ad.softplus(ad.mul(u, -2.0))), math.log(2.0)), 2.0)
    return a, ad.sum_axis(per_elem, 1)


def log_path_density(path: FlowPath, s: Tensor, grid: TimeGrid, model: VelocityModel,
                     noise: StepNoise | None = None) -> Tensor:
    """log p_c of a stored path, rebuilt with the path values held fixed.

    The graph carries only the model-parameter dependence (the score view):
    the base term and squash Jacobian are constants here, so their parameter
    gradient is exactly zero.
    """
    if noise is None:
        noise = model.cfg.noise
    if len(path.pre_actions) != grid.k_steps + 1:
        raise ValueError("log_path_density: path length does not match grid")
    b = s.values.shape[0]
    if path.pre_actions[0].values.shape[0] != b:
        raise ValueError("log_path_density: path/state batch mismatch")
    dt = grid.dt
    sqrt_dt = math.sqrt(dt)
    total = ad.sub(ad.constant(path.base_logp.values), ad.constant(path.squash_correction.values))
    for i in range(grid.k_steps):
        t = i * dt
        A_i = ad.constant(path.pre_actions[i].values)
        A_next = ad.constant(path.pre_actions[i + 1].values)
        sigma = noise.fixed_sigma if noise.mode == "fixed" else model.step_std(t, A_i, s)
        drift = corrected_drift(t, A_i, s, sigma, model)
        mean = ad.add(A_i, ad.mul(drift, dt))
        scale = ad.mul(sigma, sqrt_dt) if isinstance(sigma, Tensor) else sigma * sqrt_dt
        total = ad.add(total, ad.gaussian_log_density(A_next, mean, scale))
    return total


def sample_action(s: Tensor, model: VelocityModel, grid: TimeGrid,
                  noise: StepNoise | None = None, rng=None):
    """One noisy rollout composed with squashing; returns (a, log_pc, path)."""
    path = noisy_rollout(s, grid, model, noise=noise, rng=rng)
    return path.action, path.log_pc, path
