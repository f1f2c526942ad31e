"""Desk-scale environments and oracles.

- bimodal bandit: single state, 1-dim action, two reward modes at +-0.6
- point-mass: dense quadratic reward toward a fixed goal
- sparse-reach: same dynamics, reward 1 on first arrival inside the goal ball
- closed-form Gaussian-flow oracle velocity for the marginal-preservation tests

Dynamics are deterministic given (state, action); all stochasticity flows
through the caller-supplied rng.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GOAL = np.array([0.7, 0.7])
STEP_GAIN = 0.05
GOAL_RADIUS = 0.1
EXPERT_GAIN = 2.0
# keep expert actions strictly inside (-1, 1) so atanh stays finite
EXPERT_SHRINK = 0.999


@dataclass
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    reward_kind: str  # dense | sparse | bandit
    reward_bounds: tuple


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class DemoDataset:
    env_name: str
    state_dim: int
    action_dim: int
    seed: int
    transitions: list = field(default_factory=list)

    def __len__(self):
        return len(self.transitions)


def _check_action(a: np.ndarray, dim: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape[0] != dim:
        raise ValueError(f"action dim {a.shape[0]} != {dim}")
    if np.any(np.abs(a) > 1.0 + 1e-9):
        raise ValueError(f"action out of [-1, 1]: {a}")
    return a


class BimodalBandit:
    """One-step bandit with reward peaks at a = +-0.6 (width 0.02 in the exponent)."""

    def __init__(self):
        self.spec = EnvSpec("bandit", 1, 1, 1, "bandit", (0.0, 1.0))

    def reset(self, rng) -> np.ndarray:
        return np.zeros(1)

    def step(self, state, action, rng):
        a = _check_action(action, 1)[0]
        r = max(math.exp(-((a - 0.6) ** 2) / 0.02), math.exp(-((a + 0.6) ** 2) / 0.02))
        return np.zeros(1), r, True, {}


class PointMass:
    """2-d position control: x' = clip(x + 0.05 a), r = -||x' - g||^2, horizon 100."""

    def __init__(self):
        self.spec = EnvSpec("point-mass", 2, 2, 100, "dense", (-5.78, 0.0))

    def reset(self, rng) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, 2)

    def step(self, state, action, rng):
        a = _check_action(action, 2)
        x = np.clip(state + STEP_GAIN * a, -1.0, 1.0)
        r = -float(np.sum((x - GOAL) ** 2))
        return x, r, False, {}


class SparseReach:
    """Point-mass dynamics; r = 1 and done on first entry into the goal ball."""

    def __init__(self):
        self.spec = EnvSpec("sparse-reach", 2, 2, 100, "sparse", (0.0, 1.0))

    def reset(self, rng) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, 2)

    def step(self, state, action, rng):
        a = _check_action(action, 2)
        x = np.clip(state + STEP_GAIN * a, -1.0, 1.0)
        reached = float(np.linalg.norm(x - GOAL)) < GOAL_RADIUS
        r = 1.0 if reached else 0.0
        return x, r, reached, {"success": reached}


ENVS = {"bandit": BimodalBandit, "point-mass": PointMass, "sparse-reach": SparseReach}


def make_env(name: str):
    if name not in ENVS:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}")
    return ENVS[name]()


def expert_action(x: np.ndarray) -> np.ndarray:
    """Proportional controller toward the goal, shrunk into the open interval."""
    return np.clip(EXPERT_GAIN * (GOAL - x), -1.0, 1.0) * EXPERT_SHRINK


def generate_demos(env: SparseReach, n_episodes: int, rng) -> DemoDataset:
    """Scripted-expert dataset: only successful episodes are retained.

    The expert reaches the goal from every start within the horizon; failure
    indicates a misconfigured env and raises.
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    seed_probe = int(rng.integers(0, 2**31 - 1))
    ds = DemoDataset(env.spec.name, env.spec.state_dim, env.spec.action_dim, seed_probe)
    for ep in range(n_episodes):
        x = env.reset(rng)
        done = False
        steps = 0
        while not done:
            a = expert_action(x)
            x_next, r, done, info = env.step(x, a, rng)
            ds.transitions.append(Transition(x.copy(), a.copy(), r, x_next.copy(), done))
            x = x_next
            steps += 1
            if steps >= env.spec.horizon and not done:
                raise RuntimeError(f"expert failed to reach the goal in episode {ep}")
    return ds


def save_demos(ds: DemoDataset, path) -> None:
    """Text format: header line, then one transition per line at 17 significant digits."""
    with open(path, "w") as f:
        f.write(f"SACFLOW-DEMOS v1 {ds.env_name} {ds.state_dim} {ds.action_dim} {len(ds.transitions)}\n")
        for tr in ds.transitions:
            fields = [*tr.s, *tr.a, tr.r, *tr.s_next, 1.0 if tr.done else 0.0]
            f.write(" ".join(f"{x:.17g}" for x in fields) + "\n")


def load_demos(path) -> DemoDataset:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 6 or header[0] != "SACFLOW-DEMOS" or header[1] != "v1":
            raise ValueError(f"{path}: not a v1 demo file")
        env_name, d_s, d_a, count = header[2], int(header[3]), int(header[4]), int(header[5])
        ds = DemoDataset(env_name, d_s, d_a, seed=0)
        for line in f:
            vals = [float(x) for x in line.split()]
            if len(vals) != 2 * d_s + d_a + 2:
                raise ValueError(f"{path}: malformed record with {len(vals)} fields")
            s = np.array(vals[:d_s])
            a = np.array(vals[d_s:d_s + d_a])
            r = vals[d_s + d_a]
            s_next = np.array(vals[d_s + d_a + 1:2 * d_s + d_a + 1])
            done = vals[-1] != 0.0
            ds.transitions.append(Transition(s, a, r, s_next, done))
    if len(ds.transitions) != count:
        raise ValueError(f"{path}: header promised {count} records, found {len(ds.transitions)}")
    return ds


def bandit_dataset(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Mixture of two action clusters at +-0.6 with the bandit's single state.

    Cluster width 0.12 matches the reward bumps' own scale; much narrower
    clusters would demand a near-singular late-time velocity field that a
    small flow cannot fit from the matching objective alone.
    """
    modes = rng.integers(0, 2, n) * 2 - 1
    actions = np.clip(0.6 * modes + 0.12 * rng.standard_normal(n), -0.95, 0.95)
    states = np.zeros((n, 1))
    return states, actions.reshape(-1, 1)


def oracle_gaussian_velocity(t: float, x: np.ndarray, m: float, tau: float) -> np.ndarray:
    """Conditional expectation E[A_1 - A_0 | A_t = x] for the straight path.

    A_0 ~ N(0,1) independent of A_1 ~ N(m, tau^2); closed form
    v*(t, x) = m + ((t tau^2 - (1 - t)) / ((1 - t)^2 + t^2 tau^2)) (x - t m).
    """
    if t >= 1.0:
        raise ValueError("oracle velocity defined for t < 1")
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    coef = (t * tau * tau - (1.0 - t)) / ((1.0 - t) ** 2 + (t * tau) ** 2)
    return m + coef * (x - t * m)


class OracleGaussianVelocity:
    """Adapter exposing the closed-form field through the VelocityModel signature.

    Parameter-free: outputs are constants, so no gradients flow (correctly)
    through it.
    """

    def __init__(self, m: float, tau: float, action_dim: int = 1):
        from .velocity import StepNoise, VelocityConfig

        self.cfg = VelocityConfig(kind="classic", state_dim=1, action_dim=action_dim,
                                  noise=StepNoise(mode="fixed", fixed_sigma=0.10))
        self.m = m
        self.tau = tau
        self.params: dict = {}

    def velocity(self, t: float, A: Tensor, s: Tensor) -> Tensor:
        return ad.constant(oracle_gaussian_velocity(t, A.values, self.m, self.tau))

    def step_std(self, t, A, s):
        return self.cfg.noise.fixed_sigma
