"""Velocity-field parameterizations for the flow policy, plus the per-step noise head.

Three interchangeable kinds behind one `velocity(t, A, s)` signature:

- classic: MLP trunk over [s; A; t] with a mean head (residual-RNN-style cell).
- flow_g:  GRU-style gate/candidate pair, v = g * (v_hat - A), candidate
           bounded by 50 * tanh.
- flow_t:  transformer decoder refining the action-time token via
           cross-attention over a single state token, v = W_o(LN(token)).

The noise head gives the per-step Gaussian std: a fixed scalar or a learned
MLP with log-std tanh-clamped to [-5, 2].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import AttentionSpec, DecoderBlock, LayerNorm, Mlp, MlpSpec, linear, linear_params, time_embed

LOGSTD_LO = -5.0
LOGSTD_HI = 2.0


@dataclass
class StepNoise:
    """Per-step noise spec: fixed scalar sigma or a learned, clamped head."""

    mode: str = "learned"  # "fixed" | "learned"
    fixed_sigma: float = 0.10

    def __post_init__(self):
        if self.mode not in ("fixed", "learned"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.fixed_sigma <= 0:
            raise ValueError("fixed_sigma must be positive")


@dataclass
class VelocityConfig:
    kind: str
    state_dim: int
    action_dim: int
    # classic
    trunk_hidden: tuple = (256, 256)
    # flow_g
    gate_hidden: tuple = (128,)
    cand_hidden: tuple = (128,)
    cand_bound: float = 50.0
    gate_bias_init: float = 5.0
    # flow_t
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 4
    include_self_attention: bool = True
    # shared
    time_dim: int = 16
    logstd_hidden: tuple = (64,)
    noise: StepNoise = field(default_factory=StepNoise)

    def __post_init__(self):
        if self.kind not in ("classic", "flow_g", "flow_t"):
            raise ValueError(f"unknown velocity kind {self.kind!r}")
        if self.state_dim <= 0 or self.action_dim <= 0:
            raise ValueError("state_dim and action_dim must be positive")


def scratch_config(kind: str, state_dim: int, action_dim: int) -> VelocityConfig:
    """From-scratch sizes: MLP 256x256, gate/cand hidden 128, decoder d=64."""
    return VelocityConfig(kind=kind, state_dim=state_dim, action_dim=action_dim,
                          noise=StepNoise(mode="learned"))


def o2o_config(kind: str, state_dim: int, action_dim: int) -> VelocityConfig:
    """Offline-to-online sizes: hidden 512x4, gate hidden 256, decoder d=128, fixed sigma."""
    return VelocityConfig(
        kind=kind, state_dim=state_dim, action_dim=action_dim,
        trunk_hidden=(512, 512, 512, 512),
        cand_hidden=(512, 512, 512, 512),
        gate_hidden=(256,),
        d_model=128,
        noise=StepNoise(mode="fixed", fixed_sigma=0.10),
    )


def clamped_logstd(raw: Tensor) -> Tensor:
    """tanh rescaling of the raw head output into [-5, 2]."""
    mid = 0.5 * (LOGSTD_HI + LOGSTD_LO)
    half = 0.5 * (LOGSTD_HI - LOGSTD_LO)
    return ad.add(ad.mul(ad.tanh(raw), half), mid)


class VelocityModel:
    """One velocity parameterization plus its optional log-std head."""

    def __init__(self, cfg: VelocityConfig, rng):
        self.cfg = cfg
        self.kind = cfg.kind
        self.params: dict[str, Tensor] = {}
        d_s, d_a, d_t = cfg.state_dim, cfg.action_dim, cfg.time_dim
        cond_dim = d_s + d_a + d_t

        if cfg.kind == "classic":
            # raw scalar t is concatenated, not embedded
            in_dim = d_s + d_a + 1
            self._trunk = Mlp(MlpSpec([in_dim, *cfg.trunk_hidden], "relu", final_activation="relu"),
                              rng, "trunk")
            linear_params(rng, cfg.trunk_hidden[-1], d_a, "mean_head", self.params)
            if cfg.noise.mode == "learned":
                linear_params(rng, cfg.trunk_hidden[-1], d_a, "logstd_head", self.params)
            self.params.update(self._trunk.params)
        elif cfg.kind == "flow_g":
            self._gate = Mlp(MlpSpec([cond_dim, *cfg.gate_hidden, d_a], "swish"), rng, "gate")
            # paper-specified gate head init: W=0, b=5.0 (mild positive bias)
            last = len(cfg.gate_hidden)
            self._gate.params[f"gate.l{last}.w"].values[...] = 0.0
            self._gate.params[f"gate.l{last}.b"].values[...] = cfg.gate_bias_init
            self._cand = Mlp(MlpSpec([cond_dim, *cfg.cand_hidden, d_a], "swish"), rng, "cand")
            self.params.update(self._gate.params)
            self.params.update(self._cand.params)
        else:  # flow_t
            d = cfg.d_model
            linear_params(rng, d_t + d_a, d, "embed_a", self.params)
            self._obs_enc = Mlp(MlpSpec([d_s, max(2, d // 2), d], "silu"), rng, "obs_enc")
            linear_params(rng, d, d, "embed_s", self.params)
            spec = AttentionSpec(d, cfg.n_heads, cfg.n_layers, cfg.ffn_mult, cfg.include_self_attention)
            self._blocks = [DecoderBlock(spec, rng, f"dec{i}") for i in range(cfg.n_layers)]
            self._ln_out = LayerNorm(d, "ln_out", self.params)
            linear_params(rng, d, d_a, "w_o", self.params)
            self.params.update(self._obs_enc.params)
            for blk in self._blocks:
                self.params.update(blk.params)

        if cfg.noise.mode == "learned" and cfg.kind != "classic":
            self._logstd = Mlp(MlpSpec([cond_dim, *cfg.logstd_hidden, d_a], "swish"), rng, "logstd")
            self.params.update(self._logstd.params)

    # -- conditioning helpers --

    def _cond(self, t: float, A: Tensor, s: Tensor) -> Tensor:
        b = A.values.shape[0]
        emb = np.broadcast_to(time_embed(t, self.cfg.time_dim), (b, self.cfg.time_dim))
        return ad.concat([s, A, ad.constant(emb)], axis=1)

    def _check_dims(self, A: Tensor, s: Tensor) -> None:
        if A.values.shape[-1] != self.cfg.action_dim:
            raise ValueError(f"velocity: action dim {A.values.shape[-1]} != {self.cfg.action_dim}")
        if s.values.shape[-1] != self.cfg.state_dim:
            raise ValueError(f"velocity: state dim {s.values.shape[-1]} != {self.cfg.state_dim}")

    # -- velocity field --

    def velocity(self, t: float, A: Tensor, s: Tensor, ctx: dict | None = None) -> Tensor:
        self._check_dims(A, s)
        if self.kind == "classic":
            return linear(self.params, "mean_head", self._classic_trunk(t, A, s))
        if self.kind == "flow_g":
            return self._gated_velocity(self._cond(t, A, s), A)
        return self._decoded_velocity(t, A, s, ctx)

    def step_outputs(self, t: float, A: Tensor, s: Tensor, ctx: dict | None = None):
        """(velocity, sigma) with the conditioning / trunk computed once.

        `ctx` is an optional per-rollout scratch dict: state-only
        computations are stored there and shared across the K evaluations of
        one rollout (they are functions of s alone).
        """
        self._check_dims(A, s)
        learned = self.cfg.noise.mode == "learned"
        if self.kind == "classic":
            h = self._classic_trunk(t, A, s)
            v = linear(self.params, "mean_head", h)
            if not learned:
                return v, self.cfg.noise.fixed_sigma
            return v, ad.exp(clamped_logstd(linear(self.params, "logstd_head", h)))
        if self.kind == "flow_g":
            x = self._cond(t, A, s)
            v = self._gated_velocity(x, A)
            if not learned:
                return v, self.cfg.noise.fixed_sigma
            return v, ad.exp(clamped_logstd(self._logstd(x)))
        v = self._decoded_velocity(t, A, s, ctx)
        if not learned:
            return v, self.cfg.noise.fixed_sigma
        return v, ad.exp(clamped_logstd(self._logstd(self._cond(t, A, s))))

    def _gated_velocity(self, cond: Tensor, A: Tensor) -> Tensor:
        g = ad.sigmoid(self._gate(cond))
        v_hat = ad.mul(ad.tanh(self._cand(cond)), self.cfg.cand_bound)
        return ad.mul(g, ad.sub(v_hat, A))

    def _classic_trunk(self, t, A, s):
        b = A.values.shape[0]
        tcol = ad.constant(np.full((b, 1), t))
        return self._trunk(ad.concat([s, A, tcol], axis=1))

    def _state_context(self, s: Tensor, ctx: dict | None):
        """State token and per-block cross-attention values; cached in the
        per-rollout ctx so the K evaluations share one subgraph."""
        if ctx is not None and "state" in ctx:
            return ctx["state"]
        state_tok = linear(self.params, "embed_s", self._obs_enc(s))
        out = (state_tok, [blk.cross_context(state_tok) for blk in self._blocks])
        if ctx is not None:
            ctx["state"] = out
        return out

    def _decoded_velocity(self, t: float, A: Tensor, s: Tensor, ctx: dict | None = None) -> Tensor:
        cfg = self.cfg
        b = A.values.shape[0]
        emb = np.broadcast_to(time_embed(t, cfg.time_dim), (b, cfg.time_dim))
        tok = linear(self.params, "embed_a", ad.concat([ad.constant(emb), A], axis=1))
        state_tok, cross_values = self._state_context(s, ctx)
        for blk, cv in zip(self._blocks, cross_values):
            tok = blk(tok, state_tok, cross_value=cv)
        return linear(self.params, "w_o", self._ln_out(tok))

    # -- per-step noise --

    def step_std(self, t: float, A: Tensor, s: Tensor):
        """Per-dimension sigma: a float in fixed mode, a Tensor in learned mode."""
        if self.cfg.noise.mode == "fixed":
            return self.cfg.noise.fixed_sigma
        self._check_dims(A, s)
        if self.kind == "classic":
            raw = linear(self.params, "logstd_head", self._classic_trunk(t, A, s))
        else:
            raw = self._logstd(self._cond(t, A, s))
        return ad.exp(clamped_logstd(raw))


def make_model(cfg: VelocityConfig, rng) -> VelocityModel:
    return VelocityModel(cfg, rng)
