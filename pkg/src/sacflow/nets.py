"""Reusable network blocks: MLP, layer norm, single-token attention, time embedding.

All blocks are stateless forwards over parameter dicts (name -> Tensor), so
they compose freely inside the rollout graph. Weight init is fan-in-scaled
uniform unless a block documents otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    "relu": ad.relu,
    "swish": ad.silu,
    "silu": ad.silu,
    "tanh": ad.tanh,
}


@dataclass
class MlpSpec:
    """Widths include the input: [in, hidden..., out]."""

    layer_widths: list
    activation: str = "relu"
    final_activation: str | None = None

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("MlpSpec needs at least one layer (two widths)")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError("MlpSpec widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.final_activation is not None and self.final_activation not in ACTIVATIONS:
            raise ValueError(f"unknown final activation {self.final_activation!r}")


def linear_params(rng, fan_in: int, fan_out: int, name: str, params: dict, gain: float = 1.0, zero: bool = False):
    """Fan-in-scaled uniform init (PyTorch Linear default), optionally zeroed."""
    if zero:
        w = np.zeros((fan_in, fan_out))
        b = np.zeros(fan_out)
    else:
        bound = gain / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, (fan_in, fan_out))
        b = rng.uniform(-bound, bound, fan_out)
    params[f"{name}.w"] = ad.parameter(w)
    params[f"{name}.b"] = ad.parameter(b)


def linear(params: dict, name: str, x: Tensor) -> Tensor:
    w = params[f"{name}.w"]
    if x.values.shape[-1] != w.values.shape[0]:
        raise ValueError(f"{name}: input width {x.values.shape[-1]} != expected {w.values.shape[0]}")
    return ad.affine(x, w, params[f"{name}.b"])


class Mlp:
    """Affine + activation stack; output width = last layer width."""

    def __init__(self, spec: MlpSpec, rng, name: str = "mlp", gain: float = 1.0, zero_last: bool = False):
        self.spec = spec
        self.name = name
        self.params: dict[str, Tensor] = {}
        widths = spec.layer_widths
        for i in range(len(widths) - 1):
            last = i == len(widths) - 2
            linear_params(rng, widths[i], widths[i + 1], f"{name}.l{i}", self.params,
                          gain=gain, zero=zero_last and last)

    def __call__(self, x: Tensor) -> Tensor:
        widths = self.spec.layer_widths
        act = ACTIVATIONS[self.spec.activation]
        for i in range(len(widths) - 1):
            x = linear(self.params, f"{self.name}.l{i}", x)
            if i < len(widths) - 2:
                x = act(x)
        if self.spec.final_activation is not None:
            x = ACTIVATIONS[self.spec.final_activation](x)
        return x

    def hidden_and_out(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(last hidden activation, output); lets two heads share one trunk."""
        widths = self.spec.layer_widths
        act = ACTIVATIONS[self.spec.activation]
        for i in range(len(widths) - 2):
            x = act(linear(self.params, f"{self.name}.l{i}", x))
        out = linear(self.params, f"{self.name}.l{len(widths) - 2}", x)
        if self.spec.final_activation is not None:
            out = ACTIVATIONS[self.spec.final_activation](out)
        return x, out


def mlp_forward(mlp: Mlp, x: Tensor) -> Tensor:
    return mlp(x)


class LayerNorm:
    """Learned gain/bias around the fused layer_norm primitive (eps=1e-5)."""

    def __init__(self, dim: int, name: str, params: dict):
        self.name = name
        params[f"{name}.g"] = ad.parameter(np.ones(dim))
        params[f"{name}.b"] = ad.parameter(np.zeros(dim))
        self.params = params

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{self.name}.g"], self.params[f"{self.name}.b"])


@lru_cache(maxsize=4096)
def _time_embed_cached(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    omegas = np.exp(np.linspace(0.0, math.log(1000.0), half))
    emb = np.concatenate([np.sin(omegas * t), np.cos(omegas * t)])
    emb.setflags(write=False)
    return emb


def time_embed(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features [sin(w_j t); cos(w_j t)], w_j geometric in [1, 1000]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time_embed: t={t} outside [0, 1]")
    if dim % 2 != 0:
        raise ValueError("time_embed: dim must be even")
    return _time_embed_cached(float(t), dim)


@dataclass
class AttentionSpec:
    model_dim: int
    heads: int
    layers: int
    ffn_mult: int = 4
    include_self_attention: bool = True

    def __post_init__(self):
        if self.model_dim <= 0 or self.heads <= 0 or self.layers <= 0 or self.ffn_mult <= 0:
            raise ValueError("AttentionSpec dims must be positive")
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")


def _single_token_attention(params, name, query_tok: Tensor, kv_tok: Tensor, heads: int) -> Tensor:
    """Multi-head attention with exactly one key/value token per sample.

    The softmax over a singleton key axis is identically 1 for any
    query/key, so the output reduces exactly to the value projection routed
    through the output projection, and the q/k projections receive exactly
    zero gradient. We compute that reduced form directly; q/k parameters
    still exist (and persist in checkpoints) for structural fidelity.
    """
    return linear(params, f"{name}.o", linear(params, f"{name}.v", kv_tok))


class DecoderBlock:
    """Pre-norm residual block: (self-only SA) -> cross-attn over the state token -> FFN.

    Residual output projections start at zero, so the block is the identity
    map at init.
    """

    def __init__(self, spec: AttentionSpec, rng, name: str):
        self.spec = spec
        self.name = name
        self.params: dict[str, Tensor] = {}
        d = spec.model_dim
        if spec.include_self_attention:
            for proj in ("q", "k", "v"):
                linear_params(rng, d, d, f"{name}.sa.{proj}", self.params)
            linear_params(rng, d, d, f"{name}.sa.o", self.params, zero=True)
            self.ln_sa = LayerNorm(d, f"{name}.ln_sa", self.params)
        for proj in ("q", "k", "v"):
            linear_params(rng, d, d, f"{name}.ca.{proj}", self.params)
        linear_params(rng, d, d, f"{name}.ca.o", self.params, zero=True)
        self.ln_ca = LayerNorm(d, f"{name}.ln_ca", self.params)
        self.ln_ctx = LayerNorm(d, f"{name}.ln_ctx", self.params)
        linear_params(rng, d, spec.ffn_mult * d, f"{name}.ffn.l0", self.params)
        linear_params(rng, spec.ffn_mult * d, d, f"{name}.ffn.l1", self.params, zero=True)
        self.ln_ffn = LayerNorm(d, f"{name}.ln_ffn", self.params)

    def cross_context(self, state_tok: Tensor) -> Tensor:
        """State-only part of the cross-attention output; reusable across
        rollout steps that share one state batch."""
        return _single_token_attention(self.params, f"{self.name}.ca",
                                       None, self.ln_ctx(state_tok), self.spec.heads)

    def __call__(self, x: Tensor, state_tok: Tensor, cross_value: Tensor | None = None) -> Tensor:
        if x.values.shape[-1] != self.spec.model_dim or state_tok.values.shape[-1] != self.spec.model_dim:
            raise ValueError("DecoderBlock: token dim mismatch")
        if self.spec.include_self_attention:
            xn = self.ln_sa(x)
            x = ad.add(x, _single_token_attention(self.params, f"{self.name}.sa", xn, xn, self.spec.heads))
        if cross_value is None:
            cross_value = self.cross_context(state_tok)
        # the query-side LN feeds only the zero-gradient q projection here,
        # so the residual add is the whole query-side contribution
        x = ad.add(x, cross_value)
        y = self.ln_ffn(x)
        y = linear(self.params, f"{self.name}.ffn.l0", y)
        y = ad.silu(y)
        y = linear(self.params, f"{self.name}.ffn.l1", y)
        return ad.add(x, y)


def attention_block(block: DecoderBlock, query_token: Tensor, context_token: Tensor) -> Tensor:
    return block(query_token, context_token)
