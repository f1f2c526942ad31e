"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every op builds a node; `backward` on a scalar root fills
`.grad` on every reachable tensor that requires grad. Graphs are rebuilt
per step, so control flow through multi-step rollouts is plain Python.

Single-threaded by contract: tensors are immutable after forward, parameter
values are mutated only between steps (see `adam_step`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "no_grad",
    "constant",
    "parameter",
    "backward",
    "evaluate_and_grad",
    "finite_diff_check",
    "AdamState",
    "adam_step",
    "zero_grads",
    "runtime_stats",
    "reset_runtime_stats",
    "matmul",
    "affine",
    "add",
    "sub",
    "mul",
    "neg",
    "minimum",
    "tanh",
    "sigmoid",
    "silu",
    "relu",
    "exp",
    "log",
    "square",
    "softplus",
    "sqrt",
    "clamp",
    "sum_all",
    "mean_all",
    "sum_axis",
    "concat",
    "reshape",
    "layer_norm",
    "softmax",
    "gaussian_log_density",
]


class GraphError(Exception):
    """Raised at construction or backward time for malformed graphs."""


# Counters surfaced in run metrics. Keys: "log_clamp" (density std clamped at
# the 1e-30 floor before log), "preaction_clamp" (|A| clamped before tanh).
runtime_stats = {"log_clamp": 0, "preaction_clamp": 0}


def reset_runtime_stats() -> None:
    runtime_stats["log_clamp"] = 0
    runtime_stats["preaction_clamp"] = 0


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that disables graph construction inside its body."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional float64 value node.

    `values` is the forward value, `grad` (same shape) is populated by
    `backward`. Non-leaf tensors keep `_parents` and a `_backward` callable
    mapping the output gradient to per-parent gradients.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf"):
        v = np.asarray(values, dtype=np.float64)
        self.values = v
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = op

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        """Leaf sharing the same values; no gradient flows through it."""
        return Tensor(self.values, requires_grad=False, op="detach")

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator sugar; floats are folded into the op, not wrapped as nodes.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False, op="const")


def parameter(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, op="param")


def _check(x, opname: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise GraphError(f"{opname}: unsupported operand type {type(x).__name__}; wrap inputs as Tensor")
    return x


def _node(vals, parents, bw, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(vals, requires_grad=True, op=op)
        out._parents = tuple(parents)
        out._backward = bw
        return out
    return Tensor(vals, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    a = _check(a, "matmul")
    b = _check(b, "matmul")
    av, bv = a.values, b.values
    vals = av @ bv

    def bw(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _node(vals, (a, b), bw, "matmul")


def affine(x, w, b):
    """x @ w + b in one node (the hot path of every MLP layer)."""
    x = _check(x, "affine")
    w = _check(w, "affine")
    b = _check(b, "affine")
    xv, wv = x.values, w.values
    vals = xv @ wv + b.values

    def bw(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.T @ g if w.requires_grad else None
        gb = _unbroadcast(g, b.values.shape) if b.requires_grad else None
        return gx, gw, gb

    return _node(vals, (x, w, b), bw, "affine")


def add(a, b):
    a = _check(a, "add")
    if isinstance(b, (int, float)):
        vals = a.values + b
        return _node(vals, (a,), lambda g: (g,), "add")
    b = _check(b, "add")
    vals = a.values + b.values
    ash, bsh = a.values.shape, b.values.shape

    def bw(g):
        ga = _unbroadcast(g, ash) if a.requires_grad else None
        gb = _unbroadcast(g, bsh) if b.requires_grad else None
        return ga, gb

    return _node(vals, (a, b), bw, "add")


def sub(a, b):
    a = _check(a, "sub")
    if isinstance(b, (int, float)):
        return _node(a.values - b, (a,), lambda g: (g,), "sub")
    b = _check(b, "sub")
    vals = a.values - b.values
    ash, bsh = a.values.shape, b.values.shape

    def bw(g):
        ga = _unbroadcast(g, ash) if a.requires_grad else None
        gb = _unbroadcast(-g, bsh) if b.requires_grad else None
        return ga, gb

    return _node(vals, (a, b), bw, "sub")


def mul(a, b):
    a = _check(a, "mul")
    if isinstance(b, (int, float)):
        return _node(a.values * b, (a,), lambda g: (g * b,), "mul")
    b = _check(b, "mul")
    av, bv = a.values, b.values
    vals = av * bv
    ash, bsh = av.shape, bv.shape

    def bw(g):
        ga = _unbroadcast(g * bv, ash) if a.requires_grad else None
        gb = _unbroadcast(g * av, bsh) if b.requires_grad else None
        return ga, gb

    return _node(vals, (a, b), bw, "mul")


def neg(a):
    a = _check(a, "neg")
    return _node(-a.values, (a,), lambda g: (-g,), "neg")


def minimum(a, b):
    """Elementwise min; gradient follows the smaller operand (ties go to `a`)."""
    a = _check(a, "minimum")
    b = _check(b, "minimum")
    take_a = a.values <= b.values
    vals = np.where(take_a, a.values, b.values)

    def bw(g):
        ga = _unbroadcast(g * take_a, a.values.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ~take_a, b.values.shape) if b.requires_grad else None
        return ga, gb

    return _node(vals, (a, b), bw, "minimum")


def tanh(x):
    x = _check(x, "tanh")
    vals = np.tanh(x.values)
    return _node(vals, (x,), lambda g: (g * (1.0 - vals * vals),), "tanh")


def sigmoid(x):
    x = _check(x, "sigmoid")
    v = x.values
    vals = np.empty_like(v)
    pos = v >= 0
    vals[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    vals[~pos] = ev / (1.0 + ev)
    return _node(vals, (x,), lambda g: (g * vals * (1.0 - vals),), "sigmoid")


def silu(x):
    """x * sigmoid(x) (a.k.a. swish)."""
    x = _check(x, "silu")
    v = x.values
    sig = 1.0 / (1.0 + np.exp(-np.clip(v, -500, 500)))
    vals = v * sig
    return _node(vals, (x,), lambda g: (g * (sig * (1.0 + v * (1.0 - sig))),), "silu")


def relu(x):
    x = _check(x, "relu")
    mask = x.values > 0
    vals = np.where(mask, x.values, 0.0)
    return _node(vals, (x,), lambda g: (g * mask,), "relu")


def exp(x):
    x = _check(x, "exp")
    vals = np.exp(x.values)
    return _node(vals, (x,), lambda g: (g * vals,), "exp")


def log(x):
    """Natural log; the caller is responsible for positive inputs."""
    x = _check(x, "log")
    v = x.values
    vals = np.log(v)
    return _node(vals, (x,), lambda g: (g / v,), "log")


def square(x):
    x = _check(x, "square")
    v = x.values
    return _node(v * v, (x,), lambda g: (g * (2.0 * v),), "square")


def sqrt(x):
    x = _check(x, "sqrt")
    vals = np.sqrt(x.values)
    return _node(vals, (x,), lambda g: (g * (0.5 / vals),), "sqrt")


def softplus(x):
    """log(1 + e^x), computed without overflow for large |x|."""
    x = _check(x, "softplus")
    v = x.values
    vals = np.logaddexp(0.0, v)
    sig = 1.0 / (1.0 + np.exp(-np.clip(v, -500, 500)))
    return _node(vals, (x,), lambda g: (g * sig,), "softplus")


def clamp(x, lo: float, hi: float, count_as: str | None = None):
    """Elementwise clip; gradient passes through the interior, zero outside.

    When `count_as` names a runtime_stats key, out-of-range elements are
    counted there (used for the pre-squash |A| clamp).
    """
    x = _check(x, "clamp")
    v = x.values
    inside = (v >= lo) & (v <= hi)
    if count_as is not None:
        n_out = int(v.size - np.count_nonzero(inside))
        if n_out:
            runtime_stats[count_as] += n_out
    vals = np.clip(v, lo, hi)
    return _node(vals, (x,), lambda g: (g * inside,), "clamp")


def sum_all(x):
    x = _check(x, "sum")
    sh = x.values.shape
    return _node(np.asarray(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, sh),), "sum")


def mean_all(x):
    x = _check(x, "mean")
    sh = x.values.shape
    n = x.values.size
    return _node(np.asarray(x.values.mean()), (x,), lambda g: (np.broadcast_to(g / n, sh),), "mean")


def sum_axis(x, axis: int):
    x = _check(x, "sum_axis")
    vals = x.values.sum(axis=axis)
    sh = x.values.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), sh),)

    return _node(vals, (x,), bw, "sum_axis")


def concat(parts, axis: int = -1):
    parts = [_check(p, "concat") for p in parts]
    vals = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(pieces[i] if parts[i].requires_grad else None for i in range(len(parts)))

    return _node(vals, tuple(parts), bw, "concat")


def reshape(x, shape):
    x = _check(x, "reshape")
    old = x.values.shape
    return _node(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Per-row normalization over the last axis, then affine gain/bias."""
    x = _check(x, "layer_norm")
    gain = _check(gain, "layer_norm")
    bias = _check(bias, "layer_norm")
    v = x.values
    inv_d = 1.0 / v.shape[-1]
    mu = v.sum(axis=-1, keepdims=True) * inv_d
    xc = v - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    vals = xhat * gain.values + bias.values

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.values
            gx = inv * (gh - gh.sum(axis=-1, keepdims=True) * inv_d
                        - xhat * ((gh * xhat).sum(axis=-1, keepdims=True) * inv_d))
        ggain = _unbroadcast(g * xhat, gain.values.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.values.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return _node(vals, (x, gain, bias), bw, "layer_norm")


def softmax(x, axis: int = -1):
    x = _check(x, "softmax")
    v = x.values
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    vals = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * vals).sum(axis=axis, keepdims=True)
        return (vals * (g - dot),)

    return _node(vals, (x,), bw, "softmax")


def gaussian_log_density(x, mean, std):
    """Per-sample log N(x; mean, std^2), summed over the last axis.

    Fused so the per-step density terms stay numerically tight. `std` may be
    a Tensor (learned, possibly broadcast) or a plain float. The log argument
    is floored at 1e-30; floored elements are counted in runtime_stats.
    """
    x = _check(x, "gaussian_log_density")
    mean = _check(mean, "gaussian_log_density")
    std_is_tensor = isinstance(std, Tensor)
    sv_raw = std.values if std_is_tensor else np.asarray(std, dtype=np.float64)
    n_low = int(np.count_nonzero(sv_raw < 1e-30))
    if n_low:
        runtime_stats["log_clamp"] += n_low
    sv = np.maximum(sv_raw, 1e-30)

    diff = x.values - mean.values
    inv_var = 1.0 / (sv * sv)
    quad = diff * diff * inv_var
    d = x.values.shape[-1]
    per_elem_logs = np.log(sv)
    if per_elem_logs.ndim < x.values.ndim:
        log_term = np.broadcast_to(per_elem_logs, x.values.shape).sum(axis=-1)
    else:
        log_term = per_elem_logs.sum(axis=-1)
    vals = -0.5 * d * math.log(2.0 * math.pi) - log_term - 0.5 * quad.sum(axis=-1)

    parents = (x, mean, std) if std_is_tensor else (x, mean)

    def bw(g):
        ge = g[..., None]
        score = diff * inv_var
        gx = -(score) * ge if x.requires_grad else None
        gm = score * ge if mean.requires_grad else None
        if std_is_tensor:
            gs = None
            if std.requires_grad:
                gs = _unbroadcast((-1.0 / sv + diff * diff / (sv * sv * sv)) * ge, std.values.shape)
            return gx, gm, gs
        return gx, gm

    return _node(vals, parents, bw, "gaussian_log_density")


# ---------------------------------------------------------------------------
# engine


def _topo_order(root: Tensor) -> list[Tensor]:
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return topo


def backward(root: Tensor, check_nan: bool = False) -> None:
    """Reverse-mode pass seeding 1.0 on a scalar root.

    Gradients accumulate into `.grad` of every reachable tensor with
    requires_grad. Buffers are never mutated in place, so returned gradients
    may be read but must not be written.
    """
    if root.values.ndim != 0:
        raise GraphError(f"backward: root must be scalar, got shape {root.values.shape}")
    topo = _topo_order(root)
    if check_nan:
        for node in topo:
            if np.isnan(node.values).any():
                raise GraphError(f"NaN in forward values at node op={node._op}")
    root.grad = np.asarray(1.0)
    for node in reversed(topo):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        grads = node._backward(g)
        for p, pg in zip(node._parents, grads):
            if pg is None or not p.requires_grad:
                continue
            p.grad = pg if p.grad is None else p.grad + pg


def zero_grads(params) -> None:
    for p in _param_tensors(params):
        p.grad = None


def _param_tensors(params):
    if isinstance(params, dict):
        return list(params.values())
    return list(params)


def evaluate_and_grad(graph_root: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Backward on `graph_root` and return a name -> gradient map.

    Checks every forward node for NaN and errors naming the first offender.
    Parameters untouched by the graph get zero gradients.
    """
    zero_grads(params)
    backward(graph_root, check_nan=True)
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.values) if p.grad is None else np.array(p.grad)
    return out


def finite_diff_check(graph_builder, params: dict[str, Tensor], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    `graph_builder` must deterministically rebuild the same scalar from the
    current parameter values; it is re-invoked twice per perturbed scalar, so
    keep the instance small. Relative error uses max(1, |analytic|) in the
    denominator.
    """
    if h <= 0:
        raise GraphError("finite_diff_check: h must be positive")
    v1 = graph_builder().values
    v2 = graph_builder().values
    if not np.array_equal(v1, v2):
        raise GraphError("finite_diff_check: graph_builder is not deterministic (two evaluations differ)")
    analytic = evaluate_and_grad(graph_builder(), params)
    worst = 0.0
    for name, p in params.items():
        flat = p.values.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(graph_builder().values)
            flat[i] = orig - h
            fm = float(graph_builder().values)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            rel = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            if rel > worst:
                worst = rel
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter-set Adam moments with bias correction."""

    lr: float = 3e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """One Adam update, in place on parameter values."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.b1**t
    bc2 = 1.0 - state.b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.values.shape:
            raise GraphError(f"adam_step: gradient shape {g.shape} does not match parameter {name} {p.values.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            state.first_moment[name] = m
            state.second_moment[name] = np.zeros_like(p.values)
        v = state.second_moment[name]
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params
