import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sacflow.autodiff as ad
from sacflow.autodiff import Tensor


def scalar(v):
    return Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)


def test_tanh_grad_at_zero():
    x = scalar(0.0)
    y = ad.tanh(x)
    ad.backward(y)
    assert x.grad == pytest.approx(1.0)


def test_log_sigmoid_grad_at_zero():
    # d/dx log(sigmoid(x)) = 1 - sigmoid(x) = 0.5 at x = 0
    x = scalar(0.0)
    y = ad.log(ad.sigmoid(x))
    ad.backward(y)
    assert x.grad == pytest.approx(0.5)


def test_quadratic_finite_diff_is_exact():
    x = scalar(3.0)
    err = ad.finite_diff_check(lambda: ad.square(x), {"x": x}, h=1e-5)
    assert err < 1e-9


def _mlp_loss_builder(rng, in_dim=5, hidden=16, batch=4):
    xs = ad.constant(rng.standard_normal((batch, in_dim)))
    w1 = ad.parameter(rng.standard_normal((in_dim, hidden)) * 0.4)
    b1 = ad.parameter(rng.standard_normal(hidden) * 0.1)
    w2 = ad.parameter(rng.standard_normal((hidden, 1)) * 0.4)
    b2 = ad.parameter(rng.standard_normal(1) * 0.1)
    params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}

    def build():
        h = ad.tanh(ad.add(ad.matmul(xs, w1), b1))
        out = ad.add(ad.matmul(h, w2), b2)
        return ad.mean_all(ad.square(out))

    return build, params


def test_two_layer_mlp_matches_finite_differences():
    build, params = _mlp_loss_builder(np.random.default_rng(0))
    assert ad.finite_diff_check(build, params, h=1e-5) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_mixed_primitive_graph_gradients(seed):
    # One graph touching most primitives, checked against the oracle.
    rng = np.random.default_rng(seed)
    xs = ad.constant(rng.standard_normal((3, 4)))
    w = ad.parameter(rng.standard_normal((4, 6)) * 0.3)
    gain = ad.parameter(np.ones(6))
    bias = ad.parameter(np.zeros(6))
    v = ad.parameter(rng.standard_normal((6, 2)) * 0.3)
    params = {"w": w, "gain": gain, "bias": bias, "v": v}

    def build():
        h = ad.layer_norm(ad.silu(ad.matmul(xs, w)), gain, bias)
        p = ad.softmax(h)
        q = ad.relu(ad.matmul(p, v))
        r = ad.softplus(ad.sub(q, 0.3))
        return ad.mean_all(ad.mul(r, ad.exp(ad.mul(r, -1.0))))

    assert ad.finite_diff_check(build, params, h=1e-5) < 1e-4


def test_gaussian_log_density_value_and_grads():
    # 1-dim standard normal at 0: -0.5 log(2 pi)
    x = ad.constant(np.zeros((1, 1)))
    mean = ad.parameter(np.zeros((1, 1)))
    std = ad.parameter(np.ones((1, 1)))
    lp = ad.gaussian_log_density(x, mean, std)
    assert float(lp.values[0]) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def build():
        return ad.sum_all(ad.gaussian_log_density(x, mean, std))

    assert ad.finite_diff_check(build, {"mean": mean, "std": std}, h=1e-6) < 1e-6


def test_gaussian_log_density_learned_std_grad():
    rng = np.random.default_rng(3)
    x = ad.constant(rng.standard_normal((4, 3)))
    raw = ad.parameter(rng.standard_normal((4, 3)) * 0.2)
    mw = ad.parameter(rng.standard_normal((3, 3)) * 0.3)

    def build():
        mean = ad.matmul(x, mw)
        std = ad.exp(raw)
        return ad.mean_all(ad.gaussian_log_density(x, mean, std))

    assert ad.finite_diff_check(build, {"raw": raw, "mw": mw}, h=1e-6) < 1e-5


def test_non_scalar_root_rejected():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ad.GraphError, match="scalar"):
        ad.backward(ad.mul(x, 2.0))


def test_unsupported_operand_rejected_at_construction():
    with pytest.raises(ad.GraphError, match="unsupported"):
        ad.matmul(np.ones((2, 2)), ad.parameter(np.ones((2, 2))))


def test_nan_forward_named():
    x = ad.parameter(np.array(-1.0))
    y = ad.log(x)  # nan
    with pytest.raises(ad.GraphError, match="log"):
        ad.evaluate_and_grad(ad.sum_all(y), {"x": x})


def test_nondeterministic_builder_rejected():
    rng = np.random.default_rng(0)
    x = ad.parameter(np.array(1.0))
    with pytest.raises(ad.GraphError, match="deterministic"):
        ad.finite_diff_check(lambda: ad.mul(x, float(rng.random())), {"x": x})


def test_detach_blocks_gradient():
    x = scalar(2.0)
    y = ad.mul(ad.mul(x, 3.0).detach(), x)
    ad.backward(y)
    # only the direct factor contributes: d/dx (6 * x) = 6
    assert x.grad == pytest.approx(6.0)


def test_no_grad_builds_no_graph():
    x = scalar(1.0)
    with ad.no_grad():
        y = ad.tanh(x)
    assert y._backward is None and not y.requires_grad


def test_grad_accumulates_across_uses():
    x = scalar(1.5)
    y = ad.add(ad.square(x), ad.mul(x, 2.0))
    ad.backward(y)
    assert x.grad == pytest.approx(2 * 1.5 + 2.0)


def test_broadcast_bias_grad_shape():
    x = ad.constant(np.ones((5, 3)))
    b = ad.parameter(np.zeros(3))
    out = ad.mean_all(ad.add(x, b))
    ad.backward(out)
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, np.full(3, 5 / 15))


# --- Adam ---


def test_adam_zero_gradient_keeps_params():
    p = ad.parameter(np.array([1.0, -2.0]))
    st_ = ad.AdamState(lr=0.1, b1=0.5)
    ad.adam_step(st_, {"p": p}, {"p": np.zeros(2)})
    assert np.array_equal(p.values, np.array([1.0, -2.0]))
    assert st_.step_count == 1


def test_adam_first_step_hand_value():
    # p=0, g=1, lr=0.1, b1=0.5, b2=0.999: mhat=1, vhat=1 -> p ~ -0.1
    p = ad.parameter(np.array(0.0))
    st_ = ad.AdamState(lr=0.1, b1=0.5, b2=0.999, eps=1e-8)
    ad.adam_step(st_, {"p": p}, {"p": np.asarray(1.0)})
    assert float(p.values) == pytest.approx(-0.1, rel=1e-6)


def test_adam_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = ad.parameter(rng.standard_normal(4))
        st_ = ad.AdamState(lr=1e-2)
        for _ in range(5):
            g = rng.standard_normal(4)
            ad.adam_step(st_, {"p": p}, {"p": g})
        return p.values.tobytes()

    assert run() == run()


def test_adam_shape_mismatch_rejected():
    p = ad.parameter(np.zeros(3))
    with pytest.raises(ad.GraphError, match="shape"):
        ad.adam_step(ad.AdamState(), {"p": p}, {"p": np.zeros(4)})


# --- properties ---


@given(st.floats(min_value=-20, max_value=20))
@settings(max_examples=40, deadline=None)
def test_silu_matches_x_times_sigmoid(v):
    x = Tensor(np.asarray(v))
    assert float(ad.silu(x).values) == pytest.approx(v / (1 + math.exp(-v)) if abs(v) < 500 else v)


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_random_mlp_gradients_property(seed):
    build, params = _mlp_loss_builder(np.random.default_rng(seed), in_dim=3, hidden=8, batch=3)
    assert ad.finite_diff_check(build, params, h=1e-5) < 1e-4
