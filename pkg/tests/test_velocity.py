import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sacflow.autodiff as ad
from sacflow.velocity import StepNoise, VelocityConfig, VelocityModel, clamped_logstd, o2o_config, scratch_config


def tiny_config(kind, noise_mode="learned"):
    return VelocityConfig(
        kind=kind, state_dim=3, action_dim=2,
        trunk_hidden=(8, 8), gate_hidden=(8,), cand_hidden=(8,),
        d_model=8, n_heads=2, n_layers=2, logstd_hidden=(6,),
        noise=StepNoise(mode=noise_mode),
    )


def batch(rng, b=4, d_s=3, d_a=2):
    return ad.constant(rng.standard_normal((b, d_a))), ad.constant(rng.standard_normal((b, d_s)))


def test_classic_zero_weights_zero_velocity():
    rng = np.random.default_rng(0)
    model = VelocityModel(tiny_config("classic"), rng)
    for p in model.params.values():
        p.values[...] = 0.0
    A, s = batch(rng)
    assert np.array_equal(model.velocity(0.25, A, s).values, np.zeros((4, 2)))


def test_classic_paper_dims_output_shape():
    rng = np.random.default_rng(1)
    model = VelocityModel(scratch_config("classic", state_dim=17, action_dim=6), rng)
    A, s = batch(rng, b=5, d_s=17, d_a=6)
    assert model.velocity(0.0, A, s).values.shape == (5, 6)


def test_gated_paper_init_with_zero_candidate():
    # gate head starts at W=0, b=5.0 -> g = sigmoid(5.0); zeroed candidate -> v = -g * A
    rng = np.random.default_rng(2)
    model = VelocityModel(tiny_config("flow_g"), rng)
    for name, p in model.params.items():
        if name.startswith("cand."):
            p.values[...] = 0.0
    A, s = batch(rng)
    v = model.velocity(0.5, A, s).values
    g = 1.0 / (1.0 + math.exp(-5.0))
    assert g == pytest.approx(0.993307, abs=1e-6)
    assert np.allclose(v, -g * A.values, atol=1e-12)


def test_gated_gate_to_zero_freezes_preaction():
    rng = np.random.default_rng(3)
    model = VelocityModel(tiny_config("flow_g"), rng)
    model.params["gate.l1.b"].values[...] = -40.0  # g -> 0
    A, s = batch(rng)
    assert np.allclose(model.velocity(0.5, A, s).values, 0.0, atol=1e-15)


def test_gated_fixed_point_when_candidate_equals_preaction():
    rng = np.random.default_rng(4)
    model = VelocityModel(tiny_config("flow_g"), rng)
    # constant candidate: zero all candidate weights, set head bias -> v_hat = 50 tanh(b)
    for name, p in model.params.items():
        if name.startswith("cand.") and name.endswith(".w"):
            p.values[...] = 0.0
        if name.startswith("cand.") and name.endswith(".b"):
            p.values[...] = 0.0
    model.params["cand.l1.b"].values[...] = 0.01
    v_hat = 50.0 * math.tanh(0.01)
    A = ad.constant(np.full((3, 2), v_hat))
    s = ad.constant(np.zeros((3, 3)))
    assert np.allclose(model.velocity(0.25, A, s).values, 0.0, atol=1e-12)


def test_decoded_zero_wo_gives_zero_velocity():
    rng = np.random.default_rng(5)
    model = VelocityModel(tiny_config("flow_t"), rng)
    model.params["w_o.w"].values[...] = 0.0
    model.params["w_o.b"].values[...] = 0.0
    A, s = batch(rng)
    for t in (0.0, 0.25, 0.75):
        assert np.array_equal(model.velocity(t, A, s).values, np.zeros((4, 2)))


def test_decoded_paper_dims_output_shape():
    rng = np.random.default_rng(6)
    model = VelocityModel(scratch_config("flow_t", state_dim=17, action_dim=6), rng)
    assert model.cfg.d_model == 64 and model.cfg.n_heads == 4 and model.cfg.n_layers == 2
    A, s = batch(rng, b=3, d_s=17, d_a=6)
    assert model.velocity(0.5, A, s).values.shape == (3, 6)


def test_decoded_finite_at_paper_init():
    rng = np.random.default_rng(7)
    model = VelocityModel(tiny_config("flow_t"), rng)
    A, s = batch(rng, b=8)
    v = model.velocity(0.25, A, s).values
    assert np.all(np.isfinite(v)) and np.max(np.abs(v)) < 100.0


def test_step_std_fixed_mode():
    rng = np.random.default_rng(8)
    model = VelocityModel(tiny_config("flow_g", noise_mode="fixed"), rng)
    assert model.step_std(0.5, *batch(rng)) == pytest.approx(0.10)


def test_step_std_learned_midpoint():
    # raw = 0 -> log sigma = -1.5 -> sigma = e^{-1.5}
    rng = np.random.default_rng(9)
    model = VelocityModel(tiny_config("flow_g"), rng)
    for name, p in model.params.items():
        if name.startswith("logstd."):
            p.values[...] = 0.0
    A, s = batch(rng)
    std = model.step_std(0.5, A, s).values
    assert np.allclose(std, math.exp(-1.5), atol=1e-12)
    assert math.exp(-1.5) == pytest.approx(0.22313, abs=1e-5)


def test_step_std_clamp_saturates_without_overflow():
    rng = np.random.default_rng(10)
    model = VelocityModel(tiny_config("flow_g"), rng)
    for name, p in model.params.items():
        if name.startswith("logstd.") and name.endswith(".w"):
            p.values[...] = 0.0
    model.params["logstd.l1.b"].values[...] = 1e8
    A, s = batch(rng)
    assert np.allclose(model.step_std(0.5, A, s).values, math.exp(2.0))


def test_clamped_logstd_range_hypothesis():
    @given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def check(raw):
        v = float(clamped_logstd(ad.constant(np.asarray(raw))).values)
        assert -5.0 <= v <= 2.0

    check()


@given(st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_gate_and_candidate_ranges(seed):
    rng = np.random.default_rng(seed)
    model = VelocityModel(tiny_config("flow_g"), rng)
    # randomize the gate head so the gate is not constant
    model.params["gate.l1.w"].values[...] = rng.standard_normal((8, 2))
    A = ad.constant(rng.standard_normal((6, 2)) * 5.0)
    s = ad.constant(rng.standard_normal((6, 3)) * 5.0)
    x = model._cond(0.25, A, s)
    g = ad.sigmoid(model._gate(x)).values
    v_hat = ad.mul(ad.tanh(model._cand(x)), 50.0).values
    assert np.all((g > 0.0) & (g < 1.0))
    assert np.all(np.abs(v_hat) <= 50.0)


def test_drop_in_signature_for_all_kinds():
    rng = np.random.default_rng(11)
    A, s = batch(rng, b=5)
    for kind in ("classic", "flow_g", "flow_t"):
        model = VelocityModel(tiny_config(kind), rng)
        v = model.velocity(0.25, A, s)
        assert v.values.shape == (5, 2)


def test_o2o_preset_dims_and_noise():
    cfg = o2o_config("flow_t", 4, 3)
    assert cfg.d_model == 128 and cfg.noise.mode == "fixed" and cfg.noise.fixed_sigma == 0.10
    cfg_g = o2o_config("flow_g", 4, 3)
    assert cfg_g.cand_hidden == (512, 512, 512, 512) and cfg_g.gate_hidden == (256,)


def _velocity_loss_builder(model, A, s, t=0.3):
    def build():
        v = model.velocity(t, A, s)
        loss = ad.mean_all(ad.square(v))
        std = model.step_std(t, A, s)
        if isinstance(std, ad.Tensor):
            loss = ad.add(loss, ad.mean_all(ad.square(std)))
        return loss

    return build


@pytest.mark.parametrize("kind", ["classic", "flow_g", "flow_t"])
@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(100 + seed)
    model = VelocityModel(tiny_config(kind), rng)
    if kind == "flow_t":
        # perturb the zero-initialized residual projections for generic gradients
        for name, p in model.params.items():
            if name.endswith(".o.w") or name.endswith("ffn.l1.w"):
                p.values[...] = rng.standard_normal(p.values.shape) * 0.2
    A, s = batch(rng, b=2)
    err = ad.finite_diff_check(_velocity_loss_builder(model, A, s), model.params, h=1e-5)
    assert err < 1e-4
