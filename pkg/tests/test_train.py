import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liperm import ad
from liperm.ad import ConfigurationError
from liperm.measures import DiscreteMeasure, pushforward, sample_uniform, w1
from liperm.seeding import spawn
from liperm.nets import build_mlp, certify_lipschitz, make_critic, make_encoder, make_generator
from liperm.train import (
    Adam,
    ArchSpec,
    LipermConfig,
    LipermState,
    ProbeConfig,
    TrainingDiverged,
    TrainingTrace,
    critic_ipm_estimate,
    critic_loss_and_grad,
    evaluate_generator,
    generator_loss_and_grad,
    init_networks,
    ipm_critic_loss,
    left_inverse_penalty,
    liperm_step,
    penalty_value_and_grads,
    probe_penalty,
    train,
)


def _const_generator(d, point, margin=0.02):
    point = np.asarray(point, float)
    g = build_mlp([d, point.size], activation="linear", squash=True, squash_margin=margin, init="zeros")
    g.biases()[0][...] = point
    return g


def test_config_validation():
    for bad in (dict(lam=-1.0), dict(q=0.5), dict(mc_samples=0), dict(iterations=-1)):
        with pytest.raises(ConfigurationError):
            LipermConfig(**bad)


def test_penalty_identity_is_zero():
    u = sample_uniform(2, 64, 0)
    assert left_inverse_penalty(lambda x: x, lambda x: x, 2.0, u) == 0.0
    g = make_generator(2, 2, [], init="identity")
    # budget above 1 so the sound certificate never triggers a (tiny) rescale
    h = make_encoder(2, 2, [], L_H=1.5, init="identity")
    inner = DiscreteMeasure.uniform(0.05 + 0.9 * u.points)
    assert left_inverse_penalty(g, h, 2.0, inner) == 0.0


def test_penalty_hand_example():
    # d=1, q=2, g(u)=u/2, h(x)=x on atoms {0, 1}: ((0-0)^2 + (0.5-1)^2)/2
    atoms = DiscreteMeasure.uniform(np.array([[0.0], [1.0]]))
    assert left_inverse_penalty(lambda u: u / 2, lambda x: x, 2.0, atoms) == pytest.approx(0.125, abs=1e-15)


def test_penalty_constant_generator_positive():
    g = _const_generator(1, [0.4])
    h = make_encoder(1, 1, [8], L_H=4.0, seed=0)
    atoms = DiscreteMeasure.uniform(np.array([[0.1], [0.9]]))
    assert left_inverse_penalty(g, h, 2.0, atoms) > 0


def test_penalty_gradients_match_finite_differences():
    g = make_generator(1, 2, [5], seed=3)
    h = make_encoder(2, 1, [4], L_H=4.0, seed=4)
    u = np.random.default_rng(0).random((16, 1))
    for q in (2.0, 3.0):
        val, gg, gh = penalty_value_and_grads(g, h, q, u)
        assert val == pytest.approx(left_inverse_penalty(g, h, q, u), rel=1e-14)
        fd_g = ad.finite_difference_gradient(lambda v: left_inverse_penalty(g.with_params(v), h, q, u), g.params, 1e-6)
        fd_h = ad.finite_difference_gradient(lambda v: left_inverse_penalty(g, h.with_params(v), q, u), h.params, 1e-6)
        np.testing.assert_allclose(gg.values, fd_g.values, rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(gh.values, fd_h.values, rtol=1e-5, atol=1e-9)


def test_zero_critic_loss_is_gp_weight():
    f = make_critic(2, [4], init="zeros")
    gen = sample_uniform(2, 8, 1)
    data = sample_uniform(2, 8, 2)
    assert ipm_critic_loss(f, gen, data, 10.0, seed=0) == pytest.approx(10.0)


def test_equal_measures_have_zero_gap():
    f = make_critic(2, [6], seed=1, zero_output=False)
    data = sample_uniform(2, 16, 3)
    _, gap, _, _ = critic_loss_and_grad(f, data, data, 0.0, np.random.default_rng(0))
    assert gap == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("act", ["tanh", "leaky_relu"])
def test_critic_gradient_matches_finite_differences(act):
    f = make_critic(2, [5, 4], seed=2, activation=act, zero_output=False)
    gen, data = sample_uniform(2, 6, 0), sample_uniform(2, 5, 1)
    _, _, _, grad = critic_loss_and_grad(f, gen, data, 10.0, np.random.default_rng(7))
    fd = ad.finite_difference_gradient(
        lambda v: critic_loss_and_grad(f.with_params(v), gen, data, 10.0, np.random.default_rng(7))[0], f.params, 1e-6)
    np.testing.assert_allclose(grad.values, fd.values, rtol=1e-5, atol=1e-8)


def test_trained_critic_recovers_unit_distance():
    # D=1, data = delta_1, gen = delta_0: true W1 = 1
    data = DiscreteMeasure.uniform(np.array([[1.0]]))
    gen = DiscreteMeasure.uniform(np.array([[0.0]]))
    f = make_critic(1, [16, 16], seed=0)
    opt = Adam(len(f.params), 1e-2, 0.5, 0.9)
    rng = np.random.default_rng(0)
    for _ in range(400):
        _, _, _, grad = critic_loss_and_grad(f, gen, data, 10.0, rng)
        f = f.with_params(opt.step(f.params.values, grad.values))
    est = critic_ipm_estimate(f, gen, data)
    assert 0.8 <= est <= 1.0


def test_lambda_zero_drops_penalty_from_generator_gradient():
    arch = ArchSpec(1, 2, [6], [6], [6])
    g, h, f = init_networks(arch, 0)
    cfg = LipermConfig(lam=0.0)
    st_ = LipermState.fresh(g, h, f, cfg)
    u = np.random.default_rng(0).random((32, 1))
    _, _, with_pen = generator_loss_and_grad(st_, u, 0.0, 2.0, include_penalty=True)
    _, _, without = generator_loss_and_grad(st_, u, 0.0, 2.0, include_penalty=False)
    np.testing.assert_array_equal(with_pen.values, without.values)
    _, _, lam1 = generator_loss_and_grad(st_, u, 1.0, 2.0)
    assert np.any(lam1.values != without.values)


def test_zero_learning_rates_leave_parameters_unchanged():
    arch = ArchSpec(1, 2, [6], [6], [6])
    g, h, f = init_networks(arch, 0)
    cfg = LipermConfig(lr_critic=0.0, lr_encoder=0.0, lr_generator=0.0, mc_samples=16)
    state = LipermState.fresh(g, h, f, cfg)
    data = sample_uniform(2, 10, 5)
    liperm_step(state, data, cfg, np.random.default_rng(0))
    for before, after in ((g, state.g), (h, state.h), (f, state.f)):
        np.testing.assert_array_equal(before.params.values, after.params.values)


def test_encoder_stays_certified_during_training():
    arch = ArchSpec(1, 2, [8], [8], [8], L_H=0.7)
    cfg = LipermConfig(iterations=30, mc_samples=32, lr_encoder=5e-2, seed=1)
    data = sample_uniform(2, 16, 0)
    _, h, _, trace = train(data, cfg, arch)
    assert certify_lipschitz(h).product_bound <= 0.7
    assert max(r["lip_cert_h"] for r in trace.records) <= 0.7


def test_zero_iterations_return_initial_networks():
    arch = ArchSpec(1, 2, [4], [4], [4])
    data = sample_uniform(2, 8, 0)
    cfg = LipermConfig(iterations=0, seed=3)
    g, h, f, trace = train(data, cfg, arch)
    g0, h0, f0 = init_networks(arch, spawn(3, 2)[0])
    assert len(trace) == 0
    for a, b in ((g, g0), (h, h0), (f, f0)):
        np.testing.assert_array_equal(a.params.values, b.params.values)


def test_same_seed_same_trace():
    arch = ArchSpec(1, 2, [6], [6], [6])
    data = sample_uniform(2, 12, 0)
    cfg = LipermConfig(iterations=5, mc_samples=16, seed=11)
    t1 = train(data, cfg, arch)[3].to_csv()
    t2 = train(data, cfg, arch)[3].to_csv()
    assert t1 == t2
    assert t1.splitlines()[0] == "iter,ipm_est,penalty_est,objective,critic_gp,lip_cert_h"
    assert len(t1.splitlines()) == 6


def test_data_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        train(sample_uniform(3, 4, 0), LipermConfig(iterations=1), ArchSpec(1, 2, [4], [4], [4]))


def test_divergence_is_reported_with_record():
    arch = ArchSpec(1, 2, [6], [6], [6])
    data = sample_uniform(2, 8, 0)
    cfg = LipermConfig(iterations=3, mc_samples=8, divergence_limit=1e-12)
    with pytest.raises(TrainingDiverged) as exc:
        train(data, cfg, arch)
    assert exc.value.record["failed_on"]
    assert isinstance(exc.value.trace, TrainingTrace)


def test_toy_run_reduces_distance_to_data():
    # d = D = 1: eight evenly spread points in [0.7, 0.9], away from where the generator starts
    data = DiscreteMeasure.uniform((0.7 + 0.2 * (np.arange(8) + 0.5) / 8)[:, None])
    arch = ArchSpec(1, 1, [16], [16], [16])
    cfg = LipermConfig(iterations=500, mc_samples=64, lam=1.0, lr_generator=1e-5, generator_schedule="constant", seed=0)
    lat = sample_uniform(1, 256, 9)
    g0 = init_networks(arch, spawn(0, 2)[0])[0]
    before = w1(pushforward(g0, lat), data)
    g, _, _, _ = train(data, cfg, arch)
    after = w1(pushforward(g, lat), data)
    assert after < before


def test_evaluate_memorizing_and_constant_generators():
    data = DiscreteMeasure.uniform(np.array([[0.3, 0.4]]))
    g = _const_generator(2, [0.3, 0.4])
    star = lambda m, rng: 0.3 + 0.4 * rng.random((m, 2))
    probe = ProbeConfig(steps=50, widths=[8])
    ev = evaluate_generator(g, data, star, m_eval=256, grid_m=8, seed=0, probe=probe)
    assert ev["diversity_gap"] == pytest.approx(0.0, abs=1e-12)
    fresh = DiscreteMeasure.uniform(star(256, np.random.default_rng(spawn(0, 3)[1])))
    assert ev["accuracy"] == pytest.approx(w1(DiscreteMeasure.uniform(np.array([[0.3, 0.4]] * 256)), fresh), rel=1e-9)


def test_constant_generator_probe_penalty_is_large():
    # any h maps the constant to one point c; E|c - U|^2 >= Var(U) = 1/12
    g = _const_generator(1, [0.5, 0.5])
    pen, _ = probe_penalty(g, 2.0, 4.0, seed=0, grid_m=64, probe=ProbeConfig(steps=200, widths=[8]))
    assert pen >= 1 / 12 - 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 4.0))
def test_penalty_nonnegative(seed, q):
    g = make_generator(1, 2, [4], seed=seed)
    h = make_encoder(2, 1, [4], L_H=2.0, seed=seed + 1)
    u = np.random.default_rng(seed).random((10, 1))
    assert left_inverse_penalty(g, h, q, u) >= 0.0


def test_probe_restarts_never_worse_than_first_fit():
    g = make_generator(1, 2, [6], seed=5)
    one, _ = probe_penalty(g, 2.0, 2.0, seed=4, grid_m=32, probe=ProbeConfig(steps=30, widths=[6]))
    best, h = probe_penalty(g, 2.0, 2.0, seed=4, grid_m=32, probe=ProbeConfig(steps=30, widths=[6], restarts=3))
    assert best <= one
    assert certify_lipschitz(h).product_bound <= 2.0
