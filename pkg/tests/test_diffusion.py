import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import logsumexp

from semaigc.diffusion import (AnalyticDenoiser, DiffusionError, GaussianMixture, Guidance, Latent, MLPDenoiser,
                               NumericalDegeneracyError, ScheduleMismatchError, channel_aware_mean,
                               closed_form_diffuse, default_mixture_spec, denoise, diffusion_training_loss,
                               export_samples_csv, fine_tune, forward_diffuse_step, generate, initial_noise,
                               load_denoiser, load_mixture_spec, noise_prediction_loss, predict_noise,
                               recursion_moments, reverse_step, reverse_step_channel_aware, sample_training_inputs,
                               save_denoiser, save_mixture_spec, train_mlp_denoiser)
from semaigc.oracles import conditional_mean, joint_gaussian_chain
from semaigc.schedules import ScheduleError, build_channel_aware_schedule, build_linear_schedule


def gauss1d(m, v):
    return GaussianMixture(np.array([1.0]), np.array([[m]]), np.array([[[v]]]))


class ZeroDenoiser:
    dim = 2

    def predict(self, z, t, guidance, schedule, sigma_offset=0.0):
        return np.zeros_like(z)


@pytest.fixture
def sched20():
    return build_linear_schedule(20, 0.01, 0.5)


# -- types --------------------------------------------------------------------------

def test_latent_rejects_non_finite():
    with pytest.raises(DiffusionError):
        Latent(np.array([1.0, np.nan]))
    with pytest.raises(DiffusionError):
        Latent(np.zeros(2), step=-1)


def test_mixture_validation():
    with pytest.raises(DiffusionError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [1.0, 1.0])
    with pytest.raises(DiffusionError):
        GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 2.0], [2.0, 1.0]]])
    m = GaussianMixture([0.3, 0.7], [[0.0, 0.0], [1.0, 1.0]], [0.5, 2.0])
    np.testing.assert_array_equal(m.covs[1], 2.0 * np.eye(2))


def test_default_mixture_weights_sum_to_one():
    for mix in default_mixture_spec().values():
        assert abs(mix.weights.sum() - 1.0) <= 1e-12
        assert all(np.linalg.eigvalsh(c).min() > 0 for c in mix.covs)


# -- forward process ----------------------------------------------------------------

def test_forward_step_vanishing_beta():
    s = build_linear_schedule(2, 1e-12, 2e-12)
    z = Latent(np.full((10_000, 2), 1.5), 0)
    out = forward_diffuse_step(z, s, rng=0)
    assert out.step == 1
    assert np.max(np.abs(out.values.mean(axis=0) - 1.5)) <= 1e-5


def test_forward_step_from_zero():
    s = build_linear_schedule(3, 0.05, 0.2)
    n = 10_000
    out = forward_diffuse_step(Latent(np.zeros(n), 0), s, rng=1)
    beta = s.beta[1]
    assert abs(out.values.var() - beta) <= 3 * beta * np.sqrt(2.0 / n)


def test_forward_overflow():
    s = build_linear_schedule(3, 0.05, 0.2)
    with pytest.raises(ScheduleError):
        forward_diffuse_step(Latent(np.zeros(2), 3), s)


def test_iterated_forward_matches_closed_form():
    s = build_linear_schedule(20, 0.01, 0.3)
    n = 20_000
    z = Latent(np.full(n, 2.0), 0)
    rng = np.random.default_rng(2)
    for _ in range(s.T):
        z = forward_diffuse_step(z, s, rng)
    ab = s.alpha_bar[-1]
    assert abs(z.values.mean() - np.sqrt(ab) * 2.0) <= 3 * np.sqrt((1 - ab) / n)
    assert abs(z.values.var() - (1 - ab)) <= 3 * (1 - ab) * np.sqrt(2.0 / n)


def test_closed_form_edge_cases():
    s2 = build_linear_schedule(2, 0.02, 0.04)
    z0 = Latent(np.array([[0.3, -1.2]]), 0)
    out = closed_form_diffuse(z0, 0, s2, rng=0)
    np.testing.assert_array_equal(out.values, z0.values)
    assert np.sqrt(s2.alpha_bar[2]) == pytest.approx(0.96995, abs=1e-5)

    s = build_linear_schedule(1000)
    z = closed_form_diffuse(Latent(np.ones((4000, 2)), 0), 1000, s, rng=3)
    for k in range(2):
        assert stats.kstest(z.values[:, k], "norm").pvalue > 0.01


def test_recursion_equals_closed_form_analytically():
    s = build_linear_schedule(1000)
    for t in range(0, 1001, 7):
        mean, var = recursion_moments(s, t)
        assert mean == pytest.approx(np.sqrt(s.alpha_bar[t]), abs=1e-10)
        assert var == pytest.approx(1 - s.alpha_bar[t], abs=1e-10)


# -- noise prediction ---------------------------------------------------------------

def test_point_mass_prior(sched20):
    mu = np.array([0.4, -1.0])
    den = AnalyticDenoiser({0: GaussianMixture([1.0], [mu], np.zeros((1, 2, 2)))})
    z = Latent(np.random.default_rng(0).standard_normal((5, 2)), 7)
    ab = sched20.alpha_bar[7]
    got = predict_noise(den, z, 7, Guidance(0), sched20)
    np.testing.assert_allclose(got, (z.values - np.sqrt(ab) * mu) / np.sqrt(1 - ab), rtol=1e-12)


def test_standard_normal_prior(sched20):
    den = AnalyticDenoiser({0: GaussianMixture([1.0], [[0.0, 0.0]], [1.0])})
    z = np.random.default_rng(1).standard_normal((6, 2))
    ab = sched20.alpha_bar[4]
    np.testing.assert_allclose(den.posterior_mean(z, ab, 1 - ab, 0), np.sqrt(ab) * z, rtol=1e-12)


def test_two_component_responsibilities(sched20):
    mix = GaussianMixture([0.3, 0.7], [[-1.0], [2.0]], [0.2, 0.5])
    den = AnalyticDenoiser({0: mix})
    ab, s2 = sched20.alpha_bar[3], 1 - sched20.alpha_bar[3]
    z = np.linspace(-0.5, 1.5, 9)[:, None]
    resp, _ = den.responsibilities(z, ab, s2, 0)
    logp = np.stack([np.log(w) + stats.norm.logpdf(z[:, 0], np.sqrt(ab) * m[0], np.sqrt(ab * c[0, 0] + s2))
                     for w, m, c in zip(mix.weights, mix.means, mix.covs)], axis=1)
    np.testing.assert_allclose(resp, np.exp(logp - logsumexp(logp, axis=1, keepdims=True)), atol=1e-10)


def test_degenerate_responsibilities(sched20):
    den = AnalyticDenoiser({0: GaussianMixture([0.5, 0.5], [[0.0], [1.0]], [0.1, 0.1])})
    with pytest.raises(NumericalDegeneracyError):
        den.predict(np.array([[1e200]]), 3, Guidance(0), sched20)


def test_predict_noise_checks_step(sched20):
    den = AnalyticDenoiser(default_mixture_spec())
    with pytest.raises(DiffusionError):
        predict_noise(den, Latent(np.zeros(2), 3), 4, Guidance(0), sched20)
    with pytest.raises(DiffusionError):
        predict_noise(den, Latent(np.zeros(2), 3), 3, Guidance(9), sched20)


# -- reverse process ----------------------------------------------------------------

def test_reverse_step_no_prediction():
    s = build_linear_schedule(5, 0.01, 0.2, sigma_bar="zero")
    z = Latent(np.array([[1.0, -2.0]]), 4)
    out = reverse_step(z, ZeroDenoiser(), Guidance(0), s, rng=0)
    np.testing.assert_allclose(out.values, z.values / np.sqrt(s.alpha[4]), rtol=1e-15)
    assert out.step == 3
    with pytest.raises(ScheduleError):
        reverse_step(Latent(np.zeros(2), 0), ZeroDenoiser(), Guidance(0), s)


def test_point_mass_fixed_point():
    s = build_linear_schedule(20, 0.01, 0.5, sigma_bar="zero")
    mu = np.array([1.3, -0.7])
    den = AnalyticDenoiser({0: GaussianMixture([1.0], [mu], np.zeros((1, 2, 2)))})
    z = initial_noise(2, 20, 50, rng=0)
    out = denoise(z, 20, den, Guidance(0), s, rng=0)
    assert np.max(np.abs(out.values - mu)) <= 1e-6


def test_channel_aware_reduces_bitwise(sched20):
    den = AnalyticDenoiser(default_mixture_spec())
    cas = build_channel_aware_schedule(sched20, 0.0, 12)
    g = Guidance(1)
    za = zb = initial_noise(2, 12, 200, rng=4)
    ra, rb = np.random.default_rng(9), np.random.default_rng(9)
    for _ in range(12):
        za = reverse_step_channel_aware(za, den, g, cas, ra)
        zb = reverse_step(zb, den, g, sched20, rb)
        np.testing.assert_array_equal(za.values, zb.values)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), t=st.integers(1, 20), label=st.sampled_from([0, 1, 2]))
def test_reduction_property(seed, t, label):
    s = build_linear_schedule(20, 0.01, 0.5)
    den = AnalyticDenoiser(default_mixture_spec())
    cas = build_channel_aware_schedule(s, 0.0, 20)
    z = Latent(np.random.default_rng(seed).standard_normal((3, 2)) * 2, t)
    a = reverse_step_channel_aware(z, den, Guidance(label), cas, seed)
    b = reverse_step(z, den, Guidance(label), s, seed)
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-12)


def test_channel_aware_t_bar_one_hand_oracle(sched20):
    m0, v0, sigma = 0.5, 0.8, 0.6
    den = AnalyticDenoiser({0: gauss1d(m0, v0)})
    cas = build_channel_aware_schedule(sched20, sigma, 1)
    a1, b1 = sched20.alpha[1], sched20.beta[1]
    x = np.linspace(-3, 3, 13)[:, None]
    want = m0 + np.sqrt(a1) * v0 * (x - np.sqrt(a1) * m0) / (a1 * v0 + b1 + sigma ** 2)
    got = channel_aware_mean(Latent(x, 1), den, Guidance(0), cas)
    np.testing.assert_allclose(got, want, rtol=1e-6)


@pytest.mark.parametrize("sigma", [0.1, 0.5])
def test_channel_aware_three_step_chain(sched20, sigma):
    m0, v0 = -0.4, 0.5
    den = AnalyticDenoiser({0: gauss1d(m0, v0)})
    cas = build_channel_aware_schedule(sched20, sigma, 3)
    mean, cov = joint_gaussian_chain(m0, v0, sched20, sigma, 3)
    x = np.linspace(-2, 2, 11)[:, None]
    for t in (1, 2, 3):
        got = channel_aware_mean(Latent(x, t), den, Guidance(0), cas)
        np.testing.assert_allclose(got, conditional_mean(mean, cov, t, x), rtol=1e-6)


def test_schedule_mismatch(sched20):
    den = AnalyticDenoiser(default_mixture_spec())
    cas = build_channel_aware_schedule(sched20, 0.3, 5)
    other = build_linear_schedule(20, 0.02, 0.5)
    with pytest.raises(ScheduleMismatchError):
        reverse_step_channel_aware(Latent(np.zeros(2), 5), den, Guidance(0), cas, 0, schedule=other)
    reverse_step_channel_aware(Latent(np.zeros(2), 5), den, Guidance(0), cas, 0, schedule=sched20)
    with pytest.raises(ScheduleError):
        channel_aware_mean(Latent(np.zeros(2), 6), den, Guidance(0), cas)


def test_generate_zero_steps_and_determinism(sched20):
    den = AnalyticDenoiser(default_mixture_spec())
    z0 = generate(den, Guidance(0), 0, sched20, rng=5, n=10)
    np.testing.assert_array_equal(z0.values, initial_noise(2, 0, 10, rng=5).values)
    a = generate(den, Guidance(2), 20, sched20, rng=11, n=64)
    b = generate(den, Guidance(2), 20, sched20, rng=11, n=64)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.step == 0


def test_fine_tune_identity_and_split_transparency(sched20):
    den = AnalyticDenoiser(default_mixture_spec())
    g = Guidance(0)
    z = Latent(np.ones((3, 2)), 4)
    np.testing.assert_array_equal(fine_tune(z, g, 0, None, den).values, z.values)

    full = generate(den, g, 20, sched20, rng=21, n=100)
    rng = np.random.default_rng(21)
    part = denoise(initial_noise(2, 20, 100, rng), 8, den, g, sched20, rng)
    cas = build_channel_aware_schedule(sched20, 0.0, 12)
    out = fine_tune(part, g, 12, cas, den, rng)
    np.testing.assert_array_equal(out.values, full.values)


def test_fine_tune_needs_covering_schedule(sched20):
    den = AnalyticDenoiser(default_mixture_spec())
    cas = build_channel_aware_schedule(sched20, 0.2, 3)
    with pytest.raises(ScheduleError):
        fine_tune(Latent(np.zeros(2), 0), Guidance(0), 5, cas, den)


# -- training loss ------------------------------------------------------------------

def zeroed_mlp(T=20):
    den = MLPDenoiser(2, 3, T, hidden=16, rng=0)
    den.net.params[-2][...] = 0.0
    den.net.params[-1][...] = 0.0
    return den


def test_zero_network_loss_is_dimension(sched20):
    n = 40_000
    den = zeroed_mlp()
    z0 = np.random.default_rng(0).standard_normal((n, 2))
    loss = diffusion_training_loss(den, z0, np.zeros(3), sched20, rng=1)
    assert abs(loss - 2.0) <= 3 * np.sqrt(4.0 / n)


def test_teacher_forced_loss_is_zero(sched20):
    _, _, eps = sample_training_inputs(np.zeros((10, 2)), sched20, rng=0)
    assert noise_prediction_loss(eps, eps) == 0.0


def test_empty_batch_and_wrong_kind(sched20):
    with pytest.raises(DiffusionError):
        diffusion_training_loss(zeroed_mlp(), np.zeros((0, 2)), np.zeros(3), sched20)
    with pytest.raises(DiffusionError):
        diffusion_training_loss(AnalyticDenoiser(default_mixture_spec()), np.zeros((4, 2)), np.zeros(3), sched20)


def test_training_loss_gradients(sched20):
    den = MLPDenoiser(2, 3, 20, hidden=8, rng=3)
    z0 = np.random.default_rng(4).standard_normal((16, 2))
    emb = np.random.default_rng(5).standard_normal(3)
    _, grads = diffusion_training_loss(den, z0, emb, sched20, rng=6, return_grads=True)
    h = 1e-5
    worst = 0.0
    for p, g in zip(den.net.params, grads):
        flat = p.reshape(-1)
        for i in range(0, flat.size, max(1, flat.size // 6)):
            old = flat[i]
            flat[i] = old + h
            lp = diffusion_training_loss(den, z0, emb, sched20, rng=6)
            flat[i] = old - h
            lm = diffusion_training_loss(den, z0, emb, sched20, rng=6)
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g.reshape(-1)[i]) / max(abs(fd), abs(g.reshape(-1)[i]), 1e-8))
    assert worst <= 1e-4


def test_trained_mlp_reaches_bayes_risk():
    s = build_linear_schedule(20, 0.01, 0.5)
    m0, v0 = 0.5, 1.0
    rng = np.random.default_rng(0)
    z0 = m0 + np.sqrt(v0) * rng.standard_normal((20_000, 1))
    den = MLPDenoiser(1, 1, 20, hidden=64, rng=1)
    train_mlp_denoiser(den, z0, np.zeros((z0.shape[0], 1)), s, steps=3000, batch_size=256, lr=3e-3, rng=2)
    # posterior variance of eps given z_t, averaged over uniform t
    ab = s.alpha_bar[1:]
    bayes = np.mean(ab * v0 / (ab * v0 + 1 - ab))
    test = m0 + np.sqrt(v0) * np.random.default_rng(7).standard_normal((100_000, 1))
    loss = diffusion_training_loss(den, test, np.zeros(1), s, rng=8)
    assert loss <= 1.10 * bayes


# -- serialization ------------------------------------------------------------------

def test_denoiser_json_round_trip(tmp_path, sched20):
    ana = AnalyticDenoiser(default_mixture_spec())
    save_denoiser(ana, tmp_path / "a.json")
    back = load_denoiser(tmp_path / "a.json")
    z = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(back.predict(z, 5, Guidance(2), sched20), ana.predict(z, 5, Guidance(2), sched20))

    mlp = MLPDenoiser(2, 3, 20, rng=4)
    save_denoiser(mlp, tmp_path / "m.json")
    back = load_denoiser(tmp_path / "m.json")
    g = Guidance(0, np.ones(3))
    np.testing.assert_array_equal(back.predict(z, 5, g), mlp.predict(z, 5, g))
    with pytest.raises(DiffusionError):
        load_denoiser({"kind": "unet"})


def test_mixture_spec_and_csv_export(tmp_path):
    spec = default_mixture_spec()
    save_mixture_spec(spec, tmp_path / "mix.json")
    back = load_mixture_spec(tmp_path / "mix.json")
    assert sorted(back) == sorted(spec)
    np.testing.assert_array_equal(back[2].means, spec[2].means)

    x = spec[0].sample(7, rng=0)
    export_samples_csv(tmp_path / "s.csv", x, 0)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["z0", "z1", "label"]
    assert len(rows) == 8
    assert float(rows[3][1]) == x[2, 1]
