import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bridgekit import bridge as B


def pinned_walk(z0, zT, t, beta, n, rng):
    """Brownian bridge by pinning a free random walk: B_t = z0 + W_t - (s_t / s_T)(W_T - (zT - z0))."""
    steps = rng.standard_normal((n, len(beta) - 1)) * np.sqrt(beta[1:])
    W = np.cumsum(steps, axis=1)
    s = np.cumsum(beta)
    return z0 + W[:, t - 1] - (s[t] / s[-1]) * (W[:, -1] - (zT - z0))


def within_3se(samples, mean, var):
    n = len(samples)
    m_ok = abs(samples.mean() - mean) <= 3 * np.sqrt(var / n) + 1e-12
    v_ok = abs(samples.var(ddof=1) - var) <= 3 * var * np.sqrt(2 / (n - 1)) + 1e-12
    return m_ok and v_ok


# schedule -----------------------------------------------------------------------


@pytest.mark.parametrize("T", [2, 3, 4, 7, 50, 1000])
def test_schedule_invariants(T):
    s = B.make_schedule(T, 0.03)
    assert s.T == T and s.sigma2[0] == 0.0 and s.sigma2_b[T] == 0.0
    np.testing.assert_allclose(s.sigma2 + s.sigma2_b, s.sigma2[T], rtol=1e-12)
    np.testing.assert_array_equal(s.beta[1:], s.beta[1:][::-1])
    assert s.beta[1] == s.beta[T]
    assert np.all(s.beta[1:] > 0)


def test_schedule_is_triangular():
    s = B.make_schedule(10, 1.0, 0.2)
    np.testing.assert_allclose(s.beta[1:6], [0.2, 0.4, 0.6, 0.8, 1.0])
    np.testing.assert_allclose(s.beta[6:], [1.0, 0.8, 0.6, 0.4, 0.2])


def test_constant_schedule_hand_sums():
    s = B.make_schedule(4, 0.25, 0.25)
    assert s.sigma2[2] == pytest.approx(0.5)
    assert s.sigma2_b[2] == pytest.approx(0.5)


def test_schedule_errors():
    for args in [(1, 0.1), (10, 0.0), (10, -1.0)]:
        with pytest.raises(ValueError):
            B.make_schedule(*args)


# posterior ---------------------------------------------------------------------


def test_boundary_pinning():
    s = B.make_schedule(20, 0.05)
    z0, zT = torch.randn(3, 2), torch.randn(3, 2)
    mu, var = B.posterior_params(z0, zT, 0, s)
    assert torch.equal(mu, z0) and var == 0
    mu, var = B.posterior_params(z0, zT, 20, s)
    assert torch.equal(mu, zT) and var == 0
    gen = torch.Generator().manual_seed(0)
    assert torch.equal(B.sample_zt(z0, zT, 0, s, gen), z0)
    assert torch.equal(B.sample_zt(z0, zT, 20, s, gen), zT)


def test_symmetry_point():
    s = B.make_schedule(4, 0.25, 0.25)
    mu, var = B.posterior_params(np.array(0.2), np.array(1.0), 2, s)
    assert mu == pytest.approx(0.6) and var == pytest.approx(0.25)


def test_hand_example_and_pinned_walk_oracle():
    s = B.make_schedule(4, 0.25, 0.25)
    mu, var = B.posterior_params(np.array(0.0), np.array(1.0), 1, s)
    assert mu == pytest.approx(0.25) and var == pytest.approx(0.1875)
    samples = pinned_walk(0.0, 1.0, 1, s.beta, 1_000_000, np.random.default_rng(0))
    assert within_3se(samples, 0.25, 0.1875)


@pytest.mark.parametrize("t", [1, 7, 15, 24])
def test_marginal_agrees_with_pinned_walk(t):
    s = B.make_schedule(25, 0.08)
    rng = np.random.default_rng(t)
    a, b, var = B.posterior_coeffs(t, s)
    walk = pinned_walk(-0.5, 2.0, t, s.beta, 200_000, rng)
    assert within_3se(walk, -0.5 * a + 2.0 * b, var)


@pytest.mark.parametrize("T", [5, 50])
def test_coefficients_convex(T):
    s = B.make_schedule(T, 0.04)
    for t in range(T + 1):
        a, b, var = B.posterior_coeffs(t, s)
        assert a >= 0 and b >= 0 and a + b == pytest.approx(1.0, abs=1e-12)
        assert var >= 0
    assert B.posterior_coeffs(0, s)[2] == 0 and B.posterior_coeffs(T, s)[2] == 0


def test_posterior_errors():
    s = B.make_schedule(5, 0.1)
    with pytest.raises(ValueError):
        B.posterior_params(np.zeros(2), np.zeros(2), 6, s)
    with pytest.raises(ValueError):
        B.posterior_params(np.zeros(2), np.zeros(3), 2, s)


def test_sample_zt_moments():
    s = B.make_schedule(50, 0.04)
    z0, zT = np.full(100_000, 0.3), np.full(100_000, -1.2)
    for t in (3, 25, 44):
        mu, var = B.posterior_params(z0[:1], zT[:1], t, s)
        draws = B.sample_zt(z0, zT, t, s, np.random.default_rng(t))
        assert within_3se(draws, float(mu[0]), var)


def test_sample_zt_deterministic_given_seed():
    s = B.make_schedule(50, 0.04)
    z0, zT = torch.randn(4, 2, 4, 4, 4), torch.randn(4, 2, 4, 4, 4)
    a = B.sample_zt(z0, zT, 10, s, torch.Generator().manual_seed(5))
    b = B.sample_zt(z0, zT, 10, s, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


# targets -----------------------------------------------------------------------


def test_eps_target_examples():
    s = B.make_schedule(4, 0.25, 0.25)   # sigma_1 = 0.5
    assert B.eps_target(np.array(0.5), np.array(0.0), 1, s) == pytest.approx(1.0)
    z = torch.randn(5)
    assert torch.equal(B.eps_target(z, z, 2, s), torch.zeros(5))
    with pytest.raises(ValueError):
        B.eps_target(z, z, 0, s)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 49), st.integers(0, 2**31))
def test_target_roundtrip(t, seed):
    s = B.make_schedule(50, 0.04)
    rng = np.random.default_rng(seed)
    z0, zt = rng.normal(size=16), rng.normal(size=16)
    target = B.eps_target(zt, z0, t, s)
    np.testing.assert_allclose(B.predict_z0(zt, target, t, s), z0, atol=1e-12)
    assert np.array_equal(B.predict_z0(zt, np.zeros(16), t, s), zt)


def test_predict_z0_recovers_exactly_for_exact_target():
    s = B.make_schedule(4, 0.25, 0.25)
    z0, zt = np.array([0.25, -1.0]), np.array([0.75, 0.0])
    assert np.array_equal(B.predict_z0(zt, B.eps_target(zt, z0, 1, s), 1, s), z0)
    with pytest.raises(ValueError):
        B.predict_z0(zt, zt, 0, s)


def test_inject_stochasticity():
    zT = np.zeros(100_000)
    assert B.inject_stochasticity(zT, 0.0, np.random.default_rng(0)) is zT
    for scale in (0.5, 1.0, 2.0):
        out = B.inject_stochasticity(zT, scale, np.random.default_rng(1))
        assert within_3se(out, 0.0, scale ** 2)
    with pytest.raises(ValueError):
        B.inject_stochasticity(zT, -1.0, np.random.default_rng(0))


# reverse dynamics -----------------------------------------------------------------


def test_reverse_step_to_zero_returns_z0_hat():
    s = B.make_schedule(10, 0.1)
    z0_hat = torch.randn(3)
    assert B.reverse_step(torch.randn(3), z0_hat, 5, 0, s, torch.Generator()) is z0_hat
    with pytest.raises(ValueError):
        B.reverse_step(z0_hat, z0_hat, 3, 3, s)
    with pytest.raises(ValueError):
        B.reverse_step(z0_hat, z0_hat, 3, 5, s)


def test_reverse_step_preserves_bridge_marginal():
    s = B.make_schedule(30, 0.05)
    n = 200_000
    z0, zT = np.full(n, 1.0), np.full(n, -0.5)
    rng = np.random.default_rng(11)
    for t_from, t_to in [(30, 12), (20, 5), (9, 8)]:
        z_from = B.sample_zt(z0, zT, t_from, s, rng)
        stepped = B.reverse_step(z_from, z0, t_from, t_to, s, rng)
        direct = B.sample_zt(z0, zT, t_to, s, rng)
        se_mean = np.sqrt(stepped.var() / n + direct.var() / n)
        assert abs(stepped.mean() - direct.mean()) <= 3 * se_mean
        se_var = direct.var() * np.sqrt(2 / (n - 1)) * np.sqrt(2)
        assert abs(stepped.var() - direct.var()) <= 3 * se_var


def test_inference_timesteps():
    s = B.make_schedule(50, 0.04)
    for n in (1, 2, 3, 10, 49, 50):
        steps = B.inference_timesteps(n, s)
        assert len(steps) == n + 1 and steps[0] == 50 and steps[-1] == 0
        assert all(a > b for a, b in zip(steps, steps[1:]))
    assert B.inference_timesteps(50, s) == list(range(50, -1, -1))
    for bad in (0, 51):
        with pytest.raises(ValueError):
            B.inference_timesteps(bad, s)
    # three steps split the accumulated variance into near-equal thirds
    v = s.sigma2[B.inference_timesteps(3, s)]
    np.testing.assert_allclose(np.diff(v), -s.sigma2[-1] / 3, atol=0.05 * s.sigma2[-1])


def oracle_denoiser(z0, sched):
    return lambda z, t: B.eps_target(z, z0, t, sched)


@pytest.mark.parametrize("n_steps", [1, 2, 3, 7, 50])
def test_oracle_roundtrip(n_steps):
    s = B.make_schedule(50, 0.04)
    g = torch.Generator().manual_seed(n_steps)
    z0 = torch.randn(2, 2, 4, 4, 4, generator=g, dtype=torch.float64)
    zT = torch.randn(2, 2, 4, 4, 4, generator=g, dtype=torch.float64)
    out = B.sample_completion(oracle_denoiser(z0, s), zT, n_steps, s, g, deterministic=True)
    assert float((out - z0).abs().max()) < 1e-5


def test_oracle_with_sampler_noise_still_recovers_z0():
    s = B.make_schedule(50, 0.04)
    g = torch.Generator().manual_seed(0)
    z0, zT = torch.randn(64, dtype=torch.float64, generator=g), torch.randn(64, dtype=torch.float64, generator=g)
    out = B.sample_completion(oracle_denoiser(z0, s), zT, 5, s, g, deterministic=False)
    assert float((out - z0).abs().max()) < 1e-5


def test_single_step_is_predict_z0_at_T():
    s = B.make_schedule(50, 0.04)
    zT = torch.randn(8)
    net = lambda z, t: 0.1 * z + t / 100.0
    out = B.sample_completion(net, zT, 1, s, None, True)
    assert torch.equal(out, B.predict_z0(zT, net(zT, 50), 50, s))


def test_sampler_pure_given_seed():
    s = B.make_schedule(50, 0.04)
    zT = torch.randn(8)
    net = lambda z, t: torch.tanh(z) * t / 50
    a = B.sample_completion(net, zT, 3, s, torch.Generator().manual_seed(1))
    b = B.sample_completion(net, zT, 3, s, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)


def test_oracle_loss_is_zero():
    s = B.make_schedule(50, 0.04)
    g = torch.Generator().manual_seed(2)
    z0, zT = torch.randn(32, generator=g), torch.randn(32, generator=g)
    for t in (1, 10, 49):
        zt = B.sample_zt(z0, zT, t, s, g)
        target = B.eps_target(zt, z0, t, s)
        assert float(B.bridge_loss(oracle_denoiser(z0, s)(zt, t), target)) == 0.0
