"""Noise-schedule contracts: cosine grid, halving, and sampler steps."""

import numpy as np
import pytest

from dtalker import schedule as sch


def test_make_schedule_endpoints_and_t2_values():
    s = sch.make_schedule(2)
    np.testing.assert_allclose(s.alpha, [1.0, np.cos(np.pi / 4), 1e-4], atol=1e-15)
    assert s.alpha[0] == 1.0 and s.sigma[0] == 0.0


@pytest.mark.parametrize("T", [1, 2, 4, 8, 16, 100])
def test_alpha_sigma_identity(T):
    s = sch.make_schedule(T)
    np.testing.assert_allclose(s.alpha ** 2 + s.sigma ** 2, 1.0, atol=1e-12)
    assert np.all(np.diff(s.alpha) <= 0) and np.all(s.alpha >= sch.ALPHA_FLOOR)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_halving_consistency(n):
    lo, hi = sch.make_schedule(n), sch.make_schedule(2 * n)
    # shared grid points agree bit for bit, not just to tolerance
    assert np.array_equal(hi.alpha[::2], lo.alpha)
    np.testing.assert_allclose(hi.alpha[::2], lo.alpha, atol=1e-12)


def test_make_schedule_rejects_bad_T():
    with pytest.raises(ValueError):
        sch.make_schedule(0)


def test_add_noise_t0_is_identity():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    s = sch.make_schedule(8)
    out = sch.add_noise(x0, 0, eps, s)
    assert np.array_equal(out.x_t, x0)


def test_add_noise_endpoint_and_zero_signal():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((4, 2))
    eps = rng.standard_normal((4, 2))
    s = sch.make_schedule(8)
    top = sch.add_noise(x0, 8, eps, s)
    np.testing.assert_allclose(top.x_t, eps, atol=2e-4)  # alpha_T clipped to 1e-4
    mid = sch.add_noise(np.zeros_like(x0), 5, eps, s)
    np.testing.assert_allclose(mid.x_t, s.sigma[5] * eps, atol=1e-15)


def test_add_noise_errors():
    s = sch.make_schedule(4)
    x = np.zeros((2, 2))
    with pytest.raises(ValueError):
        sch.add_noise(x, 5, x, s)
    with pytest.raises(ValueError):
        sch.add_noise(x, 1, np.zeros((2, 3)), s)


def test_variance_preservation():
    rng = np.random.default_rng(2)
    s = sch.make_schedule(16)
    n = 10_000
    x0 = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    for t in (1, 4, 8, 12, 16):
        v = sch.add_noise(x0, t, eps, s).x_t.var()
        assert abs(v - 1.0) < 0.05


def test_ddim_step_moves_along_noise_ray():
    rng = np.random.default_rng(3)
    s = sch.make_schedule(16)
    x0 = rng.standard_normal((6, 4))
    eps = rng.standard_normal((6, 4))
    x_s = sch.add_noise(x0, 12, eps, s).x_t
    out = sch.ddim_step(x_s, x0, 12, 5, s)
    np.testing.assert_allclose(out, s.alpha[5] * x0 + s.sigma[5] * eps, atol=1e-12)


def test_ddim_step_to_zero_returns_prediction():
    rng = np.random.default_rng(4)
    s = sch.make_schedule(8)
    x0_hat = rng.standard_normal((3, 2))
    x_s = rng.standard_normal((3, 2))
    np.testing.assert_allclose(sch.ddim_step(x_s, x0_hat, 3, 0, s), x0_hat, atol=1e-12)


def test_ddim_semigroup_with_constant_prediction():
    rng = np.random.default_rng(5)
    s = sch.make_schedule(16)
    x0_hat = rng.standard_normal((5, 3))
    x = rng.standard_normal((5, 3))
    two = sch.ddim_step(sch.ddim_step(x, x0_hat, 14, 9, s), x0_hat, 9, 3, s)
    one = sch.ddim_step(x, x0_hat, 14, 3, s)
    np.testing.assert_allclose(two, one, atol=1e-6)


def test_ddim_step_rejects_bad_order():
    s = sch.make_schedule(8)
    x = np.zeros((2, 2))
    with pytest.raises(ValueError):
        sch.ddim_step(x, x, 3, 3, s)
    with pytest.raises(ValueError):
        sch.ddim_step(x, x, 0, 0, s)


def test_ancestral_step_renoises_along_same_eps():
    rng = np.random.default_rng(6)
    s = sch.make_schedule(16)
    x0 = rng.standard_normal((4, 3))
    eps = rng.standard_normal((4, 3))
    x_t = sch.add_noise(x0, 7, eps, s).x_t
    out = sch.ancestral_step(x_t, x0, 7, np.zeros_like(x0), s)
    np.testing.assert_allclose(out, s.alpha[6] * x0 + s.sigma[6] * eps, atol=1e-12)


def test_ancestral_final_step_returns_prediction_and_sigma_scaling():
    rng = np.random.default_rng(7)
    s = sch.make_schedule(8)
    x0_hat = rng.standard_normal((3, 2))
    x_t = rng.standard_normal((3, 2))
    z = rng.standard_normal((3, 2))
    # t=1 ignores z entirely
    np.testing.assert_allclose(sch.ancestral_step(x_t, x0_hat, 1, z, s), x0_hat, atol=1e-12)
    base = sch.ancestral_step(x_t, x0_hat, 5, np.zeros_like(z), s)
    noisy = sch.ancestral_step(x_t, x0_hat, 5, z, s)
    np.testing.assert_allclose(noisy - base, s.sigma[4] * z, atol=1e-12)
    with pytest.raises(ValueError):
        sch.ancestral_step(x_t, x0_hat, 0, z, s)


@pytest.mark.parametrize("T", [4, 16])
def test_oracle_ancestral_chain_recovers_x0(T):
    rng = np.random.default_rng(8)
    s = sch.make_schedule(T)
    x0 = rng.uniform(0, 1, (6, 5))
    eps = rng.standard_normal((6, 5))
    x = sch.add_noise(x0, T, eps, s).x_t
    for t in range(T, 0, -1):
        x = sch.ancestral_step(x, x0, t, np.zeros_like(x0), s)
    assert np.abs(x - x0).max() < 1e-5


def test_snr_monotone_and_endpoints():
    s = sch.make_schedule(8)
    assert sch.snr(0, s) == np.inf
    vals = [sch.snr(t, s) for t in range(1, 9)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    np.testing.assert_allclose(vals[-1], 1e-8 / (1 - 1e-8), rtol=1e-6)
