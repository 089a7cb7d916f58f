import numpy as np
import pytest
from scipy.integrate import quad

from mmgap.channel import (SamplingConfig, add_noise, coefficients_from_log_snr,
                           importance_weight, logistic_density, noisy, sample_log_snr,
                           signal_noise_coefficients)
from mmgap.errors import ConfigError, DomainError


def test_coefficients_at_snr_three():
    a, b = signal_noise_coefficients(3.0)
    assert a == pytest.approx(np.sqrt(0.75), abs=1e-15)
    assert b == pytest.approx(0.5, abs=1e-15)
    a2, b2 = coefficients_from_log_snr(np.log(3.0))
    assert a2 == pytest.approx(a, rel=1e-14) and b2 == pytest.approx(b, rel=1e-14)


def test_zero_signal_gives_scaled_noise():
    s = add_noise(np.zeros(4), 3.0, np.random.default_rng(0))
    np.testing.assert_allclose(s.z, 0.5 * s.noise, rtol=0, atol=1e-15)


def test_high_snr_limit_returns_signal():
    x = np.array([1.5, -2.0])
    s = add_noise(x, 1e12, np.random.default_rng(0))
    np.testing.assert_allclose(s.z, x, atol=1e-5)
    a, b = coefficients_from_log_snr(800.0)  # exp(800) overflows, the log form does not
    assert a == 1.0 and b == pytest.approx(0.0, abs=1e-170)


def test_add_noise_rejects_bad_input():
    with pytest.raises(DomainError):
        add_noise(np.zeros(2), 0.0, np.random.default_rng(0))
    with pytest.raises(DomainError):
        add_noise(np.zeros(2), -1.0, np.random.default_rng(0))
    with pytest.raises(DomainError):
        add_noise(np.array([np.nan]), 1.0, np.random.default_rng(0))


def test_channel_preserves_unit_variance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((200_000, 1))
    eps = rng.standard_normal(x.shape)
    t = rng.uniform(-5, 5, size=len(x))
    z = noisy(x, t, eps)
    assert z.var() == pytest.approx(1.0, abs=0.01)


def test_truncation_bounds_and_mass():
    cfg = SamplingConfig()
    assert cfg.bounds == (-10.0, 14.0)
    assert cfg.truncation_mass == pytest.approx(np.tanh(2.0))
    t, _ = sample_log_snr(cfg, np.random.default_rng(0), size=100_000)
    assert t.min() >= -10.0 and t.max() <= 14.0
    assert np.median(t) == pytest.approx(2.0, abs=0.05)


def test_density_peak_and_normalisation():
    cfg = SamplingConfig()
    peak = logistic_density(2.0, cfg)
    assert peak == pytest.approx(1 / 12 / np.tanh(2.0), rel=1e-12)
    total, _ = quad(lambda t: logistic_density(t, cfg), -10, 14)
    assert total == pytest.approx(1.0, rel=1e-9)
    assert logistic_density(14.5, cfg) == 0.0 and logistic_density(-10.5, cfg) == 0.0


def test_sampler_density_matches_formula():
    cfg = SamplingConfig(loc=-1.0, scale=0.7, clip=2.5)
    t, dens = sample_log_snr(cfg, np.random.default_rng(2), size=50)
    np.testing.assert_allclose(dens, logistic_density(t, cfg), rtol=1e-14)
    hist, edges = np.histogram(sample_log_snr(cfg, np.random.default_rng(3), size=400_000)[0],
                               bins=20, range=cfg.bounds, density=True)
    mids = 0.5 * (edges[1:] + edges[:-1])
    np.testing.assert_allclose(hist, logistic_density(mids, cfg), rtol=0.03)


def test_importance_weights():
    assert importance_weight(0.0, 0.25) == pytest.approx(4.0)
    assert importance_weight(2.0, 1 / 12) == pytest.approx(12 * np.e**2)
    with pytest.raises(DomainError):
        importance_weight(0.0, 0.0)


def test_change_of_variables_recovers_known_integral():
    # int_0^inf (1 + g)^-2 dg = 1
    cfg = SamplingConfig(loc=0.0, scale=2.0, clip=8.0)
    t, dens = sample_log_snr(cfg, np.random.default_rng(4), size=1_000_000)
    vals = importance_weight(t, dens) / (1 + np.exp(t)) ** 2
    se = vals.std() / np.sqrt(len(vals))
    assert abs(vals.mean() - 1.0) <= 4 * se + 1e-3  # truncation loses < 1e-3


def test_sampling_config_validation():
    with pytest.raises(ConfigError):
        SamplingConfig(scale=0.0)
    with pytest.raises(ConfigError):
        SamplingConfig(clip=-1.0)
    with pytest.raises(ConfigError):
        SamplingConfig(n_points=0)


def test_scalar_draw_returns_floats():
    t, d = sample_log_snr(SamplingConfig(), np.random.default_rng(0))
    assert isinstance(t, float) and isinstance(d, float) and d > 0
