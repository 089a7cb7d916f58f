"""Gaussian SNR channel and the truncated-logistic log-SNR proposal."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class ChannelSample:
    x: np.ndarray
    gamma: float
    noise: np.ndarray
    z: np.ndarray
    y: np.ndarray | None = None


@dataclass(frozen=True)
class SamplingConfig:
    """Logistic proposal over log-SNR, truncated to ``loc +/- clip * scale``.

    With ``defensive_weight`` > 0 the proposal becomes a mixture that puts
    that share of its mass on a second truncated logistic at
    ``defensive_loc`` / ``defensive_scale`` (same clip).  Adaptive fits use
    this to keep the default proposal's support.
    """

    loc: float = 2.0
    scale: float = 3.0
    clip: float = 4.0
    n_points: int = 10000
    inference_times: int = 10
    defensive_weight: float = 0.0
    defensive_loc: float = 2.0
    defensive_scale: float = 3.0

    def __post_init__(self):
        if not self.scale > 0 or not self.defensive_scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if not self.clip > 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if self.n_points < 1 or self.inference_times < 1:
            raise ConfigError("n_points and inference_times must be >= 1")
        if not 0 <= self.defensive_weight < 1:
            raise ConfigError("defensive_weight must lie in [0, 1)")

    @property
    def defensive(self) -> "SamplingConfig":
        return SamplingConfig(self.defensive_loc, self.defensive_scale, self.clip)

    @property
    def bounds(self):
        return self.loc - self.clip * self.scale, self.loc + self.clip * self.scale

    @property
    def truncation_mass(self):
        # sigmoid(c) - sigmoid(-c)
        return float(np.tanh(self.clip / 2))


def signal_noise_coefficients(gamma):
    gamma = np.asarray(gamma, dtype=float)
    return np.sqrt(gamma / (1 + gamma)), np.sqrt(1 / (1 + gamma))


def coefficients_from_log_snr(log_snr):
    """Same as ``signal_noise_coefficients(exp(t))`` without overflow for large t."""
    t = np.asarray(log_snr, dtype=float)
    return np.sqrt(expit(t)), np.sqrt(expit(-t))


def add_noise(x, gamma: float, rng: np.random.Generator, y=None) -> ChannelSample:
    """z = sqrt(g/(1+g)) x + sqrt(1/(1+g)) eps with eps ~ N(0, I)."""
    if not gamma > 0:
        raise DomainError(f"SNR must be positive, got {gamma}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("x must be finite")
    eps = rng.standard_normal(x.shape)
    a, b = signal_noise_coefficients(gamma)
    return ChannelSample(x=x, gamma=float(gamma), noise=eps, z=a * x + b * eps, y=y)


def noisy(x, log_snr, eps):
    """Vectorised channel: rows of ``x`` and ``eps`` at per-row log-SNR."""
    a, b = coefficients_from_log_snr(log_snr)
    return a[:, None] * x + b[:, None] * eps


def logistic_density(t, cfg: SamplingConfig):
    """Proposal density at ``t`` (zero outside the window)."""
    t = np.asarray(t, dtype=float)
    if cfg.defensive_weight > 0:
        a = cfg.defensive_weight
        return (1 - a) * _single_density(t, cfg) + a * _single_density(t, cfg.defensive)
    return _single_density(t, cfg)


def _single_density(t, cfg):
    u = (t - cfg.loc) / cfg.scale
    pdf = expit(u) * expit(-u) / cfg.scale / cfg.truncation_mass
    lo, hi = cfg.bounds
    return np.where((t >= lo) & (t <= hi), pdf, 0.0)


def sample_log_snr(cfg: SamplingConfig, rng: np.random.Generator, size=None):
    """Draw log-SNR by inverse CDF restricted to the truncation window
    (per draw, from the defensive component with probability ``defensive_weight``).

    Returns ``(log_snr, density)``; scalars when ``size`` is None.
    """
    lo_q, hi_q = expit(-cfg.clip), expit(cfg.clip)
    u = rng.random(size)
    t = cfg.loc + cfg.scale * logit(lo_q + (hi_q - lo_q) * u)
    t = np.clip(t, *cfg.bounds)
    if cfg.defensive_weight > 0:
        d = cfg.defensive
        u2 = rng.random(size)
        alt = np.clip(d.loc + d.scale * logit(lo_q + (hi_q - lo_q) * u2), *d.bounds)
        t = np.where(rng.random(size) < cfg.defensive_weight, alt, t)
    dens = logistic_density(t, cfg)
    if size is None:
        return float(t), float(dens)
    return t, dens


def importance_weight(log_snr, density):
    """1/q(gamma) for a log-SNR draw: gamma / f_T(t), since q(gamma) = f_T(ln gamma) / gamma."""
    density = np.asarray(density, dtype=float)
    if np.any(density <= 0):
        raise DomainError("importance density must be positive")
    w = np.exp(np.asarray(log_snr, dtype=float)) / density
    return float(w) if np.ndim(w) == 0 else w
