"""MMSE curves, the MMSE-gap and orthogonal MI estimators, the adaptive
proposal fit and pointwise density / MI.

A *denoiser* here is any object with

    prepare(batch) -> batch            # map task samples to model coordinates
    denoise(z, log_snr, y=None) -> x_hat   (rows; y=None means unconditional)

``TrainedDenoiser`` (training module) and ``LinearGaussianDenoiser`` (below)
both qualify.  A *source* is anything with ``sample(n, rng)`` returning a
``Batch``, or a fixed ``Batch`` that is resampled row-wise.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import expit, ndtri
from scipy.stats import qmc

from .channel import SamplingConfig, importance_weight, noisy, sample_log_snr
from .errors import ConfigError, DomainError, NumericError
from .tasks import Batch, JointGaussianSpec

VARIANTS = ("gap", "gap-adaptive", "orthogonal", "orthogonal-adaptive")
NATS_PER_BIT = float(np.log(2.0))


class IntegrationWarning(UserWarning):
    pass


# ---------------------------------------------------------------- exact Gaussian denoiser

class LinearGaussianDenoiser:
    """Posterior means E[x | z] and E[x | z, y] for a zero-mean joint Gaussian."""

    def __init__(self, spec: JointGaussianSpec):
        self.spec = spec
        self.dim_x, self.dim_y = spec.dim_x, spec.dim_y
        self._lam, self._U = np.linalg.eigh(spec.sxx)
        self._lam_c, self._U_c = np.linalg.eigh(spec.conditional_cov())
        self._B = spec.regression()
        if self._lam[0] <= 0 or self._lam_c[0] <= 0:
            raise DomainError("singular covariance")

    def prepare(self, batch):
        return batch

    @staticmethod
    def _shrink(lam, U, resid, t):
        # E[x|z] - m = U diag(a lam / (a^2 lam + b^2)) U^T (z - a m)
        a2, b2 = expit(t), expit(-t)
        gain = np.sqrt(a2)[:, None] * lam / (a2[:, None] * lam + b2[:, None])
        return ((resid @ U) * gain) @ U.T

    def denoise(self, z, log_snr, y=None):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        t = np.broadcast_to(np.asarray(log_snr, dtype=float), (len(z),))
        if y is None:
            return self._shrink(self._lam, self._U, z, t)
        y = np.atleast_2d(np.asarray(y, dtype=float))
        m = y @ self._B.T
        a = np.sqrt(expit(t))[:, None]
        return m + self._shrink(self._lam_c, self._U_c, z - a * m, t)


def linear_denoiser(spec: JointGaussianSpec, z, gamma, y=None):
    """Exact posterior mean for a Gaussian source at SNR ``gamma`` (single vector)."""
    if not gamma >= 0:
        raise DomainError("SNR must be non-negative")
    t = np.log(gamma) if gamma > 0 else -np.inf
    y = None if y is None else np.atleast_2d(y)
    return LinearGaussianDenoiser(spec).denoise(np.atleast_2d(z), t, y)[0]


# ---------------------------------------------------------------- sources

def draw(source, n, rng):
    """n rows from a task/spec (fresh samples) or from a fixed Batch."""
    if isinstance(source, Batch):
        m = len(source)
        idx = rng.permutation(m)[:n] if n <= m else rng.integers(0, m, size=n)
        return source.take(idx)
    return source.sample(n, rng)


def _errors(model, batch, t, eps, chunk=20000):
    """Per-row ||x - x_hat||^2 (uncond, cond) and ||x_hat_y - x_hat||^2, on shared noise."""
    n = len(batch)
    uncond, cond, orth = np.empty(n), np.empty(n), np.empty(n)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        x, y = batch.xs[sl], batch.ys[sl]
        z = noisy(x, t[sl], eps[sl])
        xu = model.denoise(z, t[sl], None)
        xc = model.denoise(z, t[sl], y)
        uncond[sl] = np.sum((x - xu) ** 2, axis=1)
        cond[sl] = np.sum((x - xc) ** 2, axis=1)
        orth[sl] = np.sum((xc - xu) ** 2, axis=1)
    return uncond, cond, orth


# ---------------------------------------------------------------- MMSE curves

@dataclass
class MmseCurve:
    grid: np.ndarray
    uncond: np.ndarray
    cond: np.ndarray
    samples_per_point: int
    orthogonal: np.ndarray | None = None
    uncond_se: np.ndarray | None = None
    cond_se: np.ndarray | None = None
    gap_se: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.uncond = np.asarray(self.uncond, dtype=float)
        self.cond = np.asarray(self.cond, dtype=float)
        if not (len(self.grid) == len(self.uncond) == len(self.cond)):
            raise ConfigError("curve arrays must share a length")
        if np.any(np.diff(self.grid) <= 0):
            raise ConfigError("curve grid must be strictly ascending")

    @property
    def gap(self):
        return self.uncond - self.cond


def default_grid(n=64, lo=-10.0, hi=10.0):
    return np.linspace(lo, hi, n)


def mmse_curve(model, source, grid=None, samples_per_point=4096, rng=None) -> MmseCurve:
    """Monte-Carlo conditional and unconditional MMSE at each log-SNR grid point.

    Both passes at a grid point see the same (x, y, eps) draws.
    """
    rng = np.random.default_rng() if rng is None else rng
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    n = samples_per_point
    cols = {k: np.empty(len(grid)) for k in ("u", "c", "o", "use", "cse", "gse")}
    for i, t in enumerate(grid):
        batch = model.prepare(draw(source, n, rng))
        eps = rng.standard_normal(batch.xs.shape)
        u, c, o = _errors(model, batch, np.full(n, t), eps)
        cols["u"][i], cols["c"][i], cols["o"][i] = u.mean(), c.mean(), o.mean()
        sd = np.sqrt(n)
        cols["use"][i], cols["cse"][i], cols["gse"][i] = u.std() / sd, c.std() / sd, (u - c).std() / sd
    return MmseCurve(grid, cols["u"], cols["c"], n, cols["o"], cols["use"], cols["cse"], cols["gse"])


# ---------------------------------------------------------------- MI estimates

@dataclass
class MiEstimate:
    mean_nats: float
    std_nats: float
    variant: str
    n_points: int
    inference_times: int
    sampling: SamplingConfig
    repeats: list = field(default_factory=list)
    stderr_nats: float = float("nan")
    min_contribution: float = float("nan")

    @property
    def mean_bits(self):
        return self.mean_nats / NATS_PER_BIT

    @property
    def std_bits(self):
        return self.std_nats / NATS_PER_BIT


def integrand_samples(model, source, cfg: SamplingConfig, rng, n=None):
    """One pass of ``n`` (default ``cfg.n_points``) importance-sampled draws.

    Returns ``(gap, orthogonal, log_snr)`` per-sample contributions, already
    multiplied by 1/2 and the importance weight.
    """
    n = cfg.n_points if n is None else n
    batch = model.prepare(draw(source, n, rng))
    t, dens = sample_log_snr(cfg, rng, size=n)
    w = importance_weight(t, dens)
    eps = rng.standard_normal(batch.xs.shape)
    u, c, o = _errors(model, batch, t, eps)
    return 0.5 * (u - c) * w, 0.5 * o * w, t


def _estimate(model, source, cfg, rng, variant, weight_scale):
    per_repeat, pooled = [], []
    for _ in range(cfg.inference_times):
        gap, orth, _ = integrand_samples(model, source, cfg, rng)
        contrib = (orth if variant.startswith("orthogonal") else gap) * weight_scale
        per_repeat.append(float(np.mean(contrib)))
        pooled.append(contrib)
    pooled = np.concatenate(pooled)
    reps = np.array(per_repeat)
    return MiEstimate(
        mean_nats=float(reps.mean()),
        std_nats=float(reps.std(ddof=1)) if len(reps) > 1 else 0.0,
        variant=variant,
        n_points=cfg.n_points,
        inference_times=cfg.inference_times,
        sampling=cfg,
        repeats=per_repeat,
        stderr_nats=float(pooled.std(ddof=1) / np.sqrt(len(pooled))) if len(pooled) > 1 else float("nan"),
        min_contribution=float(pooled.min()),
    )


def estimate_gap(model, source, cfg: SamplingConfig, rng=None, variant="gap", weight_scale=1.0):
    """0.5 E[(||x - x_hat(z)||^2 - ||x - x_hat(z, y)||^2) / q(gamma)], repeated
    ``cfg.inference_times`` times.  Negative contributions are kept."""
    if variant not in ("gap", "gap-adaptive"):
        raise ConfigError(f"estimate_gap does not produce variant {variant!r}")
    rng = np.random.default_rng() if rng is None else rng
    return _estimate(model, source, cfg, rng, variant, weight_scale)


def estimate_orthogonal(model, source, cfg: SamplingConfig, rng=None, variant="orthogonal",
                        weight_scale=1.0):
    """0.5 E[||x_hat(z, y) - x_hat(z)||^2 / q(gamma)]; every contribution is >= 0."""
    if variant not in ("orthogonal", "orthogonal-adaptive"):
        raise ConfigError(f"estimate_orthogonal does not produce variant {variant!r}")
    rng = np.random.default_rng() if rng is None else rng
    est = _estimate(model, source, cfg, rng, variant, weight_scale)
    if weight_scale > 0 and est.min_contribution < 0.0:
        raise NumericError("negative orthogonal contribution")
    return est


def estimate(model, source, cfg, rng=None, variant="gap"):
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    fn = estimate_orthogonal if variant.startswith("orthogonal") else estimate_gap
    return fn(model, source, cfg, rng, variant=variant)


# ---------------------------------------------------------------- adaptive proposal

@dataclass(frozen=True)
class AdaptiveFit:
    sampling: SamplingConfig
    fallback: bool
    half_crossing: float | None = None
    quarter_crossing: float | None = None
    space: str = "snr-scaled"


def _crossings(t, v, thr, upward):
    """Linearly interpolated log-SNRs where ``v`` crosses ``thr`` in one direction."""
    out = []
    for i in range(len(t) - 1):
        a, b = v[i], v[i + 1]
        if (a < thr <= b) if upward else (a >= thr > b):
            out.append(t[i] + (thr - a) / (b - a) * (t[i + 1] - t[i]))
    return out


def fit_adaptive(curve: MmseCurve, dim: int, defaults: SamplingConfig = SamplingConfig(),
                 space="snr-scaled", min_scale=0.5, defensive=0.3) -> AdaptiveFit:
    """Fit the logistic proposal from the conditional MMSE curve.

    ``space="x"`` scans the x-space curve for its first downward crossings of
    d/2 (location) and then d/4.  ``space="snr-scaled"`` uses gamma * mmse
    (the noise-prediction error, rising from 0 to d) and its first upward
    crossings of d/4 and d/2.  Either way scale = |t(d/4) - t(d/2)|, floored at
    ``min_scale``.  Missing crossings give ``defaults`` with ``fallback=True``.

    The fitted proposal keeps a ``defensive`` share of its mass on the default
    logistic, so no log-SNR region the defaults cover is dropped.
    """
    t = curve.grid
    if space == "x":
        v, upward = curve.cond, False
    elif space == "snr-scaled":
        v, upward = np.exp(t) * curve.cond, True
    else:
        raise ConfigError("space must be 'x' or 'snr-scaled'")
    halves = _crossings(t, v, dim / 2, upward)
    half = halves[0] if halves else None
    quarter = None
    if half is not None:
        quarters = _crossings(t, v, dim / 4, upward)
        if upward:
            before = [q for q in quarters if q <= half]
            quarter = before[-1] if before else None
        else:
            after = [q for q in quarters if q >= half]
            quarter = after[0] if after else None
    if half is None or quarter is None:
        return AdaptiveFit(defaults, True, half, quarter, space)
    scale = max(abs(quarter - half), min_scale)
    fitted = replace(defaults, loc=float(half), scale=float(scale), defensive_weight=defensive,
                     defensive_loc=defaults.loc, defensive_scale=defaults.scale)
    return AdaptiveFit(fitted, False,
                       float(half), float(quarter), space)


# ---------------------------------------------------------------- pointwise quantities

def _normal_points(dim, n, rng):
    """Scrambled-Sobol standard-normal points (low-variance MC over the channel noise)."""
    m = int(np.ceil(np.log2(max(n, 2))))
    u = qmc.Sobol(dim, scramble=True, seed=rng).random_base2(m)
    e = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    # exact first and second moments keep the high-SNR tail of the integrand at zero
    return (e - e.mean(axis=0)) / e.std(axis=0)


def _pointwise_mmse(model, xs, ys, grid, mc, rng):
    """Per-point MMSE curves, shape (len(grid), n_points); ys None = unconditional."""
    xs = np.atleast_2d(xs)
    eps = _normal_points(xs.shape[1], mc, rng)
    k = len(eps)
    X = np.repeat(xs, k, axis=0)
    E = np.tile(eps, (len(xs), 1))
    Y = None if ys is None else np.repeat(np.atleast_2d(ys), k, axis=0)
    out = np.empty((len(grid), len(xs)))
    for i, t in enumerate(grid):
        tt = np.full(len(X), t)
        err = np.sum((X - model.denoise(noisy(X, tt, E), tt, Y)) ** 2, axis=1)
        out[i] = err.reshape(len(xs), k).mean(axis=1)
    return out


def _check_tails(integrand, tol, what):
    edge = np.max(np.abs(integrand[[0, -1]]))
    if edge > tol:
        warnings.warn(f"{what}: integrand is {edge:.3g} at the grid edge; widen the log-SNR grid",
                      IntegrationWarning, stacklevel=3)
        return True
    return False


def pointwise_log_density(model, x, grid=None, mc=1024, rng=None, y=None, tail_tol=1e-2):
    """log p(x) (or log p(x|y)) in nats from the pointwise MMSE identity

        -log p(x) = d/2 log(2 pi e) - 1/2 int (d/(1+g) - mmse(x|g)) dg,

    integrated by the trapezoid rule in log-SNR.  ``x`` is in model coordinates.
    """
    rng = np.random.default_rng() if rng is None else rng
    grid = np.linspace(-14, 14, 281) if grid is None else np.asarray(grid, dtype=float)
    xs = np.atleast_2d(np.asarray(x, dtype=float))
    d = xs.shape[1]
    mm = _pointwise_mmse(model, xs, None if y is None else np.atleast_2d(y), grid, mc, rng)
    g = np.exp(grid)[:, None]
    integrand = g * (d / (1 + g) - mm)
    _check_tails(integrand, tail_tol, "pointwise_log_density")
    integral = trapezoid(integrand, grid, axis=0)
    logp = -(0.5 * d * np.log(2 * np.pi * np.e) - 0.5 * integral)
    return float(logp[0]) if np.ndim(x) == 1 else logp


def pointwise_mi(model, xs, ys, grid=None, mc=256, rng=None, tail_tol=1e-2):
    """log p(x|y) - log p(x) per pair: 1/2 int (mmse(x|g) - mmse(x|g, y)) dg."""
    rng = np.random.default_rng() if rng is None else rng
    grid = np.linspace(-14, 14, 281) if grid is None else np.asarray(grid, dtype=float)
    xs, ys = np.atleast_2d(xs), np.atleast_2d(ys)
    # one Sobol set shared by both passes
    seed = int(rng.integers(2**63 - 1))
    mu = _pointwise_mmse(model, xs, None, grid, mc, np.random.default_rng(seed))
    mc_ = _pointwise_mmse(model, xs, ys, grid, mc, np.random.default_rng(seed))
    integrand = np.exp(grid)[:, None] * (mu - mc_)
    _check_tails(integrand, tail_tol, "pointwise_mi")
    return 0.5 * trapezoid(integrand, grid, axis=0)
