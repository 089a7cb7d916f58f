"""Synthetic joint distributions with known mutual information, MI-preserving
transforms, and closed-form Gaussian MMSE / MI oracles."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import digamma, gammaln, ndtr

from .errors import ConfigError, DomainError

FAMILIES = ("bivariate-normal", "multinormal-dense", "multinormal-sparse", "student-t",
            "uniform-additive")
TRANSFORMS = ("half-cube", "asinh", "spiral", "normal-cdf")


@dataclass(frozen=True)
class Batch:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        if len(self.xs) != len(self.ys):
            raise ConfigError("xs and ys must have the same number of rows")

    def __len__(self):
        return len(self.xs)

    def take(self, idx):
        return Batch(self.xs[idx], self.ys[idx])


# ---------------------------------------------------------------- Gaussian oracles

def _spd_eigvals(cov, what="covariance"):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise DomainError(f"{what} must be square")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise DomainError(f"{what} must be symmetric")
    lam = np.linalg.eigvalsh(cov)
    if lam[0] <= 1e-12 * max(1.0, lam[-1]):
        raise DomainError(f"{what} is singular or not positive definite")
    return lam


def gaussian_mmse(cov_x, gamma):
    """trace((cov_x^-1 + gamma I)^-1): the MMSE of a Gaussian source at SNR gamma."""
    lam = _spd_eigvals(cov_x)
    g = np.asarray(gamma, dtype=float)
    out = np.sum(lam / (1.0 + np.multiply.outer(g, lam)), axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class JointGaussianSpec:
    dim_x: int
    dim_y: int
    cov: np.ndarray = field(repr=False)

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = self.dim_x + self.dim_y
        if cov.shape != (n, n):
            raise DomainError(f"cov has shape {cov.shape}, expected {(n, n)}")
        _spd_eigvals(cov)
        object.__setattr__(self, "cov", cov)

    @property
    def sxx(self):
        return self.cov[:self.dim_x, :self.dim_x]

    @property
    def sxy(self):
        return self.cov[:self.dim_x, self.dim_x:]

    @property
    def syy(self):
        return self.cov[self.dim_x:, self.dim_x:]

    def regression(self):
        """Matrix B with E[x | y] = B y."""
        return np.linalg.solve(self.syy, self.sxy.T).T

    def conditional_cov(self):
        c = self.sxx - self.regression() @ self.sxy.T
        return 0.5 * (c + c.T)

    def sample(self, n, rng):
        L = np.linalg.cholesky(self.cov)
        v = rng.standard_normal((n, self.dim_x + self.dim_y)) @ L.T
        return Batch(v[:, :self.dim_x], v[:, self.dim_x:])


def gaussian_conditional_mmse(spec: JointGaussianSpec, gamma):
    """MMSE of x given (z_gamma, y), via the Schur complement of the joint covariance."""
    return gaussian_mmse(spec.conditional_cov(), gamma)


def gaussian_mi(spec: JointGaussianSpec) -> float:
    """I(x; y) in nats: 0.5 (log det Sxx - log det Sx|y)."""
    _, ld_x = np.linalg.slogdet(spec.sxx)
    _, ld_c = np.linalg.slogdet(spec.conditional_cov())
    return float(0.5 * (ld_x - ld_c))


def dense_cov(dim_x, dim_y, strength):
    n = dim_x + dim_y
    return np.full((n, n), float(strength)) + (1 - float(strength)) * np.eye(n)


def sparse_cov(dim_x, dim_y, rho, n_pairs=2):
    n = dim_x + dim_y
    cov = np.eye(n)
    for i in range(n_pairs):
        cov[i, dim_x + i] = cov[dim_x + i, i] = rho
    return cov


def rho_for_mi(total_nats, n_pairs):
    """Per-pair correlation giving ``total_nats`` over ``n_pairs`` independent pairs."""
    if total_nats < 0:
        raise DomainError("target MI must be non-negative")
    return float(np.sqrt(-np.expm1(-2.0 * total_nats / n_pairs)))


# ---------------------------------------------------------------- transforms

def half_cube(v):
    return v * np.sqrt(np.abs(v))


def half_cube_inverse(v):
    return np.sign(v) * np.abs(v) ** (2.0 / 3.0)


def spiral(v, speed=1.0, inverse=False):
    """Rotate coordinate pairs (0,1), (2,3), ... by speed * ||v||; norm preserving."""
    v = np.asarray(v, dtype=float)
    if v.shape[1] < 2:
        raise DomainError("spiral transform needs at least two coordinates")
    theta = speed * np.linalg.norm(v, axis=1)
    if inverse:
        theta = -theta
    c, s = np.cos(theta), np.sin(theta)
    out = v.copy()
    for i in range(0, v.shape[1] - 1, 2):
        a, b = v[:, i], v[:, i + 1]
        out[:, i] = c * a - s * b
        out[:, i + 1] = s * a + c * b
    return out


def apply_transform(v, name, params=None):
    params = params or {}
    if name == "half-cube":
        return half_cube(v)
    if name == "asinh":
        return np.arcsinh(v)
    if name == "normal-cdf":
        return ndtr(v)
    if name == "spiral":
        return spiral(v, params.get("speed", 1.0))
    raise ConfigError(f"unknown transform {name!r}; expected one of {TRANSFORMS}")


# ---------------------------------------------------------------- task descriptors

_FAMILY_PARAMS = {
    "bivariate-normal": {"rho"},
    "multinormal-dense": {"dim_x", "dim_y", "strength"},
    "multinormal-sparse": {"dim_x", "dim_y", "rho", "mi", "n_pairs"},
    "student-t": {"dim_x", "dim_y", "dof"},
    "uniform-additive": {"noise"},
}


@dataclass(frozen=True)
class TaskSpec:
    family: str
    params: dict = field(default_factory=dict)
    transform: str | None = None
    transform_params: dict = field(default_factory=dict)
    ground_truth_nats: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family: unknown task family {self.family!r}; expected one of {FAMILIES}")
        unknown = set(self.params) - _FAMILY_PARAMS[self.family]
        if unknown:
            raise ConfigError(f"params: unknown keys {sorted(unknown)} for family {self.family!r}")
        if self.transform is not None and self.transform not in TRANSFORMS:
            raise ConfigError(f"transform: unknown transform {self.transform!r}")
        self._validate()
        if self.ground_truth_nats is None:
            object.__setattr__(self, "ground_truth_nats", analytic_ground_truth(self))

    def _validate(self):
        p = self.params
        if self.family == "bivariate-normal":
            if not -1 < p.get("rho", np.nan) < 1:
                raise DomainError("rho must lie in (-1, 1)")
        elif self.family == "multinormal-sparse":
            if ("rho" in p) == ("mi" in p):
                raise ConfigError("multinormal-sparse needs exactly one of 'rho' or 'mi'")
            if "rho" in p and not -1 < p["rho"] < 1:
                raise DomainError("rho must lie in (-1, 1)")
        elif self.family == "student-t":
            if not p.get("dof", 0) > 0:
                raise DomainError("dof must be positive")
        elif self.family == "uniform-additive":
            if not p.get("noise", 0) > 0:
                raise DomainError("noise must be positive")
        if self.family in ("multinormal-dense", "multinormal-sparse", "student-t"):
            if p.get("dim_x", 0) < 1 or p.get("dim_y", 0) < 1:
                raise DomainError("dim_x and dim_y must be >= 1")
        if self.transform == "spiral" and min(self.dim_x, self.dim_y) < 2:
            raise DomainError("spiral transform needs dim_x, dim_y >= 2")
        if self.family in ("multinormal-dense", "multinormal-sparse", "bivariate-normal"):
            gaussian_spec(self)  # raises DomainError for a non-PD covariance

    @property
    def dim_x(self):
        return self.params.get("dim_x", 1)

    @property
    def dim_y(self):
        return self.params.get("dim_y", 1)

    @property
    def name(self):
        return task_name(self)

    def sample(self, n, rng):
        return sample(self, n, rng)

    def to_dict(self):
        return asdict(self)


def _sparse_pairs(task):
    return task.params.get("n_pairs", min(2, task.dim_x, task.dim_y))


def gaussian_spec(task: TaskSpec) -> JointGaussianSpec:
    """Joint covariance of the (untransformed) Gaussian families."""
    p = task.params
    if task.family == "bivariate-normal":
        cov = np.array([[1.0, p["rho"]], [p["rho"], 1.0]])
    elif task.family == "multinormal-dense":
        cov = dense_cov(p["dim_x"], p["dim_y"], p["strength"])
    elif task.family == "multinormal-sparse":
        k = _sparse_pairs(task)
        rho = p["rho"] if "rho" in p else rho_for_mi(p["mi"], k)
        cov = sparse_cov(p["dim_x"], p["dim_y"], rho, k)
    elif task.family == "student-t":
        cov = np.eye(task.dim_x + task.dim_y)
    else:
        raise DomainError(f"{task.family} is not a Gaussian family")
    return JointGaussianSpec(task.dim_x, task.dim_y, cov)


def student_t_mi_correction(dof, dim_x, dim_y):
    """MI of an identity-dispersion multivariate Student-t minus its Gaussian part."""
    def f(k):
        return gammaln(k / 2) - (k / 2) * digamma(k / 2)

    return float(f(dof) + f(dof + dim_x + dim_y) - f(dof + dim_x) - f(dof + dim_y))


def uniform_additive_mi(noise):
    """I(X; X + N), X ~ U(0, 1), N ~ U(-noise, noise)."""
    if noise <= 0.5:
        return float(noise - np.log(2 * noise))
    return float(1.0 / (4 * noise))


def analytic_ground_truth(task: TaskSpec) -> float:
    if task.family == "uniform-additive":
        return uniform_additive_mi(task.params["noise"])
    if task.family == "student-t":
        return student_t_mi_correction(task.params["dof"], task.dim_x, task.dim_y)
    return gaussian_mi(gaussian_spec(task))


def sample(task: TaskSpec, n: int, rng: np.random.Generator) -> Batch:
    """``n`` joint draws; the transform (if any) is applied to x and y separately."""
    if n < 1:
        raise DomainError("n must be >= 1")
    if task.family == "uniform-additive":
        w = task.params["noise"]
        xs = rng.random((n, 1))
        ys = xs + rng.uniform(-w, w, size=(n, 1))
    elif task.family == "student-t":
        b = gaussian_spec(task).sample(n, rng)
        dof = task.params["dof"]
        scale = np.sqrt(dof / rng.chisquare(dof, size=(n, 1)))
        xs, ys = b.xs * scale, b.ys * scale
    else:
        b = gaussian_spec(task).sample(n, rng)
        xs, ys = b.xs, b.ys
    if task.transform is not None:
        xs = apply_transform(xs, task.transform, task.transform_params)
        ys = apply_transform(ys, task.transform, task.transform_params)
    return Batch(xs, ys)


# ---------------------------------------------------------------- names and files

_TRANSFORM_PREFIX = {"halfcube": "half-cube", "asinh": "asinh", "spiral": "spiral",
                     "normalcdf": "normal-cdf"}
_PREFIX_OF = {v: k for k, v in _TRANSFORM_PREFIX.items()}


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def parse_task_name(name: str, seed: int = 0) -> TaskSpec:
    """Parse names such as ``1v1-normal-0.75``, ``multinormal-dense-25-25-0.5``,
    ``spiral-multinormal-sparse-3-3-0.8``, ``multinormal-sparse-3-3-mi5.0``,
    ``student-identity-3-3-2`` or ``1v1-additive-0.1``."""
    rest = name
    transform, tparams = None, {}
    m = re.match(r"^(halfcube|asinh|spiral|normalcdf)(?:@([0-9.]+))?-(.+)$", rest)
    if m:
        transform = _TRANSFORM_PREFIX[m.group(1)]
        if m.group(2):
            tparams = {"speed": float(m.group(2))}
        rest = m.group(3)
    num = r"(-?[0-9.]+)"
    patterns = [
        (rf"^(?:1v1-normal|bivariate-normal)-{num}$", "bivariate-normal", ("rho",)),
        (rf"^multinormal-dense-(\d+)-(\d+)-{num}$", "multinormal-dense", ("dim_x", "dim_y", "strength")),
        (rf"^multinormal-sparse-(\d+)-(\d+)-mi{num}$", "multinormal-sparse", ("dim_x", "dim_y", "mi")),
        (rf"^multinormal-sparse-(\d+)-(\d+)-{num}$", "multinormal-sparse", ("dim_x", "dim_y", "rho")),
        (rf"^student-identity-(\d+)-(\d+)-{num}$", "student-t", ("dim_x", "dim_y", "dof")),
        (rf"^(?:1v1-additive|uniform-additive)-{num}$", "uniform-additive", ("noise",)),
    ]
    for pat, family, keys in patterns:
        m = re.match(pat, rest)
        if m:
            params = {}
            for k, v in zip(keys, m.groups()):
                integral = k.startswith("dim") or (k == "dof" and float(v).is_integer())
                params[k] = int(float(v)) if integral else float(v)
            return TaskSpec(family, params, transform, tparams, seed=seed)
    raise ConfigError(f"task: cannot parse task name {name!r}")


def task_name(task: TaskSpec) -> str:
    p = task.params
    if task.family == "bivariate-normal":
        base = f"1v1-normal-{_fmt(p['rho'])}"
    elif task.family == "multinormal-dense":
        base = f"multinormal-dense-{p['dim_x']}-{p['dim_y']}-{_fmt(p['strength'])}"
    elif task.family == "multinormal-sparse":
        tail = _fmt(p["rho"]) if "rho" in p else "mi" + _fmt(p["mi"])
        base = f"multinormal-sparse-{p['dim_x']}-{p['dim_y']}-{tail}"
    elif task.family == "student-t":
        base = f"student-identity-{p['dim_x']}-{p['dim_y']}-{_fmt(p['dof'])}"
    else:
        base = f"1v1-additive-{_fmt(p['noise'])}"
    if task.transform:
        prefix = _PREFIX_OF[task.transform]
        if "speed" in task.transform_params:
            prefix += "@" + _fmt(task.transform_params["speed"])
        base = f"{prefix}-{base}"
    return base


def task_from_dict(d) -> TaskSpec:
    if isinstance(d, str):
        return parse_task_name(d)
    d = dict(d)
    if "name" in d:
        name = d.pop("name")
        seed = d.pop("seed", 0)
        gt = d.pop("ground_truth_nats", None)
        if d:
            raise ConfigError(f"task: unknown keys {sorted(d)} alongside 'name'")
        t = parse_task_name(name, seed=seed)
        if gt is not None:
            t = TaskSpec(t.family, t.params, t.transform, t.transform_params, gt, t.seed)
        return t
    allowed = {"family", "params", "transform", "transform_params", "ground_truth_nats", "seed"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"task: unknown keys {sorted(unknown)}")
    if "family" not in d:
        raise ConfigError("task: missing field 'family'")
    return TaskSpec(**d)


def save_task(path, task: TaskSpec):
    d = {"schema_version": 1, "name": task.name, **task.to_dict()}
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def load_task(path) -> TaskSpec:
    d = json.loads(Path(path).read_text())
    version = d.pop("schema_version", 1)
    if version != 1:
        raise ConfigError(f"{path}: unsupported task schema version {version}")
    d.pop("name", None)
    return task_from_dict(d)


# ---------------------------------------------------------------- standardisation

@dataclass(frozen=True)
class Standardizer:
    """Per-coordinate affine map fitted on a training split (MI is invariant to it)."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, batch: Batch):
        def stats(a):
            sd = a.std(axis=0)
            return a.mean(axis=0), np.where(sd > 0, sd, 1.0)

        return cls(*stats(batch.xs), *stats(batch.ys))

    @classmethod
    def identity(cls, dim_x, dim_y):
        return cls(np.zeros(dim_x), np.ones(dim_x), np.zeros(dim_y), np.ones(dim_y))

    def apply(self, batch: Batch) -> Batch:
        return Batch((batch.xs - self.x_mean) / self.x_std, (batch.ys - self.y_mean) / self.y_std)

    def to_dict(self):
        return {k: [float(v) for v in getattr(self, k)] for k in ("x_mean", "x_std", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=float) for k in ("x_mean", "x_std", "y_mean", "y_std")})
