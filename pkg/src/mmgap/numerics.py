"""Residual-MLP denoiser with hand-written reverse-mode gradients, Adam, EMA
and a reduce-on-plateau learning-rate schedule.

All arrays are float64.  Parameters live in one flat vector; ``unpack`` hands
out reshaped views into it so the optimizer can treat the model as a single
vector while the forward/backward passes see matrices.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError

ACTIVATIONS = ("silu", "gelu")


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    width: int = 64
    n_blocks: int = 3
    time_embed_dim: int = 64
    cond_dim: int = 1
    output_dim: int | None = None
    activation: str = "silu"
    # x_hat = c_skip(t) z + c_out(t) F instead of x_hat = F
    precondition: bool = True

    def __post_init__(self):
        if self.output_dim is None:
            object.__setattr__(self, "output_dim", self.input_dim)
        if self.input_dim < 1 or self.output_dim != self.input_dim:
            raise ConfigError(
                f"input_dim ({self.input_dim}) and output_dim ({self.output_dim}) "
                "must both equal the data dimension"
            )
        if self.width <= 0:
            raise ConfigError(f"width must be positive, got {self.width}")
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be an even number >= 2")
        if self.cond_dim < 0:
            raise ConfigError("cond_dim must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_in(self):
        # z, y (masked), conditioning flag, time features
        return self.input_dim + self.cond_dim + 1 + self.time_embed_dim


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ema_decay: float = 0.999
    plateau_patience: int = 200
    plateau_factor: float = 0.5
    steps_per_epoch: int = 100

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if len(self.betas) != 2 or not all(0 < b < 1 for b in self.betas):
            raise ConfigError("betas must be a pair of reals in (0, 1)")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.steps_per_epoch < 1:
            raise ConfigError("plateau_patience and steps_per_epoch must be >= 1")


@dataclass
class ModelState:
    weights: np.ndarray
    ema_weights: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int = 0
    lr: float = 1e-3

    def __post_init__(self):
        n = len(self.weights)
        if not all(len(a) == n for a in (self.ema_weights, self.adam_m, self.adam_v)):
            raise ConfigError("weights, ema_weights and Adam moments must share a length")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    def copy(self):
        return ModelState(
            self.weights.copy(), self.ema_weights.copy(),
            self.adam_m.copy(), self.adam_v.copy(), self.step, self.lr,
        )


# ---------------------------------------------------------------- layout

def param_shapes(cfg: MlpConfig):
    w = cfg.width
    shapes = [("in.W", (cfg.n_in, w)), ("in.b", (w,))]
    for k in range(cfg.n_blocks):
        shapes += [
            (f"block{k}.W1", (w, w)), (f"block{k}.b1", (w,)),
            (f"block{k}.W2", (w, w)), (f"block{k}.b2", (w,)),
        ]
    shapes += [("out.W", (w, cfg.output_dim)), ("out.b", (cfg.output_dim,))]
    return shapes


def n_params(cfg: MlpConfig) -> int:
    return _offsets(cfg)[1]


@lru_cache(maxsize=64)
def _offsets(cfg: MlpConfig):
    out, i = [], 0
    for name, shape in param_shapes(cfg):
        size = int(np.prod(shape))
        out.append((name, i, i + size, shape))
        i += size
    return tuple(out), i


def unpack(flat, cfg: MlpConfig):
    """Dict of reshaped views into ``flat`` (writes go through)."""
    offsets, total = _offsets(cfg)
    if len(flat) != total:
        raise ConfigError(f"parameter vector has length {len(flat)}, config expects {total}")
    return {name: flat[a:b].reshape(shape) for name, a, b, shape in offsets}


def init_weights(cfg: MlpConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform fan-in initialisation; the output layer starts at zero."""
    flat = np.zeros(n_params(cfg))
    p = unpack(flat, cfg)
    for name, shape in param_shapes(cfg):
        if name.startswith("out."):
            continue
        fan_in = shape[0] if name.endswith(("W", "W1", "W2")) else p[name.replace(".b", ".W")].shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        p[name][...] = rng.uniform(-bound, bound, size=shape)
    return flat


def init_state(cfg: MlpConfig, opt: OptimizerConfig, rng: np.random.Generator) -> ModelState:
    w = init_weights(cfg, rng)
    return ModelState(w, w.copy(), np.zeros_like(w), np.zeros_like(w), 0, opt.lr)


# ---------------------------------------------------------------- forward / backward

def time_embedding(log_snr, dim: int) -> np.ndarray:
    """Sinusoidal log-SNR features with geometrically spaced frequencies."""
    t = np.atleast_1d(np.asarray(log_snr, dtype=float))[:, None]
    freqs = _frequencies(dim // 2)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


@lru_cache(maxsize=8)
def _frequencies(n):
    return np.geomspace(0.05, 2.0, n)


def skip_coefficients(log_snr):
    """(c_skip, c_out): the unit-variance Gaussian posterior-mean gain and residual std."""
    t = np.asarray(log_snr, dtype=float)
    return np.sqrt(expit(t)), np.sqrt(expit(-t))


def _act(a, kind):
    if kind == "silu":
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-a))
        return a * s, s
    # tanh approximation of GELU
    c = np.sqrt(2.0 / np.pi)
    u = c * (a + 0.044715 * a**3)
    th = np.tanh(u)
    return 0.5 * a * (1.0 + th), th


def _act_grad(a, aux, kind):
    if kind == "silu":
        return aux * (1.0 + a * (1.0 - aux))
    c = np.sqrt(2.0 / np.pi)
    th = aux
    du = c * (1.0 + 3 * 0.044715 * a**2)
    return 0.5 * (1.0 + th) + 0.5 * a * (1.0 - th**2) * du


def _broadcast_inputs(cfg, z, log_snr, y, cond_flag):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    n = z.shape[0]
    if z.shape[1] != cfg.input_dim:
        raise ConfigError(f"z has dimension {z.shape[1]}, model expects {cfg.input_dim}")
    t = np.broadcast_to(np.asarray(log_snr, dtype=float), (n,))
    flag = np.broadcast_to(np.asarray(cond_flag, dtype=float), (n,))
    if y is None:
        if np.any(flag != 0):
            raise ConfigError("cond_flag = 1 requires a conditioning vector y")
        y = np.zeros((n, cfg.cond_dim))
    else:
        y = np.asarray(y, dtype=float)
        y = y.reshape(n, -1) if y.ndim == 1 and not single else np.atleast_2d(y)
        if y.shape[1] != cfg.cond_dim:
            raise ConfigError(f"y has dimension {y.shape[1]}, model expects {cfg.cond_dim}")
        y = np.broadcast_to(y, (n, cfg.cond_dim))
    return z, t, y, flag, single


def _forward_cached(params, cfg, z, t, y, flag):
    p = unpack(params, cfg)
    inp = np.concatenate(
        [z, y * flag[:, None], flag[:, None], time_embedding(t, cfg.time_embed_dim)], axis=1
    )
    h = inp @ p["in.W"] + p["in.b"]
    cache = {"inp": inp, "blocks": []}
    for k in range(cfg.n_blocks):
        a = h @ p[f"block{k}.W1"] + p[f"block{k}.b1"]
        s, aux = _act(a, cfg.activation)
        cache["blocks"].append((h, a, s, aux))
        h = h + s @ p[f"block{k}.W2"] + p[f"block{k}.b2"]
    hf, aux_f = _act(h, cfg.activation)
    f = hf @ p["out.W"] + p["out.b"]
    cache.update(h=h, hf=hf, aux_f=aux_f, p=p)
    if cfg.precondition:
        c_skip, c_out = skip_coefficients(t)
        x_hat = c_skip[:, None] * z + c_out[:, None] * f
        cache["c_out"] = c_out
    else:
        x_hat = f
    return x_hat, cache


def forward(params, cfg: MlpConfig, z, log_snr, y=None, cond_flag=0) -> np.ndarray:
    """Denoised estimate x_hat(z, log_snr, y).

    Accepts a single vector or a batch (rows).  ``log_snr`` and ``cond_flag``
    broadcast over rows; with ``cond_flag == 0`` the value of ``y`` is ignored.
    """
    if isinstance(params, ModelState):
        params = params.weights
    z, t, y, flag, single = _broadcast_inputs(cfg, z, log_snr, y, cond_flag)
    x_hat, _ = _forward_cached(params, cfg, z, t, y, flag)
    if not np.all(np.isfinite(x_hat)):
        raise NumericError("non-finite activation in denoiser forward pass")
    return x_hat[0] if single else x_hat


def loss_and_grad(params, cfg: MlpConfig, z, log_snr, y, cond_flag, x_target,
                  sample_weight=None):
    """Mean over the batch of ``sample_weight * ||x_target - x_hat||^2`` and its gradient.

    ``sample_weight`` defaults to 1 (plain denoising MSE).  A per-SNR weighting
    leaves the minimiser at each SNR unchanged.
    """
    if isinstance(params, ModelState):
        params = params.weights
    z, t, y, flag, _ = _broadcast_inputs(cfg, z, log_snr, y, cond_flag)
    x_target = np.atleast_2d(np.asarray(x_target, dtype=float))
    n = z.shape[0]
    if n == 0:
        raise ConfigError("empty batch")
    w = np.ones(n) if sample_weight is None else np.broadcast_to(np.asarray(sample_weight, float), (n,))

    x_hat, c = _forward_cached(params, cfg, z, t, y, flag)
    resid = x_hat - x_target
    loss = float(np.mean(w * np.sum(resid**2, axis=1)))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")

    grad = np.zeros_like(params)
    g = unpack(grad, cfg)
    p = c["p"]
    d_xhat = (2.0 / n) * w[:, None] * resid
    d_f = d_xhat * c["c_out"][:, None] if cfg.precondition else d_xhat
    g["out.W"][...] = c["hf"].T @ d_f
    g["out.b"][...] = d_f.sum(axis=0)
    dh = (d_f @ p["out.W"].T) * _act_grad(c["h"], c["aux_f"], cfg.activation)
    for k in reversed(range(cfg.n_blocks)):
        h_prev, a, s, aux = c["blocks"][k]
        g[f"block{k}.W2"][...] = s.T @ dh
        g[f"block{k}.b2"][...] = dh.sum(axis=0)
        da = (dh @ p[f"block{k}.W2"].T) * _act_grad(a, aux, cfg.activation)
        g[f"block{k}.W1"][...] = h_prev.T @ da
        g[f"block{k}.b1"][...] = da.sum(axis=0)
        dh = dh + da @ p[f"block{k}.W1"].T
    g["in.W"][...] = c["inp"].T @ dh
    g["in.b"][...] = dh.sum(axis=0)
    return loss, grad


# ---------------------------------------------------------------- optimisation

def adam_step(state: ModelState, grad, opt: OptimizerConfig) -> ModelState:
    """One bias-corrected Adam update followed by the EMA update."""
    new = state.copy()
    adam_step_inplace(new, grad, opt)
    return new


def adam_step_inplace(state: ModelState, grad, opt: OptimizerConfig, work=None):
    """Same update as ``adam_step`` but mutating ``state``; ``work`` is an optional
    scratch buffer of the parameter length."""
    if not np.isfinite(grad.sum()):
        raise NumericError("non-finite gradient", step=state.step)
    b1, b2 = opt.betas
    t = state.step + 1
    m, v = state.adam_m, state.adam_v
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * (grad * grad)
    work = np.empty_like(v) if work is None else work
    # w -= lr * m_hat / (sqrt(v_hat) + eps)
    np.sqrt(v, out=work)
    work *= 1.0 / np.sqrt(1 - b2**t)
    work += opt.eps
    np.divide(m, work, out=work)
    work *= state.lr / (1 - b1**t)
    state.weights -= work
    state.ema_weights *= opt.ema_decay
    state.ema_weights += (1 - opt.ema_decay) * state.weights
    state.step = t
    return state


@dataclass
class PlateauScheduler:
    """Halve (by ``factor``) the learning rate after ``patience`` epochs without a
    strict improvement of the best epoch loss."""

    lr: float
    patience: int = 200
    factor: float = 0.5
    best: float = float("inf")
    bad_epochs: int = 0
    n_reductions: int = 0

    @classmethod
    def from_config(cls, opt: OptimizerConfig, lr=None):
        return cls(lr=opt.lr if lr is None else lr, patience=opt.plateau_patience,
                   factor=opt.plateau_factor)

    def update(self, epoch_loss: float) -> float:
        if not np.isfinite(epoch_loss):
            raise NumericError("non-finite epoch loss passed to the scheduler")
        if epoch_loss < self.best:
            self.best = epoch_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
                self.n_reductions += 1
        return self.lr


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic  b"MMGCKPT\x01"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: {"format_version", "mlp", "step", "lr",
#             "n_params", "arrays": [names...], "meta": {...}}
#   then for each name in "arrays": n_params float64 values, little-endian.
# The header is written with sorted keys, so identical states give identical bytes.

CHECKPOINT_MAGIC = b"MMGCKPT\x01"
CHECKPOINT_VERSION = 1
_ARRAYS = ("weights", "ema_weights", "adam_m", "adam_v")


def save_checkpoint(path, cfg: MlpConfig, state: ModelState, meta=None):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "mlp": asdict(cfg),
        "step": int(state.step),
        "lr": float(state.lr),
        "n_params": len(state.weights),
        "arrays": list(_ARRAYS),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in _ARRAYS:
            fh.write(np.ascontiguousarray(getattr(state, name), dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(MlpConfig, ModelState, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header['format_version']}")
    cfg = MlpConfig(**header["mlp"])
    n = header["n_params"]
    off = 12 + hlen
    arrays = {}
    for name in header["arrays"]:
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
        off += 8 * n
    state = ModelState(step=header["step"], lr=header["lr"], **arrays)
    return cfg, state, header["meta"]
