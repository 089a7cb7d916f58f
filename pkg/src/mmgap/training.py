"""Training one denoiser for conditional and unconditional denoising with
null-conditioning dropout, and the two-stage adaptive procedure."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .channel import SamplingConfig, noisy, sample_log_snr
from .errors import ConfigError, NumericError
from .estimator import AdaptiveFit, default_grid, fit_adaptive, mmse_curve
from .numerics import (MlpConfig, ModelState, OptimizerConfig, PlateauScheduler,
                       adam_step_inplace, forward, init_state, load_checkpoint,
                       loss_and_grad, save_checkpoint, unpack)
from .tasks import Batch, Standardizer, TaskSpec

log = logging.getLogger(__name__)

LOSS_WEIGHTINGS = ("snr", "uniform")


@dataclass(frozen=True)
class TrainConfig:
    null_prob: float = 0.5
    batch_size: int = 128
    iterations: int = 30000
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    seed: int = 0
    # "snr": weight each example's squared error by (1 + gamma); "uniform": plain MSE
    loss_weighting: str = "snr"
    standardize: bool = True
    standardize_samples: int = 10000
    checkpoint_every: int = 10000

    def __post_init__(self):
        if not 0 <= self.null_prob <= 1:
            raise ConfigError("null_prob must lie in [0, 1]")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if self.loss_weighting not in LOSS_WEIGHTINGS:
            raise ConfigError(f"loss_weighting must be one of {LOSS_WEIGHTINGS}")


class TrainedDenoiser:
    """Inference wrapper: standardises task samples and runs the network."""

    def __init__(self, cfg: MlpConfig, weights, standardizer: Standardizer):
        self.cfg = cfg
        self.weights = weights
        self.standardizer = standardizer
        self.dim_x, self.dim_y = cfg.input_dim, cfg.cond_dim

    def prepare(self, batch: Batch) -> Batch:
        if batch.xs.shape[1] != self.dim_x or batch.ys.shape[1] != self.dim_y:
            raise ConfigError(
                f"task dimensions ({batch.xs.shape[1]}, {batch.ys.shape[1]}) do not match "
                f"the model ({self.dim_x}, {self.dim_y})"
            )
        return self.standardizer.apply(batch)

    def denoise(self, z, log_snr, y=None):
        if y is None:
            return forward(self.weights, self.cfg, z, log_snr, None, 0)
        return forward(self.weights, self.cfg, z, log_snr, y, 1)


@dataclass
class TrainRun:
    mlp: MlpConfig
    state: ModelState
    standardizer: Standardizer
    history: list = field(default_factory=list)   # (step, mean epoch loss, lr)
    n_examples: int = 0
    n_null: int = 0
    use_ema: bool = True

    def denoiser(self, use_ema=None) -> TrainedDenoiser:
        ema = self.use_ema if use_ema is None else use_ema
        w = self.state.ema_weights if ema else self.state.weights
        return TrainedDenoiser(self.mlp, w, self.standardizer)

    def save(self, path, meta=None):
        meta = {"standardizer": self.standardizer.to_dict(), "use_ema": self.use_ema, **(meta or {})}
        return save_checkpoint(path, self.mlp, self.state, meta)

    @classmethod
    def load(cls, path):
        cfg, state, meta = load_checkpoint(path)
        std = Standardizer.from_dict(meta["standardizer"])
        return cls(cfg, state, std, use_ema=meta.get("use_ema", True)), meta


def mlp_for_task(task: TaskSpec, **kw) -> MlpConfig:
    return MlpConfig(input_dim=task.dim_x, cond_dim=task.dim_y, **kw)


def train(task: TaskSpec, mlp: MlpConfig, tc: TrainConfig, oc: OptimizerConfig,
          run_dir=None) -> TrainRun:
    """Fit x_hat(z, log_snr, y) by Adam on fresh task samples.

    Each example gets its own log-SNR draw from ``tc.sampling`` and, with
    probability ``tc.null_prob``, a null conditioning (y zeroed, flag 0).
    """
    if mlp.input_dim != task.dim_x or mlp.cond_dim != task.dim_y:
        raise ConfigError(
            f"mlp dimensions ({mlp.input_dim}, {mlp.cond_dim}) do not match task "
            f"({task.dim_x}, {task.dim_y})"
        )
    init_rng, data_rng, noise_rng = (np.random.default_rng(s)
                                     for s in np.random.SeedSequence([tc.seed, task.seed]).spawn(3))
    state = init_state(mlp, oc, init_rng)
    if tc.null_prob == 1.0:
        # never conditioned: silence the y/flag inputs so conditional calls
        # reproduce the unconditional output exactly (their gradients stay zero)
        for w in (state.weights, state.ema_weights):
            unpack(w, mlp)["in.W"][mlp.input_dim:mlp.input_dim + mlp.cond_dim + 1] = 0.0
    if tc.standardize:
        std = Standardizer.fit(task.sample(tc.standardize_samples, data_rng))
    else:
        std = Standardizer.identity(task.dim_x, task.dim_y)

    sched = PlateauScheduler.from_config(oc)
    run = TrainRun(mlp, state, std)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    B, K = tc.batch_size, oc.steps_per_epoch
    work = np.empty_like(state.weights)
    step = 0
    while step < tc.iterations:
        k = min(K, tc.iterations - step)
        n = k * B
        data = std.apply(task.sample(n, data_rng))
        t, _ = sample_log_snr(tc.sampling, noise_rng, size=n)
        eps = noise_rng.standard_normal(data.xs.shape)
        flag = (noise_rng.random(n) >= tc.null_prob).astype(float)
        z = noisy(data.xs, t, eps)
        ys = data.ys * flag[:, None]
        weight = 1.0 + np.exp(t) if tc.loss_weighting == "snr" else None
        run.n_examples += n
        run.n_null += int(n - flag.sum())

        losses = np.empty(k)
        for j in range(k):
            sl = slice(j * B, (j + 1) * B)
            try:
                loss, grad = loss_and_grad(
                    state.weights, mlp, z[sl], t[sl], ys[sl], flag[sl], data.xs[sl],
                    None if weight is None else weight[sl],
                )
                adam_step_inplace(state, grad, oc, work)
            except NumericError as exc:
                raise NumericError(f"training diverged: {exc}", step=step + j) from exc
            losses[j] = loss
        step += k
        epoch_loss = float(losses.mean())
        state.lr = sched.update(epoch_loss)
        run.history.append((step, epoch_loss, state.lr))

        if run_dir is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0:
            run.save(run_dir / f"checkpoint_{step:08d}.bin")
    if run_dir is not None:
        write_loss_log(run_dir / "loss_log.csv", run.history)
        run.save(run_dir / "final_ema.bin")
    log.info("trained %s for %d steps, final loss %.5g", task.name, step, run.history[-1][1])
    return run


def write_loss_log(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in history:
            w.writerow([step, repr(float(loss)), repr(float(lr))])


@dataclass
class TwoStageResult:
    preliminary: TrainRun
    final: TrainRun
    fit: AdaptiveFit

    @property
    def fitted(self) -> SamplingConfig:
        return self.fit.sampling


def two_stage_train(task: TaskSpec, mlp: MlpConfig, tc: TrainConfig, oc: OptimizerConfig,
                    preliminary: TrainRun | None = None, grid=None, samples_per_point=4096,
                    space="snr-scaled", run_dir=None) -> TwoStageResult:
    """Preliminary model on ``tc.sampling`` -> adaptive proposal from its
    conditional MMSE curve -> final model trained on the fitted proposal.

    On a fallback (no crossings) the preliminary model is reused as final.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if preliminary is None:
        preliminary = train(task, mlp, tc, oc, None if run_dir is None else run_dir / "preliminary")
    rng = np.random.default_rng([tc.seed, task.seed, 7])
    curve = mmse_curve(preliminary.denoiser(), task, default_grid() if grid is None else grid,
                       samples_per_point, rng)
    fit = fit_adaptive(curve, task.dim_x, tc.sampling, space=space)
    if fit.fallback:
        log.warning("adaptive fit found no crossings for %s; keeping default sampling", task.name)
        return TwoStageResult(preliminary, preliminary, fit)
    final = train(task, mlp, replace(tc, sampling=fit.sampling), oc,
                  None if run_dir is None else run_dir / "final")
    return TwoStageResult(preliminary, final, fit)


# ---------------------------------------------------------------- profiles

def profile_configs(profile: str, task: TaskSpec, seed=0):
    """(MlpConfig, TrainConfig, OptimizerConfig) for the "desk" or "paper" profile."""
    dim = task.dim_x + task.dim_y
    if profile == "desk":
        width, temb, batch, lr, iters = 64, 64, 128, 1e-3, 30000
    elif profile == "paper":
        if dim <= 10:
            width, temb, batch, lr, iters = 64, 64, 128, 1e-3, 390000
        elif dim <= 50:
            width, temb, batch, lr, iters = 128, 128, 256, 2e-3, 290000
        else:
            width, temb, batch, lr, iters = 256, 256, 256, 2e-3, 290000
    else:
        raise ConfigError(f"profile must be 'desk' or 'paper', got {profile!r}")
    mlp = mlp_for_task(task, width=width, time_embed_dim=temb)
    tc = TrainConfig(null_prob=0.5, batch_size=batch, iterations=iters, seed=seed)
    oc = OptimizerConfig(lr=lr)
    return mlp, tc, oc


def config_dict(mlp, tc, oc):
    return {"mlp": asdict(mlp), "train": asdict(tc), "optimizer": asdict(oc)}
