import numpy as np
import pytest

from mmgap.channel import SamplingConfig
from mmgap.errors import ConfigError
from mmgap.estimator import estimate, mmse_curve
from mmgap.numerics import MlpConfig, OptimizerConfig
from mmgap.tasks import parse_task_name
from mmgap.training import (TrainConfig, TrainRun, mlp_for_task, profile_configs, train,
                            two_stage_train)

SMALL = dict(width=16, time_embed_dim=8)


def quick(task, iterations=300, **kw):
    tc = TrainConfig(iterations=iterations, batch_size=64, standardize_samples=2000, **kw)
    return train(task, mlp_for_task(task, **SMALL), tc, OptimizerConfig(lr=3e-3))


def test_training_is_bit_reproducible():
    task = parse_task_name("1v1-normal-0.5")
    a, b = quick(task, 200), quick(task, 200)
    np.testing.assert_array_equal(a.state.weights, b.state.weights)
    np.testing.assert_array_equal(a.state.ema_weights, b.state.ema_weights)
    assert a.history == b.history


def test_different_seed_different_weights():
    task = parse_task_name("1v1-normal-0.5")
    a, b = quick(task, 100), quick(task, 100, seed=1)
    assert not np.array_equal(a.state.weights, b.state.weights)


def test_null_conditioning_rate():
    run = quick(parse_task_name("1v1-normal-0.5"), 300, null_prob=0.3)
    assert run.n_null / run.n_examples == pytest.approx(0.3, abs=0.01)


def test_loss_decreases():
    run = quick(parse_task_name("1v1-normal-0.75"), 2000)
    losses = [h[1] for h in run.history]
    assert np.mean(losses[-3:]) < losses[0]


def test_unconditional_only_model_gives_zero_orthogonal_estimate():
    task = parse_task_name("multinormal-sparse-2-2-0.0")
    run = quick(task, 300, null_prob=1.0)
    cfg = SamplingConfig(n_points=2000, inference_times=3)
    test = task.sample(2000, np.random.default_rng(0))
    orth = estimate(run.denoiser(), test, cfg, np.random.default_rng(1), "orthogonal")
    assert orth.mean_nats == 0.0 and all(r == 0.0 for r in orth.repeats)
    gap = estimate(run.denoiser(), test, cfg, np.random.default_rng(1), "gap")
    assert gap.mean_nats == 0.0


def test_conditioning_lowers_trained_curve():
    task = parse_task_name("1v1-normal-0.9")
    run = quick(task, 3000)
    c = mmse_curve(run.denoiser(), task, np.linspace(-4, 4, 9), 4096, np.random.default_rng(0))
    assert np.all(c.cond <= c.uncond + 2 * c.gap_se)
    assert c.gap[4] > 0.1


def test_checkpoints_and_loss_log(tmp_path):
    task = parse_task_name("1v1-normal-0.5")
    tc = TrainConfig(iterations=250, batch_size=32, checkpoint_every=100, standardize_samples=500)
    run = train(task, mlp_for_task(task, **SMALL), tc, OptimizerConfig(), run_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["checkpoint_00000100.bin", "checkpoint_00000200.bin", "final_ema.bin", "loss_log.csv"]
    lines = (tmp_path / "loss_log.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr" and lines[-1].startswith("250,")
    back, meta = TrainRun.load(tmp_path / "final_ema.bin")
    np.testing.assert_array_equal(back.state.ema_weights, run.state.ema_weights)
    z = np.zeros((1, 1))
    np.testing.assert_array_equal(back.denoiser().denoise(z, 0.0, z), run.denoiser().denoise(z, 0.0, z))


def test_dimension_mismatch_is_rejected():
    task = parse_task_name("1v1-normal-0.5")
    with pytest.raises(ConfigError):
        train(task, MlpConfig(input_dim=2, cond_dim=1), TrainConfig(iterations=1), OptimizerConfig())
    run = quick(task, 1)
    other = parse_task_name("multinormal-dense-2-2-0.3")
    with pytest.raises(ConfigError):
        estimate(run.denoiser(), other, SamplingConfig(n_points=10), np.random.default_rng(0))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(null_prob=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(loss_weighting="cosine")
    with pytest.raises(ConfigError):
        profile_configs("laptop", parse_task_name("1v1-normal-0.5"))


def test_profiles():
    task = parse_task_name("multinormal-dense-25-25-0.5")
    mlp, tc, oc = profile_configs("paper", task)
    assert (mlp.width, tc.batch_size, oc.lr) == (128, 256, 2e-3)
    mlp, tc, oc = profile_configs("desk", parse_task_name("1v1-normal-0.75"), seed=4)
    assert (mlp.width, tc.iterations, tc.batch_size, tc.seed) == (64, 30000, 128, 4)
    assert tc.sampling == SamplingConfig() and oc.ema_decay == 0.999 and tc.null_prob == 0.5


def test_two_stage_reuses_preliminary_on_fallback():
    task = parse_task_name("1v1-normal-0.75")
    prelim = quick(task, 50)
    tc = TrainConfig(iterations=50, batch_size=64, standardize_samples=2000)
    res = two_stage_train(task, prelim.mlp, tc, OptimizerConfig(), preliminary=prelim,
                          grid=np.linspace(-10, -8, 5), samples_per_point=256)
    assert res.fit.fallback and res.final is res.preliminary


def test_two_stage_trains_on_fitted_sampling():
    task = parse_task_name("1v1-normal-0.75")
    prelim = quick(task, 1500)
    tc = TrainConfig(iterations=100, batch_size=64, standardize_samples=2000)
    res = two_stage_train(task, prelim.mlp, tc, OptimizerConfig(lr=3e-3), preliminary=prelim,
                          samples_per_point=1024)
    assert not res.fit.fallback
    assert res.final is not res.preliminary
    assert res.fitted.loc == res.fit.half_crossing
    assert -3 < res.fitted.loc < 4


def test_independent_scalar_mmse_at_unit_snr():
    task = parse_task_name("multinormal-sparse-1-1-0.0")
    run = quick(task, 1500)
    c = mmse_curve(run.denoiser(), task, np.array([0.0]), 20000, np.random.default_rng(0))
    assert c.uncond[0] == pytest.approx(0.5, abs=0.05)
    assert c.cond[0] == pytest.approx(0.5, abs=0.05)
