import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmgap.errors import ConfigError, NumericError
from mmgap.numerics import (
    MlpConfig, ModelState, OptimizerConfig, PlateauScheduler, adam_step, forward,
    init_state, load_checkpoint, loss_and_grad, n_params, save_checkpoint, unpack,
)


def random_net(cfg, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return rng.normal(scale=scale, size=n_params(cfg))


def random_batch(cfg, n, seed=1):
    rng = np.random.default_rng(seed)
    return dict(
        z=rng.normal(size=(n, cfg.input_dim)),
        log_snr=rng.uniform(-6, 6, size=n),
        y=rng.normal(size=(n, cfg.cond_dim)),
        cond_flag=(rng.random(n) < 0.5).astype(float),
        x_target=rng.normal(size=(n, cfg.input_dim)),
    )


def reference_forward(params, cfg, z, t, y, flag):
    """Straight-line single-example forward pass, written without the module's helpers."""
    w = cfg.width
    i = 0

    def take(shape):
        nonlocal i
        size = int(np.prod(shape))
        out = params[i:i + size].reshape(shape)
        i += size
        return out

    W_in, b_in = take((cfg.n_in, w)), take((w,))
    blocks = [(take((w, w)), take((w,)), take((w, w)), take((w,))) for _ in range(cfg.n_blocks)]
    W_out, b_out = take((w, cfg.output_dim)), take((cfg.output_dim,))

    half = cfg.time_embed_dim // 2
    freqs = [0.05 * (2.0 / 0.05) ** (k / (half - 1)) for k in range(half)]
    temb = [np.sin(t * f) for f in freqs] + [np.cos(t * f) for f in freqs]
    inp = np.array(list(z) + [yy * flag for yy in y] + [flag] + temb)

    def silu(v):
        return v / (1.0 + np.exp(-v))

    h = inp @ W_in + b_in
    for W1, b1, W2, b2 in blocks:
        h = h + silu(h @ W1 + b1) @ W2 + b2
    f = silu(h) @ W_out + b_out
    gamma = np.exp(t)
    return np.sqrt(gamma / (1 + gamma)) * np.asarray(z) + np.sqrt(1 / (1 + gamma)) * f


# ---------------------------------------------------------------- forward

def test_zero_weights_give_output_bias():
    cfg = MlpConfig(input_dim=2, width=8, cond_dim=1, time_embed_dim=4, precondition=False)
    params = np.zeros(n_params(cfg))
    out = forward(params, cfg, np.array([0.3, -1.2]), 1.5, np.array([0.7]), 1)
    np.testing.assert_array_equal(out, np.zeros(2))
    unpack(params, cfg)["out.b"][...] = [0.25, -4.0]
    out = forward(params, cfg, np.array([0.3, -1.2]), 1.5, np.array([0.7]), 1)
    np.testing.assert_array_equal(out, [0.25, -4.0])


def test_zero_weights_preconditioned_is_gaussian_shrinkage():
    cfg = MlpConfig(input_dim=1, width=8, cond_dim=1, time_embed_dim=4)
    params = np.zeros(n_params(cfg))
    out = forward(params, cfg, np.array([2.0]), np.log(3.0), None, 0)
    np.testing.assert_allclose(out, [np.sqrt(0.75) * 2.0], rtol=1e-15)


def test_init_predicts_skip_term_and_is_deterministic():
    cfg = MlpConfig(input_dim=3, width=8, cond_dim=2, time_embed_dim=8)
    a = init_state(cfg, OptimizerConfig(), np.random.default_rng(5))
    b = init_state(cfg, OptimizerConfig(), np.random.default_rng(5))
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(unpack(a.weights, cfg)["out.W"], 0.0)
    z = np.array([1.0, 2.0, 3.0])
    o1 = forward(a, cfg, z, 0.5, np.ones(2), 1)
    o2 = forward(a, cfg, z, 0.5, np.ones(2), 1)
    np.testing.assert_array_equal(o1, o2)


def test_forward_matches_independent_reimplementation():
    cfg = MlpConfig(input_dim=3, width=8, cond_dim=2, time_embed_dim=6)
    params = random_net(cfg, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(5):
        z, y, t = rng.normal(size=3), rng.normal(size=2), rng.uniform(-8, 8)
        for flag in (0, 1):
            got = forward(params, cfg, z, t, y, flag)
            want = reference_forward(params, cfg, z, t, y, flag)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_batched_forward_equals_rowwise():
    cfg = MlpConfig(input_dim=2, width=8, cond_dim=1, time_embed_dim=4)
    params = random_net(cfg)
    b = random_batch(cfg, 7)
    full = forward(params, cfg, b["z"], b["log_snr"], b["y"], b["cond_flag"])
    for i in range(7):
        row = forward(params, cfg, b["z"][i], b["log_snr"][i], b["y"][i], b["cond_flag"][i])
        np.testing.assert_allclose(full[i], row, rtol=1e-13, atol=1e-14)


def test_null_flag_ignores_y():
    cfg = MlpConfig(input_dim=2, width=8, cond_dim=3, time_embed_dim=4)
    params = random_net(cfg)
    z = np.array([0.1, 0.2])
    a = forward(params, cfg, z, 1.0, np.array([5.0, -3.0, 2.0]), 0)
    b = forward(params, cfg, z, 1.0, None, 0)
    np.testing.assert_array_equal(a, b)


def test_dimension_errors():
    cfg = MlpConfig(input_dim=2, width=8, cond_dim=1, time_embed_dim=4)
    params = np.zeros(n_params(cfg))
    with pytest.raises(ConfigError):
        forward(params, cfg, np.zeros(3), 0.0)
    with pytest.raises(ConfigError):
        forward(params, cfg, np.zeros(2), 0.0, np.zeros(2), 1)
    with pytest.raises(ConfigError):
        forward(params, cfg, np.zeros(2), 0.0, None, 1)
    with pytest.raises(ConfigError):
        forward(np.zeros(5), cfg, np.zeros(2), 0.0)
    with pytest.raises(ConfigError):
        MlpConfig(input_dim=2, output_dim=3)
    with pytest.raises(ConfigError):
        MlpConfig(input_dim=2, n_blocks=0)


def test_non_finite_forward_raises():
    cfg = MlpConfig(input_dim=1, width=4, cond_dim=1, time_embed_dim=2, precondition=False)
    params = np.full(n_params(cfg), 1e200)
    with pytest.raises(NumericError):
        forward(params, cfg, np.array([1e200]), 0.0)


# ---------------------------------------------------------------- gradients

def test_exact_fit_gives_zero_loss_and_grad():
    cfg = MlpConfig(input_dim=2, width=8, cond_dim=1, time_embed_dim=4)
    params = random_net(cfg)
    b = random_batch(cfg, 5)
    b["x_target"] = forward(params, cfg, b["z"], b["log_snr"], b["y"], b["cond_flag"])
    loss, grad = loss_and_grad(params, cfg, **b)
    assert loss == 0.0
    assert np.all(grad == 0.0)


@pytest.mark.parametrize("activation", ["silu", "gelu"])
@pytest.mark.parametrize("weighted", [False, True])
def test_gradient_matches_central_differences(activation, weighted):
    cfg = MlpConfig(input_dim=4, width=8, cond_dim=2, time_embed_dim=6, activation=activation)
    params = random_net(cfg, seed=11)
    b = random_batch(cfg, 6, seed=12)
    sw = 1.0 + np.exp(b["log_snr"]) if weighted else None
    _, grad = loss_and_grad(params, cfg, **b, sample_weight=sw)
    rng = np.random.default_rng(13)
    h = 1e-5
    worst = 0.0
    for i in rng.choice(len(params), size=120, replace=False):
        p = params.copy()
        p[i] += h
        lp, _ = loss_and_grad(p, cfg, **b, sample_weight=sw)
        p[i] -= 2 * h
        lm, _ = loss_and_grad(p, cfg, **b, sample_weight=sw)
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6))
    assert worst <= 1e-4


def test_duplicated_batch_leaves_loss_and_grad_unchanged():
    cfg = MlpConfig(input_dim=2, width=8, cond_dim=1, time_embed_dim=4)
    params = random_net(cfg)
    b = random_batch(cfg, 5)
    b2 = {k: np.concatenate([v, v]) for k, v in b.items()}
    l1, g1 = loss_and_grad(params, cfg, **b)
    l2, g2 = loss_and_grad(params, cfg, **b2)
    assert l1 == pytest.approx(l2, rel=1e-14)
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 9))
def test_loss_is_non_negative(seed, n):
    cfg = MlpConfig(input_dim=2, width=4, cond_dim=1, time_embed_dim=2)
    loss, _ = loss_and_grad(random_net(cfg, seed), cfg, **random_batch(cfg, n, seed + 1))
    assert loss >= 0.0


def test_non_finite_target_raises():
    cfg = MlpConfig(input_dim=1, width=4, cond_dim=1, time_embed_dim=2)
    b = random_batch(cfg, 3)
    b["x_target"][0, 0] = np.inf
    with pytest.raises(NumericError):
        loss_and_grad(np.zeros(n_params(cfg)), cfg, **b)


# ---------------------------------------------------------------- Adam / EMA

def make_state(n, seed=0, lr=1e-3):
    w = np.random.default_rng(seed).normal(size=n)
    return ModelState(w, w.copy(), np.zeros(n), np.zeros(n), 0, lr)


def test_adam_zero_grad_is_identity():
    s = make_state(10)
    s2 = adam_step(s, np.zeros(10), OptimizerConfig())
    np.testing.assert_array_equal(s2.weights, s.weights)
    assert s2.step == s.step + 1


def test_adam_first_step_moves_by_lr_times_sign():
    s = make_state(6, lr=0.01)
    g = np.array([3.0, -0.2, 1e-3, -50.0, 0.7, -1.0])
    s2 = adam_step(s, g, OptimizerConfig(lr=0.01))
    # bias-corrected m/sqrt(v) = g/|g| at t = 1 (up to eps)
    np.testing.assert_allclose(s2.weights - s.weights, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_does_not_mutate_input():
    s = make_state(4)
    before = s.copy()
    adam_step(s, np.ones(4), OptimizerConfig())
    np.testing.assert_array_equal(s.weights, before.weights)
    np.testing.assert_array_equal(s.adam_m, before.adam_m)


def test_ema_decay_zero_tracks_weights():
    opt = OptimizerConfig(ema_decay=0.0)
    s = make_state(5)
    rng = np.random.default_rng(1)
    for _ in range(4):
        s = adam_step(s, rng.normal(size=5), opt)
        np.testing.assert_array_equal(s.ema_weights, s.weights)


def test_ema_is_exact_exponential_average_by_replay():
    opt = OptimizerConfig(ema_decay=0.9)
    s = make_state(5)
    trajectory = [s.weights.copy()]
    rng = np.random.default_rng(2)
    for _ in range(20):
        s = adam_step(s, rng.normal(size=5), opt)
        trajectory.append(s.weights.copy())
    # ema_k = d^k w_0 + sum_j (1-d) d^(k-j) w_j
    k = len(trajectory) - 1
    replay = 0.9**k * trajectory[0] + sum(
        0.1 * 0.9 ** (k - j) * trajectory[j] for j in range(1, k + 1)
    )
    np.testing.assert_allclose(s.ema_weights, replay, rtol=1e-12)


def test_training_steps_are_bit_reproducible():
    cfg = MlpConfig(input_dim=2, width=8, cond_dim=1, time_embed_dim=4)
    opt = OptimizerConfig()

    def run():
        s = init_state(cfg, opt, np.random.default_rng(0))
        for i in range(15):
            _, g = loss_and_grad(s.weights, cfg, **random_batch(cfg, 8, seed=i))
            s = adam_step(s, g, opt)
        return s

    a, b = run(), run()
    for name in ("weights", "ema_weights", "adam_m", "adam_v"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_adam_rejects_non_finite_grad():
    with pytest.raises(NumericError):
        adam_step(make_state(3), np.array([0.0, np.nan, 1.0]), OptimizerConfig())


# ---------------------------------------------------------------- plateau scheduler

def test_plateau_decreasing_losses_keep_lr():
    s = PlateauScheduler(lr=1e-3, patience=3, factor=0.5)
    for loss in np.linspace(10, 1, 50):
        assert s.update(loss) == 1e-3


def test_plateau_constant_loss_halves_once():
    s = PlateauScheduler(lr=1e-3, patience=200, factor=0.5)
    lrs = [s.update(1.0) for _ in range(201)]
    assert lrs[-1] == 5e-4
    assert s.n_reductions == 1
    assert lrs[-2] == 1e-3


def test_plateau_improvement_resets_counter():
    s = PlateauScheduler(lr=1e-3, patience=5, factor=0.5)
    s.update(1.0)
    for _ in range(4):
        s.update(1.0)
    s.update(0.5)  # improvement at epoch patience - 1
    for _ in range(4):
        assert s.update(0.9) == 1e-3
    assert s.update(0.9) == 5e-4


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = MlpConfig(input_dim=3, width=8, cond_dim=2, time_embed_dim=4, activation="gelu")
    s = make_state(n_params(cfg), seed=4)
    s = adam_step(s, np.random.default_rng(0).normal(size=n_params(cfg)), OptimizerConfig())
    p1 = save_checkpoint(tmp_path / "a.bin", cfg, s, {"note": "x"})
    p2 = save_checkpoint(tmp_path / "b.bin", cfg, s, {"note": "x"})
    assert p1.read_bytes() == p2.read_bytes()
    cfg2, s2, meta = load_checkpoint(p1)
    assert cfg2 == cfg and meta == {"note": "x"}
    assert s2.step == s.step and s2.lr == s.lr
    for name in ("weights", "ema_weights", "adam_m", "adam_v"):
        np.testing.assert_array_equal(getattr(s2, name), getattr(s, name))


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_checkpoint(p)
