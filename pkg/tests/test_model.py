import numpy as np
import pytest

from travmap import model as M
from travmap.dataset import PatchDataset
from travmap.fourier import FourierConfig, flatten_features, fourier_encode, sample_frequencies

TINY = M.ModelConfig(in_channels=3, conv_channels=(2, 2, 4), mlp_hidden=4,
                     hidden_size=4, seq_len=3, m=2, seed=0)
SMALL = M.ModelConfig(in_channels=4, conv_channels=(4, 8, 8), mlp_hidden=8,
                      hidden_size=8, seq_len=3, m=4, batch_size=16, seed=1)


def synth_dataset(n_samples, config, seed=0, learnable=False):
    rng = np.random.default_rng(seed)
    c, L = config.in_channels, config.seq_len
    patches = rng.normal(0.0, 1.0, size=(n_samples, c, 10, 10)).astype(np.float32)
    v = rng.uniform(0.5, 2.0, size=n_samples)
    omega = rng.uniform(-1.0, 1.0, size=n_samples)
    if learnable:
        signal = patches[:, 0].mean(axis=(1, 2)) + 0.3 * v
        labels = np.clip(0.5 + 0.35 * np.tanh(signal), 0.0, 1.0)
    else:
        labels = rng.uniform(0.0, 1.0, size=n_samples)
    n_seq = n_samples - L + 1
    seq = np.arange(L)[None, :] + np.arange(n_seq)[:, None]
    return PatchDataset(
        patches=patches,
        velocity_features=np.zeros((n_samples, 2 * config.m, 2)),
        v=v, omega=omega, labels=labels,
        timestamps=np.arange(n_samples) * 0.1,
        poses=np.zeros((n_samples, 3)),
        trajectory_ids=np.zeros(n_samples, dtype=np.int64),
        seq_index=seq,
    )


def probe_batch(config, bsz=4, seed=3):
    rng = np.random.default_rng(seed)
    patches = rng.normal(0.0, 1.0, size=(bsz, config.seq_len, config.in_channels, 10, 10))
    v = rng.uniform(0.0, 2.0, size=(bsz, config.seq_len))
    omega = rng.uniform(-1.0, 1.0, size=(bsz, config.seq_len))
    return patches, v, omega


# ---------------------------------------------------------------------------
# Forward contract
# ---------------------------------------------------------------------------


def test_output_in_unit_interval():
    params = M.init_params(TINY)
    for seed in range(5):
        patches, v, omega = probe_batch(TINY, bsz=8, seed=seed)
        pred = M.forward(params, patches, v, omega)
        assert pred.shape == (8,)
        assert np.all(pred >= 0.0) and np.all(pred <= 1.0)


def test_forward_deterministic():
    patches, v, omega = probe_batch(TINY)
    p1 = M.forward(M.init_params(TINY), patches, v, omega)
    p2 = M.forward(M.init_params(TINY), patches, v, omega)
    assert np.array_equal(p1, p2)


def test_shape_mismatch_rejected():
    params = M.init_params(TINY)
    patches, v, omega = probe_batch(TINY)
    with pytest.raises(ValueError, match="shape"):
        M.forward(params, patches[:, :, :2], v, omega)


def test_encode_velocity_matches_reference():
    b = sample_frequencies(FourierConfig(m=4, seed=2))
    got = M.encode_velocity(1.3, -0.4, b)
    expect = flatten_features(fourier_encode(1.3, -0.4, b))
    assert np.array_equal(got, expect)
    # Omega ablation encodes omega = 0, not a zero vector.
    ablated = M.encode_velocity(1.3, -0.4, b, use_omega=False)
    assert np.array_equal(ablated, flatten_features(fourier_encode(1.3, 0.0, b)))


def test_omega_ablation_invariance():
    cfg = M.ModelConfig(**{**TINY.__dict__, "use_omega": False})
    params = M.init_params(cfg)
    patches, v, omega = probe_batch(cfg)
    p1 = M.forward(params, patches, v, omega)
    p2 = M.forward(params, patches, v, -2.0 * omega + 0.7)
    assert np.array_equal(p1, p2)
    # The full model does react to omega.
    full = M.init_params(TINY)
    q1 = M.forward(full, patches, v, omega)
    q2 = M.forward(full, patches, v, -2.0 * omega + 0.7)
    assert not np.array_equal(q1, q2)


def test_meanpool_ablation_order_invariance():
    cfg = M.ModelConfig(**{**TINY.__dict__, "use_recurrent": False})
    params = M.init_params(cfg)
    patches, v, omega = probe_batch(cfg)
    perm = [2, 0, 1]
    p1 = M.forward(params, patches, v, omega)
    p2 = M.forward(params, patches[:, perm], v[:, perm], omega[:, perm])
    assert np.allclose(p1, p2, atol=1e-12)
    # The recurrent model is order-sensitive.
    full = M.init_params(TINY)
    q1 = M.forward(full, patches, v, omega)
    q2 = M.forward(full, patches[:, perm], v[:, perm], omega[:, perm])
    assert not np.allclose(q1, q2, atol=1e-9)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def test_gradient_check_full_model():
    assert M.gradient_check() < 1e-4


def test_gradient_check_ablations():
    no_rec = M.ModelConfig(**{**TINY.__dict__, "use_recurrent": False})
    no_om = M.ModelConfig(**{**TINY.__dict__, "use_omega": False})
    assert M.gradient_check(no_rec) < 1e-4
    assert M.gradient_check(no_om) < 1e-4


def test_unused_recurrent_weights_get_zero_gradient():
    cfg = M.ModelConfig(**{**TINY.__dict__, "use_recurrent": False})
    params = M.init_params(cfg)
    patches, v, omega = probe_batch(cfg)
    pred, cache = M.forward(params, patches, v, omega, want_cache=True)
    grads = M.backward(params, cache, np.ones_like(pred))
    for name in ("gru_wz", "gru_wr", "gru_wh", "gru_bz", "gru_br", "gru_bh"):
        assert np.all(grads[name] == 0.0)
    assert np.any(grads["conv0_w"] != 0.0)


def test_duplicate_samples_double_gradients():
    params = M.init_params(TINY)
    patches, v, omega = probe_batch(TINY, bsz=1)
    y = np.array([0.3])
    pred, cache = M.forward(params, patches, v, omega, want_cache=True)
    g1 = M.backward(params, cache, 2.0 * (pred - y))
    dbl = lambda a: np.concatenate([a, a], axis=0)
    pred2, cache2 = M.forward(params, dbl(patches), dbl(v), dbl(omega), want_cache=True)
    g2 = M.backward(params, cache2, 2.0 * (pred2 - dbl(y)))
    for name in g1:
        assert np.allclose(g2[name], 2.0 * g1[name], atol=1e-12)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def test_mse_loss_values():
    assert M.mse_loss([0.2, 0.7], [0.2, 0.7]) == 0.0
    assert M.mse_loss([0.0, 1.0], [1.0, 0.0]) == 1.0
    assert M.mse_loss([0.5], [0.0]) == 0.25


def test_mse_loss_rejects_bad_input():
    with pytest.raises(ValueError):
        M.mse_loss([], [])
    with pytest.raises(ValueError):
        M.mse_loss([0.1, 0.2], [0.1])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def test_zero_epochs_returns_init_and_empty_curves():
    data = synth_dataset(40, SMALL)
    cfg = M.ModelConfig(**{**SMALL.__dict__, "epochs": 0})
    params, curves = M.train_model(data, data, cfg)
    assert curves == []
    fresh = M.init_params(cfg)
    for name, arr in fresh.weights.items():
        assert np.array_equal(arr, params.weights[name])


def test_overfit_single_batch():
    data = synth_dataset(18, SMALL, seed=5)
    params = M.init_params(SMALL)
    M.fit_normalization(params, data.patches)
    rows = np.arange(16)
    patches, v, omega, y = M._batch(data, rows)
    adam_m = {k: np.zeros_like(w) for k, w in params.weights.items()}
    adam_v = {k: np.zeros_like(w) for k, w in params.weights.items()}
    loss = None
    for step in range(1, 501):
        pred, cache = M.forward(params, patches, v, omega, want_cache=True)
        loss = M.mse_loss(pred, y)
        if loss < 5e-4:
            break
        grads = M.backward(params, cache, 2.0 * (pred - y) / rows.size)
        for name, g in grads.items():
            adam_m[name] = 0.9 * adam_m[name] + 0.1 * g
            adam_v[name] = 0.999 * adam_v[name] + 0.001 * g * g
            m_hat = adam_m[name] / (1 - 0.9**step)
            v_hat = adam_v[name] / (1 - 0.999**step)
            params.weights[name] -= 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert loss < 1e-3


def test_training_learns_and_keeps_best_on_val():
    cfg = M.ModelConfig(**{**SMALL.__dict__, "epochs": 12, "patience": 12})
    train = synth_dataset(220, cfg, seed=7, learnable=True)
    val = synth_dataset(60, cfg, seed=8, learnable=True)
    params, curves = M.train_model(train, val, cfg)
    assert len(curves) <= 12
    val_losses = [row[2] for row in curves]
    assert val_losses[-1] < val_losses[0] or min(val_losses) < val_losses[0]
    # Returned weights reproduce the best validation loss exactly.
    assert M.evaluate_loss(params, val) == pytest.approx(min(val_losses), abs=1e-12)


def test_training_deterministic():
    cfg = M.ModelConfig(**{**SMALL.__dict__, "epochs": 3})
    train = synth_dataset(120, cfg, seed=9, learnable=True)
    val = synth_dataset(40, cfg, seed=10, learnable=True)
    p1, c1 = M.train_model(train, val, cfg)
    p2, c2 = M.train_model(train, val, cfg)
    assert c1 == c2
    for name in p1.weights:
        assert np.array_equal(p1.weights[name], p2.weights[name])


def test_divergence_reports_step_index():
    cfg = M.ModelConfig(**{**SMALL.__dict__, "epochs": 2})
    train = synth_dataset(60, cfg, seed=11)
    train.labels[5] = np.nan
    val = synth_dataset(30, cfg, seed=12)
    with pytest.raises(FloatingPointError, match=r"step \d+"):
        M.train_model(train, val, cfg)


def test_loss_curves_ascii(tmp_path):
    curves = [(0, 0.125, 0.25), (1, 0.0625, 0.125)]
    path = tmp_path / "curves.txt"
    M.save_loss_curves(curves, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch train_loss val_loss"
    assert lines[1] == "0 0.125 0.25"
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = M.ModelConfig(**{**SMALL.__dict__, "epochs": 2})
    train = synth_dataset(80, cfg, seed=13, learnable=True)
    val = synth_dataset(30, cfg, seed=14, learnable=True)
    params, _ = M.train_model(train, val, cfg)
    path = tmp_path / "model.json"
    M.save_checkpoint(params, path)
    loaded = M.load_checkpoint(path)
    assert loaded.config == params.config
    assert np.array_equal(loaded.b, params.b)
    for name in params.weights:
        assert np.array_equal(loaded.weights[name], params.weights[name])
    patches, v, omega = probe_batch(cfg, bsz=6, seed=15)
    assert np.array_equal(
        M.forward(params, patches, v, omega), M.forward(loaded, patches, v, omega)
    )
    # Re-saving the loaded params is byte-identical.
    M.save_checkpoint(loaded, tmp_path / "model2.json")
    assert path.read_bytes() == (tmp_path / "model2.json").read_bytes()


def test_feature_compatibility_guard():
    params = M.init_params(SMALL)
    good = {"b": [float(x) for x in params.b], "m": SMALL.m, "sigma_b": SMALL.sigma_b}
    M.check_feature_compatibility(params, good)
    with pytest.raises(ValueError, match="Fourier"):
        M.check_feature_compatibility(params, {**good, "b": [0.0] * SMALL.m})
    with pytest.raises(ValueError, match="m="):
        M.check_feature_compatibility(params, {"m": SMALL.m + 1})
