import numpy as np
import pytest

from travmap.fourier import (
    FourierConfig,
    flatten_features,
    fourier_encode,
    sample_frequencies,
    speed_norm,
)


def test_same_seed_same_frequencies():
    cfg = FourierConfig(m=8, sigma_b=1.0, seed=7)
    b1 = sample_frequencies(cfg)
    b2 = sample_frequencies(cfg)
    assert np.array_equal(b1, b2)


def test_different_seed_changes_frequencies():
    b1 = sample_frequencies(FourierConfig(m=8, seed=1))
    b2 = sample_frequencies(FourierConfig(m=8, seed=2))
    assert np.any(b1 != b2)


def test_frequency_sample_std():
    # 10^4 aggregated draws at sigma_b = 1 land within 1 +/- 0.05.
    draws = []
    for seed in range(1000):
        draws.append(sample_frequencies(FourierConfig(m=10, sigma_b=1.0, seed=seed)))
    std = np.concatenate(draws).std()
    assert abs(std - 1.0) < 0.05


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        FourierConfig(m=0)
    with pytest.raises(ValueError):
        FourierConfig(m=8, sigma_b=0.0)
    with pytest.raises(ValueError):
        FourierConfig(m=8, sigma_b=-1.0)


def test_zero_velocity_encoding():
    b = sample_frequencies(FourierConfig(m=4, seed=3))
    feats = fourier_encode(0.0, 0.0, b)
    assert feats.shape == (8, 2)
    assert np.array_equal(feats[0::2], np.ones((4, 2)))
    assert np.array_equal(feats[1::2], np.zeros((4, 2)))


def test_half_frequency_analytic_value():
    # b_1 = 0.5, v = 1: phase pi, so the first pair's v-column is (-1, 0).
    feats = fourier_encode(1.0, 0.0, np.array([0.5]))
    assert feats[0, 0] == pytest.approx(-1.0, abs=1e-12)
    assert feats[1, 0] == pytest.approx(0.0, abs=1e-12)
    # omega = 0 leaves the omega column at zero phase.
    assert feats[0, 1] == 1.0
    assert feats[1, 1] == 0.0


def test_entries_bounded():
    rng = np.random.default_rng(11)
    b = sample_frequencies(FourierConfig(m=8, seed=5))
    for _ in range(100):
        v, w = rng.normal(0, 10, size=2)
        feats = fourier_encode(v, w, b)
        assert np.all(feats >= -1.0) and np.all(feats <= 1.0)


def test_periodicity_in_v():
    # Shifting v by k/b_1 leaves the v-column unchanged for one frequency.
    b = np.array([0.8])
    base = fourier_encode(0.37, 1.2, b)
    for k in (1, 2, 5):
        shifted = fourier_encode(0.37 + k / 0.8, 1.2, b)
        assert np.allclose(shifted[:, 0], base[:, 0], atol=1e-9)


def test_rejects_non_finite_inputs():
    b = np.array([1.0])
    with pytest.raises(ValueError):
        fourier_encode(float("nan"), 0.0, b)
    with pytest.raises(ValueError):
        fourier_encode(0.0, float("inf"), b)
    with pytest.raises(ValueError):
        speed_norm(float("nan"), 0.0)


def test_flatten_shape():
    b = sample_frequencies(FourierConfig(m=8, seed=0))
    feats = fourier_encode(1.0, 0.5, b)
    flat = flatten_features(feats)
    assert flat.shape == (32,)
    assert np.array_equal(flat.reshape(16, 2), feats)
    with pytest.raises(ValueError):
        flatten_features(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        flatten_features(np.zeros((4, 3)))


def test_speed_norm_values():
    assert speed_norm(3.0, 4.0) == 5.0
    assert speed_norm(0.0, 0.0) == 0.0
    assert speed_norm(-1.0, 0.0) == 1.0
