"""Fourier parameterization of scalar speed and yaw rate.

A fixed bank of random frequencies lifts the two velocity scalars into a
2m x 2 trigonometric feature block. The frequencies are sampled once per
model and persisted with it, so training and inference share identical
features for the same input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FourierConfig:
    """Frequency bank settings: m pairs sampled from N(0, sigma_b^2)."""

    m: int = 8
    sigma_b: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not (self.sigma_b > 0):
            raise ValueError(f"sigma_b must be > 0, got {self.sigma_b}")


def sample_frequencies(config: FourierConfig) -> np.ndarray:
    """Draw the m-vector b of frequencies, deterministic for a fixed seed."""
    rng = np.random.default_rng(config.seed)
    return rng.normal(0.0, config.sigma_b, size=config.m)


def fourier_encode(v: float, omega: float, b: np.ndarray) -> np.ndarray:
    """Encode (v, omega) as a 2m x 2 matrix of cos/sin features.

    Rows alternate cos and sin; column 0 carries 2*pi*b_i*v phases and
    column 1 carries 2*pi*b_i*omega phases.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1 or b.size < 1:
        raise ValueError("b must be a non-empty 1-D frequency vector")
    if not (math.isfinite(v) and math.isfinite(omega)):
        raise ValueError("velocity inputs must be finite")
    phase = 2.0 * np.pi * np.column_stack([b * v, b * omega])
    out = np.empty((2 * b.size, 2), dtype=np.float64)
    out[0::2] = np.cos(phase)
    out[1::2] = np.sin(phase)
    return out


def flatten_features(features: np.ndarray) -> np.ndarray:
    """Flatten a 2m x 2 feature block to the 4m-vector fed to the model."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != 2 or features.shape[0] % 2 != 0:
        raise ValueError(f"expected a 2m x 2 feature block, got {features.shape}")
    return features.reshape(-1)


def speed_norm(v_x: float, v_y: float) -> float:
    """Planar speed: norm of the x/y linear velocity components."""
    if not (math.isfinite(v_x) and math.isfinite(v_y)):
        raise ValueError("velocity components must be finite")
    return math.hypot(v_x, v_y)
