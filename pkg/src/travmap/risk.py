"""Risk-aware traversability labels from vertical IMU acceleration.

Vertical acceleration during steady driving is close to Gaussian around
gravity. Folding deviations onto one tail (half-normal |a - mu| / sigma)
lets each measured acceleration be read as a value-at-risk quantile: the
label alpha in [0, 1] is the probability of an even larger deviation, so
alpha = 1 is the smoothest possible ride and alpha -> 0 the roughest.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

GRAVITY = 9.81
LABEL_FRAMES = 5            # consecutive acceleration frames averaged per label
MIN_STEADY_SAMPLES = 200
DEFAULT_STEADY_SECONDS = 5.0


@dataclass
class ImuTrace:
    """Time-ordered inertial samples; angular rates in rad/s."""

    t: np.ndarray
    accel: np.ndarray    # (N, 3) linear acceleration, m/s^2
    gyro: np.ndarray     # (N, 3) angular velocity, rad/s

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.accel = np.asarray(self.accel, dtype=np.float64)
        self.gyro = np.asarray(self.gyro, dtype=np.float64)
        n = len(self.t)
        if self.accel.shape != (n, 3) or self.gyro.shape != (n, 3):
            raise ValueError("accel/gyro must be (N, 3) matching t")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.accel))
                and np.all(np.isfinite(self.gyro))):
            raise ValueError("IMU samples must be finite")

    def __len__(self):
        return len(self.t)

    @property
    def a_z(self) -> np.ndarray:
        return self.accel[:, 2]


@dataclass(frozen=True)
class SteadyDistribution:
    """Gaussian fit of vertical acceleration during steady motion."""

    mu: float
    sigma: float
    source_window: tuple   # (t_start, t_end)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0.5 * GRAVITY <= self.mu <= 1.5 * GRAVITY:
            raise ValueError(
                f"mean vertical acceleration {self.mu:.3f} outside the "
                f"[{0.5 * GRAVITY}, {1.5 * GRAVITY}] sanity band"
            )


def fit_steady_distribution(
    trace: ImuTrace,
    window=None,
    window_seconds: float = DEFAULT_STEADY_SECONDS,
) -> SteadyDistribution:
    """Fit (mu, sigma) of a_z over a steady-motion window.

    `window` is a (t_start, t_end) interval; when None, the fixed-length
    sliding window (default 5 s of samples) with minimal a_z variance is
    selected automatically.
    """
    az = trace.a_z
    if window is not None:
        t0, t1 = window
        mask = (trace.t >= t0) & (trace.t <= t1)
        if mask.sum() < MIN_STEADY_SAMPLES:
            raise ValueError(
                f"steady window holds {int(mask.sum())} samples, "
                f"need >= {MIN_STEADY_SAMPLES}"
            )
        chunk = az[mask]
        t_sel = (float(trace.t[mask][0]), float(trace.t[mask][-1]))
    else:
        if len(trace) < 2:
            raise ValueError("trace too short for automatic window selection")
        dt = np.median(np.diff(trace.t))
        n = max(MIN_STEADY_SAMPLES, int(round(window_seconds / dt)))
        if len(trace) < n:
            raise ValueError(
                f"trace holds {len(trace)} samples, automatic mode needs >= {n}"
            )
        # variance of every length-n window via moving sums
        c1 = np.concatenate(([0.0], np.cumsum(az)))
        c2 = np.concatenate(([0.0], np.cumsum(az * az)))
        s1 = c1[n:] - c1[:-n]
        s2 = c2[n:] - c2[:-n]
        var = s2 / n - (s1 / n) ** 2
        start = int(np.argmin(var))
        chunk = az[start:start + n]
        t_sel = (float(trace.t[start]), float(trace.t[start + n - 1]))

    sigma = float(np.std(chunk, ddof=1))
    if sigma < 1e-6:
        raise ValueError("steady window has (near-)constant a_z; sigma is degenerate")
    return SteadyDistribution(mu=float(np.mean(chunk)), sigma=sigma, source_window=t_sel)


def risk_level(a_z, dist: SteadyDistribution):
    """Half-normal tail probability of the observed deviation.

    alpha = P[|Z| > |a_z - mu| / sigma] = erfc(|a_z - mu| / (sigma sqrt(2)));
    1 is the lowest cost, 0 the highest. Accepts scalars or arrays.
    """
    z = np.abs(np.asarray(a_z, dtype=np.float64) - dist.mu) / dist.sigma
    alpha = erfc(z / np.sqrt(2.0))
    if np.ndim(a_z) == 0:
        return float(alpha)
    return alpha


def label_at(t: float, trace: ImuTrace, dist: SteadyDistribution) -> float:
    """Mean risk level of the LABEL_FRAMES most recent samples at or before t."""
    end = int(np.searchsorted(trace.t, t, side="right"))
    if end < LABEL_FRAMES:
        raise ValueError(
            f"need {LABEL_FRAMES} IMU samples at or before t={t}, have {end}"
        )
    frames = trace.a_z[end - LABEL_FRAMES:end]
    return float(np.mean(risk_level(frames, dist)))


# ---------------------------------------------------------------------------
# ASCII trace format: "t ax ay az wx wy wz" per line
# ---------------------------------------------------------------------------


def save_imu_ascii(trace: ImuTrace, path) -> None:
    with open(path, "w") as fh:
        for i in range(len(trace)):
            row = [trace.t[i], *trace.accel[i], *trace.gyro[i]]
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_imu_ascii(path) -> ImuTrace:
    data = np.loadtxt(path, ndmin=2)
    if data.size == 0:
        data = data.reshape(0, 7)
    return ImuTrace(t=data[:, 0], accel=data[:, 1:4], gyro=data[:, 4:7])
