"""Patch datasets extracted along driven trajectories.

Each odometry pose yields one 1x1 m feature patch cut from the global grid
map, axis-aligned to the vehicle heading, paired with Fourier velocity
features and a risk label averaged over the five IMU frames up to that
pose. Consecutive patches form fixed-length sequences for the recurrent
model; splits are made per trajectory so no route leaks across them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fourier import fourier_encode, speed_norm
from .geometry import GridMap
from .risk import ImuTrace, SteadyDistribution, label_at

K_CLASSES = 6
PATCH_CELLS = 10            # 1 m window at 0.1 m resolution
CHANNEL_NAMES = tuple(
    [f"class_{k}" for k in range(K_CLASSES)]
    + ["slope_deg", "flatness", "height_diff", "rel_height", "occupancy"]
)
N_CHANNELS = len(CHANNEL_NAMES)
SEQUENCE_LENGTH = 5
MAX_SEQUENCE_GAP = 0.3      # seconds
OCCUPANCY_MIN = 0.5
DATASET_FORMAT_VERSION = 1


@dataclass
class OdomTrace:
    """Time-ordered vehicle odometry: pose, heading and body rates."""

    t: np.ndarray               # (N,)
    xyz: np.ndarray             # (N, 3)
    yaw: np.ndarray             # (N,)
    vel: np.ndarray             # (N, 3)
    omega_z: np.ndarray         # (N,)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.xyz = np.asarray(self.xyz, dtype=np.float64)
        self.yaw = np.asarray(self.yaw, dtype=np.float64)
        self.vel = np.asarray(self.vel, dtype=np.float64)
        self.omega_z = np.asarray(self.omega_z, dtype=np.float64)
        n = self.t.shape[0]
        if self.t.ndim != 1 or n < 1:
            raise ValueError("odometry needs a non-empty 1-D time vector")
        if self.xyz.shape != (n, 3) or self.vel.shape != (n, 3):
            raise ValueError("xyz and vel must be (N, 3)")
        if self.yaw.shape != (n,) or self.omega_z.shape != (n,):
            raise ValueError("yaw and omega_z must be (N,)")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        for arr in (self.t, self.xyz, self.yaw, self.vel, self.omega_z):
            if not np.all(np.isfinite(arr)):
                raise ValueError("odometry values must be finite")

    def __len__(self):
        return self.t.shape[0]


def save_odom_ascii(odom: OdomTrace, path):
    """One line per sample: t x y z yaw vx vy vz wz."""
    lines = [f"{len(odom)}"]
    for i in range(len(odom)):
        vals = [odom.t[i], *odom.xyz[i], odom.yaw[i], *odom.vel[i], odom.omega_z[i]]
        lines.append(" ".join(f"{float(v)!r}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_odom_ascii(path) -> OdomTrace:
    with open(path) as fh:
        n = int(fh.readline())
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (n, 9):
        raise ValueError(f"expected {n} rows of 9 columns, got {data.shape}")
    return OdomTrace(t=data[:, 0], xyz=data[:, 1:4], yaw=data[:, 4],
                     vel=data[:, 5:8], omega_z=data[:, 8])


def resample_odom(odom: OdomTrace, period: float = 0.1) -> OdomTrace:
    """Linear-interpolate the trace onto a uniform time grid."""
    if period <= 0:
        raise ValueError("period must be positive")
    t0, t1 = odom.t[0], odom.t[-1]
    t = t0 + np.arange(int(math.floor((t1 - t0) / period)) + 1) * period
    yaw = np.unwrap(odom.yaw)
    interp = lambda col: np.interp(t, odom.t, col)
    return OdomTrace(
        t=t,
        xyz=np.column_stack([interp(odom.xyz[:, i]) for i in range(3)]),
        yaw=interp(yaw),
        vel=np.column_stack([interp(odom.vel[:, i]) for i in range(3)]),
        omega_z=interp(odom.omega_z),
    )


@dataclass
class PatchSample:
    """One training frame: feature patch, velocity features and label."""

    patch: np.ndarray           # (C, 10, 10) float64
    velocity_features: np.ndarray   # (2m, 2)
    label: float
    pose: tuple                 # (x, y, yaw)
    timestamp: float
    v: float
    omega: float
    trajectory_id: int = 0

    def __post_init__(self):
        if not (0.0 <= self.label <= 1.0):
            raise ValueError(f"label must lie in [0, 1], got {self.label}")


@dataclass
class SequenceSample:
    """L consecutive patches of one trajectory; target is the last label."""

    samples: tuple

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("sequence needs at least one sample")

    @property
    def target(self) -> float:
        return self.samples[-1].label

    @property
    def trajectory_id(self) -> int:
        return self.samples[-1].trajectory_id


def window_cells(grid_map: GridMap, centers, yaws):
    """Unclipped (rows, cols, inside) of the 10x10 window lattice per center.

    The same nearest-neighbor lookup backs patch extraction and costmap
    footprints, so a patch scores exactly the cells it was cut from.
    """
    centers = np.asarray(centers, dtype=np.float64)
    yaws = np.asarray(yaws, dtype=np.float64)
    res = grid_map.resolution
    offs = (np.arange(PATCH_CELLS) - (PATCH_CELLS - 1) / 2.0) * res
    gx = np.broadcast_to(offs[None, :], (PATCH_CELLS, PATCH_CELLS))
    gy = np.broadcast_to(offs[:, None], (PATCH_CELLS, PATCH_CELLS))
    cos_y = np.cos(yaws)[:, None, None]
    sin_y = np.sin(yaws)[:, None, None]
    wx = centers[:, 0, None, None] + cos_y * gx - sin_y * gy
    wy = centers[:, 1, None, None] + sin_y * gx + cos_y * gy
    cols = np.floor((wx - grid_map.origin[0]) / res).astype(np.int64)
    rows = np.floor((wy - grid_map.origin[1]) / res).astype(np.int64)
    inside = (
        (rows >= 0) & (rows < grid_map.height)
        & (cols >= 0) & (cols < grid_map.width)
    )
    return rows, cols, inside


def patch_channels(grid_map: GridMap, centers: np.ndarray, yaws: np.ndarray):
    """Cut yaw-aligned 10x10 feature windows at the given centers.

    Returns (patches (P, C, 10, 10), valid (P,)). Cells are sampled
    nearest-neighbor on the rotated lattice; a window is valid only when
    every sampled cell is in bounds and at least half are occupied.
    Unoccupied cells contribute zeros in every channel.
    """
    centers = np.asarray(centers, dtype=np.float64)
    yaws = np.asarray(yaws, dtype=np.float64)
    p = centers.shape[0]
    rows, cols, inside = window_cells(grid_map, centers, yaws)
    valid = inside.all(axis=(1, 2))
    rows = np.clip(rows, 0, grid_map.height - 1)
    cols = np.clip(cols, 0, grid_map.width - 1)

    occ = grid_map.occupancy[rows, cols]
    occ_frac = occ.mean(axis=(1, 2))
    valid &= occ_frac >= OCCUPANCY_MIN

    cls = np.where(occ, grid_map.class_id[rows, cols], -1)
    patches = np.zeros((p, N_CHANNELS, PATCH_CELLS, PATCH_CELLS), dtype=np.float64)
    for k in range(K_CLASSES):
        patches[:, k] = (cls == k).astype(np.float64)

    def masked(raster):
        vals = raster[rows, cols]
        return np.where(occ, np.nan_to_num(vals, nan=0.0), 0.0)

    patches[:, K_CLASSES + 0] = masked(grid_map.slope_deg)
    patches[:, K_CLASSES + 1] = masked(grid_map.flatness)
    patches[:, K_CLASSES + 2] = masked(grid_map.height_diff)

    # Height relative to the window: the 2x2 center block where occupied,
    # else the window mean, so the channel is translation-free in z.
    heights = masked(grid_map.mean_height)
    c0 = PATCH_CELLS // 2 - 1
    ctr_occ = occ[:, c0:c0 + 2, c0:c0 + 2]
    ctr_sum = np.where(ctr_occ, heights[:, c0:c0 + 2, c0:c0 + 2], 0.0).sum(axis=(1, 2))
    ctr_n = ctr_occ.sum(axis=(1, 2))
    all_sum = np.where(occ, heights, 0.0).sum(axis=(1, 2))
    all_n = np.maximum(occ.sum(axis=(1, 2)), 1)
    ref = np.where(ctr_n > 0, ctr_sum / np.maximum(ctr_n, 1), all_sum / all_n)
    patches[:, K_CLASSES + 3] = np.where(occ, heights - ref[:, None, None], 0.0)
    patches[:, K_CLASSES + 4] = occ.astype(np.float64)
    return patches, valid


def extract_patches(
    global_map: GridMap,
    odom: OdomTrace,
    imu: ImuTrace,
    dist: SteadyDistribution,
    b: np.ndarray,
    trajectory_id: int = 0,
) -> list:
    """One PatchSample per odometry pose with a valid window and label.

    Poses whose window leaves the map, sits on mostly-unoccupied cells, or
    precedes the fifth IMU frame are dropped.
    """
    centers = odom.xyz[:, :2]
    patches, valid = patch_channels(global_map, centers, odom.yaw)
    samples = []
    for i in range(len(odom)):
        if not valid[i]:
            continue
        t = float(odom.t[i])
        if np.searchsorted(imu.t, t, side="right") < 5:
            continue
        label = label_at(t, imu, dist)
        v = speed_norm(float(odom.vel[i, 0]), float(odom.vel[i, 1]))
        omega = float(odom.omega_z[i])
        samples.append(PatchSample(
            patch=patches[i],
            velocity_features=fourier_encode(v, omega, b),
            label=float(label),
            pose=(float(odom.xyz[i, 0]), float(odom.xyz[i, 1]), float(odom.yaw[i])),
            timestamp=t,
            v=v,
            omega=omega,
            trajectory_id=trajectory_id,
        ))
    if not samples:
        raise ValueError("no odometry pose yields a valid patch window")
    return samples


def assemble_sequences(samples, length: int = SEQUENCE_LENGTH, max_gap: float = MAX_SEQUENCE_GAP) -> list:
    """Stride-1 sliding windows per trajectory, skipping time gaps."""
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    by_traj = {}
    for s in samples:
        by_traj.setdefault(s.trajectory_id, []).append(s)
    sequences = []
    for traj_id in sorted(by_traj):
        group = sorted(by_traj[traj_id], key=lambda s: s.timestamp)
        times = np.array([s.timestamp for s in group])
        for i in range(len(group) - length + 1):
            window = times[i:i + length]
            if length > 1 and np.max(np.diff(window)) > max_gap + 1e-9:
                continue
            sequences.append(SequenceSample(samples=tuple(group[i:i + length])))
    return sequences


def split_dataset(sequences, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition sequences by trajectory into train/val/test.

    Trajectory counts follow the largest-remainder rule on the shuffled
    trajectory list, so splits are disjoint, union-complete and leak-free.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    traj_ids = sorted({s.trajectory_id for s in sequences})
    if len(traj_ids) < 3:
        raise ValueError("need at least 3 trajectories to split")
    order = np.array(traj_ids)
    np.random.default_rng(seed).shuffle(order)

    n = len(order)
    base = [int(math.floor(r * n)) for r in ratios]
    rem = [(r * n - b, -i) for i, (r, b) in enumerate(zip(ratios, base))]
    for _, neg_i in sorted(rem, reverse=True)[: n - sum(base)]:
        base[-neg_i] += 1
    bounds = np.cumsum([0] + base)
    groups = [set(order[bounds[i]:bounds[i + 1]].tolist()) for i in range(3)]
    return tuple(
        [s for s in sequences if s.trajectory_id in group] for group in groups
    )


def enforce_balance(sequences, low_high_ratio: float, threshold: float = 0.5, seed: int = 0):
    """Subsample the over-represented side to hit a low:high target ratio.

    Low-cost frames are sequences whose target exceeds the threshold.
    """
    if low_high_ratio <= 0:
        raise ValueError("low_high_ratio must be positive")
    low = [s for s in sequences if s.target > threshold]
    high = [s for s in sequences if s.target <= threshold]
    if not low or not high:
        return list(sequences)
    rng = np.random.default_rng(seed)
    if len(low) > low_high_ratio * len(high):
        keep = int(round(low_high_ratio * len(high)))
        idx = rng.choice(len(low), size=keep, replace=False)
        low = [low[i] for i in sorted(idx)]
    else:
        keep = int(round(len(low) / low_high_ratio))
        idx = rng.choice(len(high), size=keep, replace=False)
        high = [high[i] for i in sorted(idx)]
    merged = low + high
    merged.sort(key=lambda s: (s.trajectory_id, s.samples[-1].timestamp))
    return merged


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


@dataclass
class PatchDataset:
    """One split in array form; sequences index rows of the sample arrays."""

    patches: np.ndarray         # (M, C, 10, 10) float32
    velocity_features: np.ndarray   # (M, 2m, 2) float64
    v: np.ndarray               # (M,)
    omega: np.ndarray           # (M,)
    labels: np.ndarray          # (M,) float64
    timestamps: np.ndarray      # (M,)
    poses: np.ndarray           # (M, 3)
    trajectory_ids: np.ndarray  # (M,)
    seq_index: np.ndarray       # (N, L) int64

    def __len__(self):
        return self.seq_index.shape[0]

    @property
    def targets(self) -> np.ndarray:
        return self.labels[self.seq_index[:, -1]]


def sequences_to_arrays(sequences) -> PatchDataset:
    """Deduplicate the overlapping windows into flat sample arrays."""
    if not sequences:
        raise ValueError("no sequences to convert")
    length = len(sequences[0].samples)
    row = {}
    ordered = []
    for seq in sequences:
        for s in seq.samples:
            if id(s) not in row:
                row[id(s)] = len(ordered)
                ordered.append(s)
    seq_index = np.array(
        [[row[id(s)] for s in seq.samples] for seq in sequences], dtype=np.int64
    )
    if seq_index.shape[1] != length:
        raise ValueError("sequences must share one length")
    return PatchDataset(
        patches=np.stack([s.patch for s in ordered]).astype(np.float32),
        velocity_features=np.stack([s.velocity_features for s in ordered]),
        v=np.array([s.v for s in ordered]),
        omega=np.array([s.omega for s in ordered]),
        labels=np.array([s.label for s in ordered], dtype=np.float64),
        timestamps=np.array([s.timestamp for s in ordered]),
        poses=np.array([s.pose for s in ordered]),
        trajectory_ids=np.array([s.trajectory_id for s in ordered], dtype=np.int64),
        seq_index=seq_index,
    )


_SPLIT_ARRAYS = (
    "patches", "velocity_features", "v", "omega", "labels",
    "timestamps", "poses", "trajectory_ids", "seq_index",
)


def save_dataset(out_dir, splits: dict, manifest: dict):
    """Write manifest.json plus per-split .npy arrays.

    splits maps name -> list of SequenceSample or PatchDataset. The
    manifest must carry the Fourier settings (m, sigma_b, seed, b) so
    training can verify feature compatibility.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = dict(manifest)
    doc.setdefault("format_version", DATASET_FORMAT_VERSION)
    doc["channels"] = list(CHANNEL_NAMES)
    doc["n_classes"] = K_CLASSES
    doc["patch_cells"] = PATCH_CELLS
    counts = {}
    for name, split in splits.items():
        data = split if isinstance(split, PatchDataset) else sequences_to_arrays(split)
        for arr_name in _SPLIT_ARRAYS:
            np.save(out / f"{name}_{arr_name}.npy", getattr(data, arr_name))
        counts[name] = {"sequences": len(data), "samples": int(data.labels.shape[0])}
        doc["sequence_length"] = int(data.seq_index.shape[1])
    doc["counts"] = counts
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_dataset(in_dir):
    """Read back (splits dict of PatchDataset, manifest dict)."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    splits = {}
    for name in manifest["counts"]:
        arrays = {a: np.load(src / f"{name}_{a}.npy") for a in _SPLIT_ARRAYS}
        splits[name] = PatchDataset(**arrays)
    return splits, manifest
