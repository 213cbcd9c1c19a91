"""Grid maps and per-cell terrain geometry from semantic point clouds.

A semantic point cloud is rasterized into a robot- or world-frame grid map
(0.1 m cells by default). Each occupied cell carries a dominant semantic
class and three geometric features: slope of the local surface normal,
flatness (RMS deviation along the normal) and height difference (peak to
peak deviation along the normal). Normals come from PCA over a square
window (0.5 m default) around the cell center.
"""

from dataclasses import dataclass, field

import numpy as np

OVERHEAD_CUTOFF = 2.0  # points more than this far above the vehicle are ignored
NORMAL_WINDOW = 0.5    # side length of the PCA neighborhood, meters
DEFAULT_RESOLUTION = 0.1


class NoGroundPointsError(ValueError):
    """Raised when a cloud has no points left after the overhead filter."""


class DegenerateNeighborhoodError(ValueError):
    """Raised when a PCA neighborhood has <3 points or is collinear."""


# ---------------------------------------------------------------------------
# Point cloud
# ---------------------------------------------------------------------------


@dataclass
class SemanticPointCloud:
    """Points as parallel arrays: xyz (N,3) float, class_id (N,) int, rgb (N,3) uint8."""

    xyz: np.ndarray
    class_id: np.ndarray
    rgb: np.ndarray

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64)
        self.class_id = np.asarray(self.class_id, dtype=np.int32)
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (N, 3), got {self.xyz.shape}")
        n = len(self.xyz)
        if self.class_id.shape != (n,) or self.rgb.shape != (n, 3):
            raise ValueError("class_id/rgb length does not match xyz")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")
        if n and self.class_id.min() < 0:
            raise ValueError("class_id must be non-negative")

    def __len__(self):
        return len(self.xyz)


def save_cloud_ascii(cloud: SemanticPointCloud, path) -> None:
    """One point per line "x y z class_id r g b", preceded by the point count."""
    with open(path, "w") as fh:
        fh.write(f"{len(cloud)}\n")
        for (x, y, z), c, (r, g, b) in zip(cloud.xyz, cloud.class_id, cloud.rgb):
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {c} {r} {g} {b}\n")


def load_cloud_ascii(path) -> SemanticPointCloud:
    with open(path) as fh:
        count = int(fh.readline())
        rows = [fh.readline().split() for _ in range(count)]
    xyz = np.array([[float(r[0]), float(r[1]), float(r[2])] for r in rows])
    cls = np.array([int(r[3]) for r in rows], dtype=np.int32)
    rgb = np.array([[int(r[4]), int(r[5]), int(r[6])] for r in rows], dtype=np.uint8)
    if count == 0:
        xyz = np.zeros((0, 3))
        cls = np.zeros(0, dtype=np.int32)
        rgb = np.zeros((0, 3), dtype=np.uint8)
    return SemanticPointCloud(xyz, cls, rgb)


# ---------------------------------------------------------------------------
# Octree spatial index
# ---------------------------------------------------------------------------


class _OctreeNode:
    __slots__ = ("lo", "hi", "indices", "children")

    def __init__(self, lo, hi, indices):
        self.lo = lo
        self.hi = hi
        self.indices = indices   # only set on leaves
        self.children = None


class SpatialIndex:
    """Octree over a point set supporting axis-aligned box range queries.

    Leaves hold up to `leaf_capacity` point indices. Query boxes are
    inclusive on both ends, matching a linear scan with <= comparisons.
    """

    def __init__(self, points: np.ndarray, leaf_capacity: int = 32, max_depth: int = 24):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {points.shape}")
        if len(points) == 0:
            raise ValueError("cannot index an empty point set")
        if leaf_capacity < 1:
            raise ValueError("leaf_capacity must be >= 1")
        self.points = points
        self.leaf_capacity = leaf_capacity
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        self.root = self._build(lo, hi, np.arange(len(points)), max_depth)

    def _build(self, lo, hi, indices, depth):
        node = _OctreeNode(lo, hi, None)
        if len(indices) <= self.leaf_capacity or depth == 0:
            node.indices = indices
            return node
        mid = 0.5 * (lo + hi)
        pts = self.points[indices]
        octant = (
            (pts[:, 0] >= mid[0]).astype(np.int8)
            | ((pts[:, 1] >= mid[1]) << 1)
            | ((pts[:, 2] >= mid[2]) << 2)
        )
        children = []
        for code in range(8):
            sub = indices[octant == code]
            if len(sub) == 0:
                continue
            bits = (code & 1, (code >> 1) & 1, (code >> 2) & 1)
            clo = np.where(bits, mid, lo)
            chi = np.where(bits, hi, mid)
            if len(sub) == len(indices):
                # all points in one octant (duplicates): stop splitting
                node.indices = indices
                return node
            children.append(self._build(clo, chi, sub, depth - 1))
        node.children = children
        return node

    def query_box(self, lo, hi) -> np.ndarray:
        """Indices of points p with lo <= p <= hi componentwise."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if np.any(node.hi < lo) or np.any(node.lo > hi):
                continue
            if node.children is None:
                pts = self.points[node.indices]
                mask = np.all((pts >= lo) & (pts <= hi), axis=1)
                if mask.any():
                    out.append(node.indices[mask])
            else:
                stack.extend(node.children)
        if not out:
            return np.zeros(0, dtype=np.intp)
        return np.sort(np.concatenate(out))


# ---------------------------------------------------------------------------
# Per-neighborhood geometric features
# ---------------------------------------------------------------------------


def _pca_normal(points: np.ndarray):
    """Smallest-variance direction of a point set, or None if degenerate.

    Degenerate means fewer than 3 points or a (near-)collinear set, where
    the normal direction is not identifiable.
    """
    if len(points) < 3:
        return None
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    # ascending eigenvalues; collinear iff the two smallest both vanish
    if evals[2] <= 1e-18 or evals[1] <= 1e-9 * evals[2]:
        return None
    n = evecs[:, 0]
    return _orient_up(n)

def _orient_up(n: np.ndarray) -> np.ndarray:
    if abs(n[2]) > 1e-12:
        return n if n[2] > 0 else -n
    # horizontal normal: pin the sign via the first non-zero component
    for c in n:
        if abs(c) > 1e-12:
            return n if c > 0 else -n
    return n


def surface_normal(index: SpatialIndex, center, window: float = NORMAL_WINDOW) -> np.ndarray:
    """PCA surface normal over the square window around (x, y), unit, n_z >= 0.

    The window is axis aligned in the cloud's frame and spans the full
    height range. Raises DegenerateNeighborhoodError when the neighborhood
    cannot define a plane.
    """
    cx, cy = float(center[0]), float(center[1])
    half = window / 2.0
    idx = index.query_box((cx - half, cy - half, -np.inf), (cx + half, cy + half, np.inf))
    n = _pca_normal(index.points[idx])
    if n is None:
        raise DegenerateNeighborhoodError(
            f"degenerate neighborhood at ({cx:.3f}, {cy:.3f}): "
            f"{len(idx)} points cannot define a surface normal"
        )
    return n


def slope(n: np.ndarray) -> float:
    """Angle in degrees between the unit normal and the vehicle z axis, in [0, 90]."""
    n = np.asarray(n, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError(f"slope() requires a unit normal, |n| = {np.linalg.norm(n)!r}")
    if n[2] < -1e-12:
        raise ValueError("slope() requires an upward-oriented normal (n_z >= 0)")
    s = np.degrees(np.arccos(np.clip(n[2], -1.0, 1.0)))
    return float(np.clip(s, 0.0, 90.0))


def flatness(points: np.ndarray, n: np.ndarray) -> float:
    """RMS deviation of the points along n, with the N+1 denominator.

    f = sqrt( sum_j [n . (p_j - centroid)]^2 / (N + 1) )
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError("flatness() requires a non-empty (N, 3) point array")
    proj = (points - points.mean(axis=0)) @ np.asarray(n, dtype=np.float64)
    return float(np.sqrt(np.sum(proj**2) / (len(points) + 1)))


def height_difference(points: np.ndarray, n: np.ndarray) -> float:
    """Peak-to-peak deviation of the points along n (always >= 0)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError("height_difference() requires a non-empty (N, 3) point array")
    proj = (points - points.mean(axis=0)) @ np.asarray(n, dtype=np.float64)
    return float(proj.max() - proj.min())


# ---------------------------------------------------------------------------
# Grid map
# ---------------------------------------------------------------------------

FEATURE_CHANNELS = ("mean_height", "slope_deg", "flatness", "height_diff")


@dataclass
class GridMap:
    """2D raster of terrain state; [row, col] indexes (y, x).

    Unoccupied cells carry class_id -1 and NaN in every feature channel.
    `normal_fallback` flags occupied cells whose PCA neighborhood was
    degenerate and inherited the vertical normal (slope 0).
    """

    origin: tuple          # (x0, y0) of the lower-left map corner, meters
    resolution: float
    occupancy: np.ndarray      # (H, W) bool
    class_id: np.ndarray       # (H, W) int16, -1 where empty
    mean_height: np.ndarray    # (H, W) float64, NaN where empty
    slope_deg: np.ndarray
    flatness: np.ndarray
    height_diff: np.ndarray
    normal_fallback: np.ndarray = field(default=None)  # (H, W) bool

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.normal_fallback is None:
            self.normal_fallback = np.zeros_like(self.occupancy)

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    def cell_of(self, x: float, y: float):
        """(row, col) of the cell containing the point, or None if outside."""
        col = int(np.floor((x - self.origin[0]) / self.resolution))
        row = int(np.floor((y - self.origin[1]) / self.resolution))
        if 0 <= row < self.height and 0 <= col < self.width:
            return row, col
        return None

    def contains_point(self, x: float, y: float) -> bool:
        return (
            self.origin[0] <= x < self.origin[0] + self.width * self.resolution
            and self.origin[1] <= y < self.origin[1] + self.height * self.resolution
        )


def _box_sum(raster: np.ndarray, radius: int) -> np.ndarray:
    """Sum of raster over the (2r+1)^2 block around each cell, edges clipped."""
    h, w = raster.shape
    sat = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(raster, axis=0), axis=1, out=sat[1:, 1:])
    r = radius
    rows = np.arange(h)
    cols = np.arange(w)
    r0 = np.clip(rows - r, 0, h)
    r1 = np.clip(rows + r + 1, 0, h)
    c0 = np.clip(cols - r, 0, w)
    c1 = np.clip(cols + r + 1, 0, w)
    return (
        sat[np.ix_(r1, c1)] - sat[np.ix_(r0, c1)] - sat[np.ix_(r1, c0)] + sat[np.ix_(r0, c0)]
    )


def build_grid_map(
    cloud: SemanticPointCloud,
    vehicle_height: float,
    resolution: float = DEFAULT_RESOLUTION,
    normal_window: float = NORMAL_WINDOW,
    origin=None,
    shape=None,
) -> GridMap:
    """Rasterize a cloud into a GridMap and fill per-cell geometric features.

    Points more than OVERHEAD_CUTOFF above `vehicle_height` are discarded
    (overhanging canopy has no contact with the wheels). When `origin` and
    `shape` (rows, cols) are given the extent is fixed and out-of-bounds
    points are dropped; otherwise the extent is the filtered cloud's bbox.

    Per cell: dominant class is the modal class_id (ties -> lowest id),
    the normal comes from PCA over the `normal_window` square around the
    cell center, and flatness/height difference use the cell's own points
    projected on that normal. Cells with a degenerate PCA neighborhood
    fall back to the vertical normal and are flagged.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if len(cloud) == 0:
        raise NoGroundPointsError("no ground points: cloud is empty")

    keep = cloud.xyz[:, 2] <= vehicle_height + OVERHEAD_CUTOFF
    xyz = cloud.xyz[keep]
    cls = cloud.class_id[keep]
    if len(xyz) == 0:
        raise NoGroundPointsError(
            f"no ground points: all {len(cloud)} points lie above the "
            f"{OVERHEAD_CUTOFF} m overhead cutoff"
        )

    if origin is None:
        origin = (xyz[:, 0].min(), xyz[:, 1].min())
    origin = (float(origin[0]), float(origin[1]))
    col = np.floor((xyz[:, 0] - origin[0]) / resolution).astype(np.int64)
    row = np.floor((xyz[:, 1] - origin[1]) / resolution).astype(np.int64)
    if shape is None:
        if col.min() < 0 or row.min() < 0:
            raise ValueError("points lie below the requested origin")
        h = int(row.max()) + 1
        w = int(col.max()) + 1
    else:
        h, w = int(shape[0]), int(shape[1])
        inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        xyz, cls, col, row = xyz[inside], cls[inside], col[inside], row[inside]
        if len(xyz) == 0:
            raise NoGroundPointsError("no ground points inside the requested extent")

    flat = row * w + col
    order = np.argsort(flat, kind="stable")
    flat_s = flat[order]
    xyz_s = xyz[order]
    starts = np.flatnonzero(np.diff(flat_s)) + 1
    starts = np.concatenate(([0], starts))
    cell_ids = flat_s[starts]                       # unique occupied flat ids
    counts = np.diff(np.concatenate((starts, [len(flat_s)])))

    occupancy = np.zeros((h, w), dtype=bool)
    occupancy.flat[cell_ids] = True

    # dominant class: modal count, lowest id wins ties (argmax picks first max)
    n_classes = int(cls.max()) + 1 if len(cls) else 1
    class_counts = np.zeros((n_classes, h * w), dtype=np.int32)
    np.add.at(class_counts, (cls, flat), 1)
    class_id = np.full((h, w), -1, dtype=np.int16)
    class_id.flat[cell_ids] = np.argmax(class_counts[:, cell_ids], axis=0)

    # first and second moment rasters for windowed PCA
    cnt = np.zeros((h, w))
    cnt.flat[cell_ids] = counts
    moments = {}
    for name, vals in (
        ("x", xyz[:, 0]), ("y", xyz[:, 1]), ("z", xyz[:, 2]),
        ("xx", xyz[:, 0] * xyz[:, 0]), ("yy", xyz[:, 1] * xyz[:, 1]),
        ("zz", xyz[:, 2] * xyz[:, 2]), ("xy", xyz[:, 0] * xyz[:, 1]),
        ("xz", xyz[:, 0] * xyz[:, 2]), ("yz", xyz[:, 1] * xyz[:, 2]),
    ):
        moments[name] = np.bincount(flat, weights=vals, minlength=h * w).reshape(h, w)

    # window radius in cells; 0.5 m at 0.1 m cells -> the 5x5 block exactly
    radius = max(1, int(round(normal_window / (2.0 * resolution) - 0.5)))
    wn = _box_sum(cnt, radius)
    wsum = {k: _box_sum(m, radius) for k, m in moments.items()}

    rows_occ, cols_occ = np.divmod(cell_ids, w)
    nw = wn[rows_occ, cols_occ]
    mu = np.stack([wsum[k][rows_occ, cols_occ] for k in ("x", "y", "z")], axis=1)
    mu /= np.maximum(nw, 1.0)[:, None]
    cov = np.empty((len(cell_ids), 3, 3))
    pairs = (("xx", 0, 0), ("xy", 0, 1), ("xz", 0, 2),
             ("yy", 1, 1), ("yz", 1, 2), ("zz", 2, 2))
    for key, i, j in pairs:
        cij = wsum[key][rows_occ, cols_occ] / np.maximum(nw, 1.0) - mu[:, i] * mu[:, j]
        cov[:, i, j] = cij
        cov[:, j, i] = cij

    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    degenerate = (nw < 3) | (evals[:, 2] <= 1e-18) | (evals[:, 1] <= 1e-9 * evals[:, 2])
    normals[degenerate] = (0.0, 0.0, 1.0)
    flip = normals[:, 2] < 0
    normals[flip] = -normals[flip]
    # horizontal normals: pin sign on the first non-zero component
    horiz = np.abs(normals[:, 2]) <= 1e-12
    if horiz.any():
        lead = np.where(np.abs(normals[horiz, 0]) > 1e-12, normals[horiz, 0], normals[horiz, 1])
        normals[horiz] *= np.where(lead < 0, -1.0, 1.0)[:, None]

    slope_vals = np.degrees(np.arccos(np.clip(normals[:, 2], -1.0, 1.0)))
    slope_vals = np.clip(slope_vals, 0.0, 90.0)

    # flatness / height difference over each cell's own points
    cell_pos = np.searchsorted(cell_ids, flat_s)     # occupied-cell index per point
    centroid = np.zeros((len(cell_ids), 3))
    np.add.at(centroid, cell_pos, xyz_s)
    centroid /= counts[:, None]
    proj = np.einsum("ij,ij->i", xyz_s - centroid[cell_pos], normals[cell_pos])
    sq = np.zeros(len(cell_ids))
    np.add.at(sq, cell_pos, proj**2)
    flat_vals = np.sqrt(sq / (counts + 1))
    hmax = np.maximum.reduceat(proj, starts)
    hmin = np.minimum.reduceat(proj, starts)

    def raster(vals, fill=np.nan):
        r = np.full((h, w), fill)
        r.flat[cell_ids] = vals
        return r

    mean_height = raster(moments["z"].flat[cell_ids] / counts)
    fallback = np.zeros((h, w), dtype=bool)
    fallback.flat[cell_ids] = degenerate

    return GridMap(
        origin=origin,
        resolution=resolution,
        occupancy=occupancy,
        class_id=class_id,
        mean_height=mean_height,
        slope_deg=raster(slope_vals),
        flatness=raster(flat_vals),
        height_diff=raster(hmax - hmin),
        normal_fallback=fallback,
    )


# ---------------------------------------------------------------------------
# Raster serialization: meta.json + one flat .npy per channel
# ---------------------------------------------------------------------------


def save_grid_map(grid: GridMap, out_dir) -> None:
    import json
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    channels = {
        "occupancy": grid.occupancy.astype(np.uint8),
        "class_id": grid.class_id,
        "mean_height": grid.mean_height,
        "slope_deg": grid.slope_deg,
        "flatness": grid.flatness,
        "height_diff": grid.height_diff,
        "normal_fallback": grid.normal_fallback.astype(np.uint8),
    }
    meta = {
        "format_version": 1,
        "origin": [grid.origin[0], grid.origin[1]],
        "resolution": grid.resolution,
        "height": grid.height,
        "width": grid.width,
        "channels": sorted(channels),
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    for name, arr in channels.items():
        np.save(out / f"{name}.npy", arr.ravel())


def load_grid_map(in_dir) -> GridMap:
    import json
    from pathlib import Path

    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    h, w = meta["height"], meta["width"]

    def ch(name, dtype=None):
        arr = np.load(src / f"{name}.npy").reshape(h, w)
        return arr.astype(dtype) if dtype is not None else arr

    return GridMap(
        origin=tuple(meta["origin"]),
        resolution=meta["resolution"],
        occupancy=ch("occupancy", bool),
        class_id=ch("class_id", np.int16),
        mean_height=ch("mean_height"),
        slope_deg=ch("slope_deg"),
        flatness=ch("flatness"),
        height_diff=ch("height_diff"),
        normal_fallback=ch("normal_fallback", bool),
    )
