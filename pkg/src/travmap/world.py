"""Procedural terrain worlds and vehicle traverse simulation.

A World is a trio of aligned rasters (heightfield, semantic class,
roughness) generated from a TerrainSpec. Local semantic point clouds are
rendered off the heightfield, and traverses along waypoint routes produce
odometry plus a vertical-acceleration trace whose spread follows the
terrain roughness under the vehicle: a_z ~ N(g, sigma_cell^2) with

    sigma_cell = sigma0 * (1 + rho_eff * (1 + k_v*v + k_w*|omega|))

where rho_eff is an exponential moving average of the roughness under the
wheels. The yaw-rate and memory terms extend the base speed scaling so
labels depend on turning and on recently crossed terrain, not only on the
cell currently underfoot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage, signal

from .dataset import OdomTrace
from .geometry import SemanticPointCloud
from .risk import GRAVITY, ImuTrace, SteadyDistribution, fit_steady_distribution

CLASS_NAMES = {0: "ground", 1: "trail", 2: "grass", 3: "bush", 4: "rock", 5: "trunk"}
TRAVERSABLE_CLASSES = frozenset({0, 1, 2})

# Fixed per-class colors for rendered clouds.
CLASS_COLORS = {
    0: (128, 104, 76),
    1: (188, 166, 124),
    2: (72, 148, 64),
    3: (28, 96, 40),
    4: (132, 132, 132),
    5: (96, 64, 32),
}

# Vertical render jitter: uniform in +/- JITTER_PER_RHO * rho meters.
JITTER_PER_RHO = 0.004

# Calibration strip used by the stock scenarios to anchor the steady
# distribution on a rough reference surface.
CAL_RHO = 6.0
CAL_SPEED = 2.0

WORLD_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Region:
    """One semantic paint operation; later regions overwrite earlier ones."""

    class_id: int
    shape: str                  # "rect" or "disc"
    bounds: tuple = None        # rect: (x0, y0, x1, y1)
    center: tuple = None        # disc: (cx, cy)
    radius: float = None        # disc
    roughness: float = 0.0
    traversable: bool = True

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if not (math.isfinite(self.roughness) and self.roughness >= 0):
            raise ValueError(f"roughness must be finite and >= 0, got {self.roughness}")
        if self.shape == "rect":
            if self.bounds is None or len(self.bounds) != 4:
                raise ValueError("rect region needs bounds (x0, y0, x1, y1)")
            x0, y0, x1, y1 = self.bounds
            if not (x1 > x0 and y1 > y0):
                raise ValueError(f"degenerate rect bounds {self.bounds}")
        elif self.shape == "disc":
            if self.center is None or len(self.center) != 2 or self.radius is None:
                raise ValueError("disc region needs center (cx, cy) and radius")
            if self.radius <= 0:
                raise ValueError("disc radius must be positive")
        else:
            raise ValueError(f"unknown region shape {self.shape!r}")


@dataclass(frozen=True)
class TerrainSpec:
    """Recipe for a procedural world; fully determines the rasters."""

    extent: tuple               # (x extent, y extent), meters
    regions: tuple              # painted in order, later entries win
    resolution: float = 0.1
    seed: int = 0
    amplitude: float = 0.0      # heightfield noise amplitude, meters
    octaves: int = 3
    wavelength: float = 12.0    # base noise wavelength, meters
    slope: tuple = (0.0, 0.0)   # linear ramp gradient (dz/dx, dz/dy)

    def __post_init__(self):
        ex, ey = self.extent
        if not (ex > 0 and ey > 0):
            raise ValueError(f"extent must be positive, got {self.extent}")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if self.wavelength <= self.resolution:
            raise ValueError("wavelength must exceed the resolution")
        if not self.regions:
            raise ValueError("spec needs at least one region")


@dataclass
class World:
    """Sampled terrain: aligned height, class and roughness rasters."""

    resolution: float
    height_map: np.ndarray      # (H, W) float64, z at cell centers
    class_map: np.ndarray       # (H, W) int16
    roughness_map: np.ndarray   # (H, W) float64
    class_traversable: dict     # class_id -> bool
    seed: int = 0

    def __post_init__(self):
        if not (self.height_map.shape == self.class_map.shape == self.roughness_map.shape):
            raise ValueError("world rasters must share one shape")

    @property
    def shape(self):
        return self.height_map.shape

    @property
    def extent(self):
        h, w = self.shape
        return (w * self.resolution, h * self.resolution)

    @property
    def traversable_map(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for cid, ok in self.class_traversable.items():
            if ok:
                out |= self.class_map == cid
        return out

    def contains(self, x, y, margin: float = 0.0) -> bool:
        ex, ey = self.extent
        return bool(
            np.all(np.asarray(x) >= margin)
            and np.all(np.asarray(x) <= ex - margin)
            and np.all(np.asarray(y) >= margin)
            and np.all(np.asarray(y) <= ey - margin)
        )

    def cell_index(self, x, y):
        """(row, col) arrays of the cells containing the points, clipped."""
        h, w = self.shape
        col = np.clip((np.asarray(x) / self.resolution).astype(int), 0, w - 1)
        row = np.clip((np.asarray(y) / self.resolution).astype(int), 0, h - 1)
        return row, col

    def height_at(self, x, y):
        """Bilinear height between cell centers, edge-clamped."""
        h, w = self.shape
        gx = np.asarray(x, dtype=np.float64) / self.resolution - 0.5
        gy = np.asarray(y, dtype=np.float64) / self.resolution - 0.5
        x0 = np.clip(np.floor(gx).astype(int), 0, w - 2)
        y0 = np.clip(np.floor(gy).astype(int), 0, h - 2)
        tx = np.clip(gx - x0, 0.0, 1.0)
        ty = np.clip(gy - y0, 0.0, 1.0)
        z = self.height_map
        return (
            z[y0, x0] * (1 - ty) * (1 - tx)
            + z[y0, x0 + 1] * (1 - ty) * tx
            + z[y0 + 1, x0] * ty * (1 - tx)
            + z[y0 + 1, x0 + 1] * ty * tx
        )

    def class_at(self, x, y):
        row, col = self.cell_index(x, y)
        return self.class_map[row, col]

    def roughness_at(self, x, y):
        row, col = self.cell_index(x, y)
        return self.roughness_map[row, col]

    def traversable_at(self, x, y):
        row, col = self.cell_index(x, y)
        return self.traversable_map[row, col]


def _value_noise(shape, wavelength_cells: float, rng) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [-1, 1]."""
    h, w = shape
    gh = int(np.ceil(h / wavelength_cells)) + 2
    gw = int(np.ceil(w / wavelength_cells)) + 2
    lattice = rng.uniform(-1.0, 1.0, size=(gh, gw))
    ys = np.arange(h) / wavelength_cells
    xs = np.arange(w) / wavelength_cells
    yi = np.floor(ys).astype(int)
    xi = np.floor(xs).astype(int)
    ty = ys - yi
    tx = xs - xi
    ty = ty * ty * (3.0 - 2.0 * ty)
    tx = tx * tx * (3.0 - 2.0 * tx)
    v00 = lattice[np.ix_(yi, xi)]
    v01 = lattice[np.ix_(yi, xi + 1)]
    v10 = lattice[np.ix_(yi + 1, xi)]
    v11 = lattice[np.ix_(yi + 1, xi + 1)]
    ty = ty[:, None]
    tx = tx[None, :]
    return v00 * (1 - ty) * (1 - tx) + v01 * (1 - ty) * tx + v10 * ty * (1 - tx) + v11 * ty * tx


def generate_world(spec: TerrainSpec) -> World:
    """Sample the spec onto rasters; deterministic under the spec seed."""
    res = spec.resolution
    w = int(round(spec.extent[0] / res))
    h = int(round(spec.extent[1] / res))
    xc = (np.arange(w) + 0.5) * res
    yc = (np.arange(h) + 0.5) * res

    height = spec.slope[0] * xc[None, :] + spec.slope[1] * yc[:, None]
    height = np.broadcast_to(height, (h, w)).astype(np.float64).copy()
    if spec.amplitude > 0:
        rng = np.random.default_rng((spec.seed, 7001))
        for o in range(spec.octaves):
            wl = max(spec.wavelength / 2**o / res, 2.0)
            height += spec.amplitude * 0.5**o * _value_noise((h, w), wl, rng)

    class_map = np.full((h, w), -1, dtype=np.int16)
    rough_map = np.zeros((h, w), dtype=np.float64)
    class_traversable = {}
    for reg in spec.regions:
        if reg.shape == "rect":
            x0, y0, x1, y1 = reg.bounds
            mask = (
                (xc[None, :] >= x0) & (xc[None, :] < x1)
                & (yc[:, None] >= y0) & (yc[:, None] < y1)
            )
        else:
            cx, cy = reg.center
            mask = (xc[None, :] - cx) ** 2 + (yc[:, None] - cy) ** 2 <= reg.radius**2
        class_map[mask] = reg.class_id
        rough_map[mask] = reg.roughness
        prev = class_traversable.get(reg.class_id)
        if prev is not None and prev != reg.traversable:
            raise ValueError(
                f"class {reg.class_id} declared both traversable and not"
            )
        class_traversable[reg.class_id] = reg.traversable

    if np.any(class_map < 0):
        raise ValueError("regions do not cover the extent")
    return World(
        resolution=res,
        height_map=height,
        class_map=class_map,
        roughness_map=rough_map,
        class_traversable=class_traversable,
        seed=spec.seed,
    )


# ---------------------------------------------------------------------------
# Point-cloud rendering
# ---------------------------------------------------------------------------


def _render_cells(world: World, rows, cols, points_per_cell: int, rng):
    """Points on the heightfield surface for the given cells.

    Each cell gets one point per quadrant (guaranteeing spatial coverage)
    plus uniform extras, with vertical jitter scaled by the cell roughness.
    """
    res = world.resolution
    n = rows.size
    k = points_per_cell
    # Quadrant offsets for the first four points, uniform for the rest.
    ox = rng.uniform(0.0, 0.5, size=(n, k))
    oy = rng.uniform(0.0, 0.5, size=(n, k))
    ox[:, 1] += 0.5
    oy[:, 2] += 0.5
    ox[:, 3] += 0.5
    oy[:, 3] += 0.5
    if k > 4:
        ox[:, 4:] = rng.uniform(0.0, 1.0, size=(n, k - 4))
        oy[:, 4:] = rng.uniform(0.0, 1.0, size=(n, k - 4))
    px = (cols[:, None] + ox) * res
    py = (rows[:, None] + oy) * res
    pz = world.height_at(px.ravel(), py.ravel())
    jitter = JITTER_PER_RHO * world.roughness_map[rows, cols]
    pz += (jitter[:, None] * rng.uniform(-1.0, 1.0, size=(n, k))).ravel()

    cls = np.repeat(world.class_map[rows, cols].astype(np.int32), k)
    rgb = np.zeros((cls.size, 3), dtype=np.uint8)
    for cid, color in CLASS_COLORS.items():
        rgb[cls == cid] = color
    xyz = np.column_stack([px.ravel(), py.ravel(), pz])
    return xyz, cls, rgb


def render_local_cloud(
    world: World,
    pose,
    extent: float = 10.0,
    points_per_cell: int = 5,
    frame: str = "vehicle",
    rng=None,
) -> SemanticPointCloud:
    """Render the terrain inside a yaw-aligned square window around a pose.

    pose is (x, y, yaw). Every world cell whose center falls inside the
    window contributes at least four points. In the "vehicle" frame the
    output is translated/rotated so the vehicle sits at the origin with
    z relative to the ground height under it.
    """
    x, y, yaw = pose
    if points_per_cell < 4:
        raise ValueError("points_per_cell must be >= 4 for cell coverage")
    if not world.contains(x, y):
        raise ValueError(f"pose ({x}, {y}) outside world extent {world.extent}")
    if frame not in ("vehicle", "world"):
        raise ValueError(f"unknown frame {frame!r}")
    if rng is None:
        rng = np.random.default_rng(
            (world.seed, 7103, int(round(x * 1000)), int(round(y * 1000)))
        )

    res = world.resolution
    h, w = world.shape
    half = extent / 2.0
    reach = half * math.sqrt(2.0)
    r0 = max(int((y - reach) / res) - 1, 0)
    r1 = min(int((y + reach) / res) + 2, h)
    c0 = max(int((x - reach) / res) - 1, 0)
    c1 = min(int((x + reach) / res) + 2, w)
    rows, cols = np.mgrid[r0:r1, c0:c1]
    rows = rows.ravel()
    cols = cols.ravel()
    cxs = (cols + 0.5) * res - x
    cys = (rows + 0.5) * res - y
    cos_y = math.cos(yaw)
    sin_y = math.sin(yaw)
    ux = cos_y * cxs + sin_y * cys
    uy = -sin_y * cxs + cos_y * cys
    keep = (np.abs(ux) <= half) & (np.abs(uy) <= half)
    rows = rows[keep]
    cols = cols[keep]
    if rows.size == 0:
        raise ValueError("window covers no world cells")

    xyz, cls, rgb = _render_cells(world, rows, cols, points_per_cell, rng)
    if frame == "vehicle":
        dx = xyz[:, 0] - x
        dy = xyz[:, 1] - y
        xyz = np.column_stack([
            cos_y * dx + sin_y * dy,
            -sin_y * dx + cos_y * dy,
            xyz[:, 2] - world.height_at(x, y),
        ])
    return SemanticPointCloud(xyz=xyz, class_id=cls, rgb=rgb)


def render_global_cloud(world: World, points_per_cell: int = 5, seed=None) -> SemanticPointCloud:
    """World-frame cloud covering every cell; basis for the global map."""
    if points_per_cell < 4:
        raise ValueError("points_per_cell must be >= 4 for cell coverage")
    rng = np.random.default_rng((world.seed if seed is None else seed, 7205))
    h, w = world.shape
    rows, cols = np.mgrid[0:h, 0:w]
    xyz, cls, rgb = _render_cells(world, rows.ravel(), cols.ravel(), points_per_cell, rng)
    return SemanticPointCloud(xyz=xyz, class_id=cls, rgb=rgb)


# ---------------------------------------------------------------------------
# Traverse simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Vibration and sampling parameters of the traverse generator."""

    sigma0: float = 0.05        # base a_z std on perfectly smooth ground
    k_v: float = 0.5            # speed scaling of the roughness response
    k_w: float = 1.5            # yaw-rate scaling of the roughness response
    tau: float = 0.25           # roughness memory time constant, seconds
    gravity: float = GRAVITY
    odom_period: float = 0.1
    imu_rate: float = 100.0
    accel_xy_noise: float = 0.02
    gyro_noise: float = 1e-3
    yaw_smooth: float = 0.25    # heading smoothing window, seconds


@dataclass
class TraverseResult:
    odom: OdomTrace
    imu: ImuTrace
    collided: bool = False
    collision_time: float = None


def simulate_traverse(
    world: World,
    waypoints,
    speed,
    config: SimConfig = SimConfig(),
    seed: int = 0,
) -> TraverseResult:
    """Drive a waypoint polyline and synthesize odometry and IMU traces.

    Odometry comes out at `odom_period`; the IMU at `imu_rate` with
    a_z ~ N(g, sigma_cell^2). Entering an untraversable cell truncates the
    traces just before entry and flags a collision.
    """
    wp = np.asarray(waypoints, dtype=np.float64)
    if wp.ndim != 2 or wp.shape[0] < 2 or wp.shape[1] != 2:
        raise ValueError("waypoints must be an (N, 2) array with N >= 2")
    if not world.contains(wp[:, 0], wp[:, 1]):
        raise ValueError("path exits the world extent")

    seg = np.diff(wp, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(seg_len <= 0):
        raise ValueError("zero-length path segment")
    speeds = np.broadcast_to(np.asarray(speed, dtype=np.float64), seg_len.shape)
    if np.any(speeds <= 0):
        raise ValueError("segment speeds must be positive")
    cum_len = np.concatenate([[0.0], np.cumsum(seg_len)])
    cum_t = np.concatenate([[0.0], np.cumsum(seg_len / speeds)])

    dt = 1.0 / config.imu_rate
    n = int(math.floor(cum_t[-1] / dt)) + 1
    if n < 2:
        raise ValueError("path too short for even one IMU interval")
    t = np.arange(n) * dt
    dist = np.interp(t, cum_t, cum_len)
    x = np.interp(dist, cum_len, wp[:, 0])
    y = np.interp(dist, cum_len, wp[:, 1])

    v_x = np.gradient(x, dt)
    v_y = np.gradient(y, dt)
    yaw = np.unwrap(np.arctan2(v_y, v_x))
    k = max(int(round(config.yaw_smooth / dt)) | 1, 1)
    if k > 1 and n > k:
        pad = np.concatenate([yaw[k // 2:0:-1], yaw, yaw[-2:-2 - k // 2:-1]])
        yaw = np.convolve(pad, np.ones(k) / k, mode="valid")
    omega = np.gradient(yaw, dt)
    z = world.height_at(x, y)
    v_z = np.gradient(z, dt)
    speed_t = np.hypot(v_x, v_y)

    rho = world.roughness_map[world.cell_index(x, y)]
    # EMA roughness memory: rho_eff trails the terrain with time constant tau.
    a = math.exp(-dt / config.tau)
    rho_eff = signal.lfilter([1.0 - a], [1.0, -a], rho, zi=[a * rho[0]])[0]
    sigma = config.sigma0 * (1.0 + rho_eff * (1.0 + config.k_v * speed_t + config.k_w * np.abs(omega)))

    rng = np.random.default_rng(seed)
    accel = np.empty((n, 3))
    accel[:, 0] = rng.normal(0.0, config.accel_xy_noise, size=n)
    accel[:, 1] = rng.normal(0.0, config.accel_xy_noise, size=n)
    accel[:, 2] = config.gravity + sigma * rng.normal(0.0, 1.0, size=n)
    gyro = rng.normal(0.0, config.gyro_noise, size=(n, 3))
    gyro[:, 2] += omega

    collided = False
    collision_time = None
    trav = world.traversable_map[world.cell_index(x, y)]
    bad = np.flatnonzero(~trav)
    if bad.size:
        cut = int(bad[0])
        if cut < 2:
            raise ValueError("path starts on untraversable terrain")
        collided = True
        collision_time = float(t[cut])
        t, x, y, z, yaw = t[:cut], x[:cut], y[:cut], z[:cut], yaw[:cut]
        v_x, v_y, v_z, omega = v_x[:cut], v_y[:cut], v_z[:cut], omega[:cut]
        accel, gyro = accel[:cut], gyro[:cut]

    imu = ImuTrace(t=t.copy(), accel=accel, gyro=gyro)
    step = max(int(round(config.odom_period * config.imu_rate)), 1)
    idx = np.arange(0, t.size, step)
    odom = OdomTrace(
        t=t[idx].copy(),
        xyz=np.column_stack([x[idx], y[idx], z[idx]]),
        yaw=yaw[idx].copy(),
        vel=np.column_stack([v_x[idx], v_y[idx], v_z[idx]]),
        omega_z=omega[idx].copy(),
    )
    return TraverseResult(odom=odom, imu=imu, collided=collided, collision_time=collision_time)


# ---------------------------------------------------------------------------
# Routes and stock scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Route:
    waypoints: np.ndarray       # (N, 2)
    speed: float


def safe_raster(world: World, clearance: float) -> np.ndarray:
    """Traversable cells whose disc neighborhood is fully traversable."""
    r = int(math.ceil(clearance / world.resolution))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disc = (xx**2 + yy**2) <= r**2
    return ndimage.binary_erosion(world.traversable_map, structure=disc, border_value=0)


def generate_routes(
    world: World,
    count: int,
    seed: int = 0,
    speed_range=(1.0, 2.0),
    length: float = 36.0,
    margin: float = 2.5,
    clearance: float = 0.4,
    avoid_rect=None,
    straight_fraction: float = 0.3,
    max_attempts: int = None,
) -> list:
    """Sample collision-free weaving routes by rejection.

    Routes are sinusoidal corridors (occasionally straight) of the given
    length; every 0.1 m sample must sit on traversable terrain with the
    requested clearance, inside the margin, and outside avoid_rect.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    safe = safe_raster(world, clearance)
    if avoid_rect is not None:
        x0, y0, x1, y1 = avoid_rect
        res = world.resolution
        safe[int(y0 / res):int(math.ceil(y1 / res)), int(x0 / res):int(math.ceil(x1 / res))] = False
    ex, ey = world.extent
    rng = np.random.default_rng(seed)
    if max_attempts is None:
        max_attempts = 600 * count

    routes = []
    s_way = np.arange(0.0, length + 1e-9, 1.0)
    s_chk = np.arange(0.0, length + 1e-9, 0.1)
    for _ in range(max_attempts):
        if len(routes) >= count:
            break
        sx = rng.uniform(margin, ex - margin)
        sy = rng.uniform(margin, ey - margin)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        if rng.uniform() < straight_fraction:
            amp = 0.0
            wl, phase = 10.0, 0.0
        else:
            amp = rng.uniform(0.8, 2.2)
            wl = rng.uniform(8.0, 16.0)
            phase = rng.uniform(0.0, 2.0 * math.pi)
        ux, uy = math.cos(theta), math.sin(theta)

        def pos(s):
            lat = amp * np.sin(2.0 * math.pi * s / wl + phase)
            return np.column_stack([sx + s * ux - lat * uy, sy + s * uy + lat * ux])

        chk = pos(s_chk)
        if not (
            np.all(chk[:, 0] >= margin) and np.all(chk[:, 0] <= ex - margin)
            and np.all(chk[:, 1] >= margin) and np.all(chk[:, 1] <= ey - margin)
        ):
            continue
        if not np.all(safe[world.cell_index(chk[:, 0], chk[:, 1])]):
            continue
        speed = float(np.round(rng.uniform(*speed_range), 2))
        routes.append(Route(waypoints=pos(s_way), speed=speed))
    if len(routes) < count:
        raise ValueError(
            f"could not place {count} clear routes after {max_attempts} attempts"
        )
    return routes


def calibration_strip_rect(extent) -> tuple:
    ex, ey = extent
    return (2.0, 1.0, ex - 2.0, 3.0)


def calibration_route(world: World) -> Route:
    ex, _ = world.extent
    return Route(waypoints=np.array([[4.0, 2.0], [ex - 4.0, 2.0]]), speed=CAL_SPEED)


def run_calibration(world: World, config: SimConfig = SimConfig(), seed: int = 0) -> SteadyDistribution:
    """Drive the calibration strip and fit the steady distribution on it.

    The strip is rough on purpose: anchoring sigma on a rough reference
    keeps labels on ordinary terrain in the upper part of [0, 1].
    """
    route = calibration_route(world)
    result = simulate_traverse(world, route.waypoints, route.speed, config=config, seed=seed)
    t_end = float(result.imu.t[-1])
    # Skip the first seconds so the roughness EMA has settled.
    return fit_steady_distribution(result.imu, window=(2.0, t_end))


def stock_spec(name: str, seed: int = None) -> TerrainSpec:
    """Built-in scenario specs: "flat", "hill" and "forest".

    Each carries the rough calibration strip along its bottom edge. The
    hill leans smooth (low: high cost area roughly 2:1), the forest is
    denser in rough and blocked terrain (roughly 5:1 frames low:high).
    """
    if name == "flat":
        seed = 11 if seed is None else seed
        extent = (20.0, 20.0)
        regions = [
            Region(class_id=0, shape="rect", bounds=(0, 0, 20, 20), roughness=0.0),
            Region(class_id=0, shape="rect", bounds=calibration_strip_rect(extent), roughness=CAL_RHO),
        ]
        return TerrainSpec(extent=extent, regions=tuple(regions), seed=seed, amplitude=0.0)

    if name not in ("hill", "forest"):
        raise ValueError(f"unknown stock spec {name!r}")
    seed = (23 if name == "hill" else 37) if seed is None else seed
    extent = (50.0, 50.0)
    rng = np.random.default_rng((seed, 7307))

    def discs(class_id, n, r_lo, r_hi, rho, traversable):
        out = []
        for _ in range(n):
            out.append(Region(
                class_id=class_id,
                shape="disc",
                center=(float(np.round(rng.uniform(5, 45), 2)), float(np.round(rng.uniform(7, 45), 2))),
                radius=float(np.round(rng.uniform(r_lo, r_hi), 2)),
                roughness=rho,
                traversable=traversable,
            ))
        return out

    regions = [Region(class_id=0, shape="rect", bounds=(0, 0, 50, 50), roughness=0.4 if name == "hill" else 0.3)]
    if name == "hill":
        regions += discs(2, 8, 2.5, 5.0, 3.0, True)          # grass
        regions += discs(3, 5, 1.2, 2.0, 8.0, False)         # bush
        regions += discs(4, 5, 1.0, 1.8, 10.0, False)        # rock
        regions.append(Region(class_id=1, shape="rect", bounds=(22.0, 6.0, 26.0, 50.0), roughness=0.05))
        amplitude, wavelength, octaves, slope = 2.2, 18.0, 4, (0.05, 0.02)
    else:
        regions += discs(2, 12, 2.5, 6.0, 4.0, True)         # grass
        regions += discs(3, 7, 1.2, 2.0, 8.0, False)         # bush
        regions += discs(4, 5, 0.8, 1.4, 10.0, False)        # stone
        regions += discs(5, 22, 0.25, 0.45, 10.0, False)     # trunks
        regions.append(Region(class_id=1, shape="rect", bounds=(10.0, 24.0, 46.0, 27.0), roughness=0.05))
        amplitude, wavelength, octaves, slope = 0.4, 12.0, 3, (0.0, 0.0)
    regions.append(Region(
        class_id=0, shape="rect", bounds=calibration_strip_rect(extent),
        roughness=CAL_RHO,
    ))
    return TerrainSpec(
        extent=extent,
        regions=tuple(regions),
        seed=seed,
        amplitude=amplitude,
        octaves=octaves,
        wavelength=wavelength,
        slope=slope,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_SPEC_KEYS = {"extent", "regions", "resolution", "seed", "amplitude", "octaves", "wavelength", "slope"}
_REGION_KEYS = {"class_id", "shape", "bounds", "center", "radius", "roughness", "traversable"}


def save_terrain_spec(spec: TerrainSpec, path):
    doc = {
        "extent": list(spec.extent),
        "resolution": spec.resolution,
        "seed": spec.seed,
        "amplitude": spec.amplitude,
        "octaves": spec.octaves,
        "wavelength": spec.wavelength,
        "slope": list(spec.slope),
        "regions": [],
    }
    for reg in spec.regions:
        r = {"class_id": reg.class_id, "shape": reg.shape,
             "roughness": reg.roughness, "traversable": reg.traversable}
        if reg.shape == "rect":
            r["bounds"] = [float(v) for v in reg.bounds]
        else:
            r["center"] = [float(v) for v in reg.center]
            r["radius"] = float(reg.radius)
        doc["regions"].append(r)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))


def load_terrain_spec(path) -> TerrainSpec:
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("terrain spec must be a mapping")
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown terrain spec keys: {sorted(unknown)}")
    if "extent" not in doc or "regions" not in doc:
        raise ValueError("terrain spec needs 'extent' and 'regions'")
    regions = []
    for r in doc["regions"]:
        unknown = set(r) - _REGION_KEYS
        if unknown:
            raise ValueError(f"unknown region keys: {sorted(unknown)}")
        kw = dict(r)
        for key in ("bounds", "center"):
            if key in kw:
                kw[key] = tuple(kw[key])
        regions.append(Region(**kw))
    kw = {k: v for k, v in doc.items() if k not in ("extent", "regions")}
    if "slope" in kw:
        kw["slope"] = tuple(kw["slope"])
    return TerrainSpec(extent=tuple(doc["extent"]), regions=tuple(regions), **kw)


def save_world(world: World, out_dir):
    """Write meta + the three rasters in the grid-map directory format."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": WORLD_FORMAT_VERSION,
        "resolution": world.resolution,
        "seed": world.seed,
        "class_traversable": {str(k): bool(v) for k, v in sorted(world.class_traversable.items())},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    np.save(out / "height.npy", world.height_map)
    np.save(out / "class_id.npy", world.class_map)
    np.save(out / "roughness.npy", world.roughness_map)


def load_world(in_dir) -> World:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    if meta.get("format_version") != WORLD_FORMAT_VERSION:
        raise ValueError(f"unsupported world format {meta.get('format_version')}")
    return World(
        resolution=float(meta["resolution"]),
        height_map=np.load(src / "height.npy"),
        class_map=np.load(src / "class_id.npy"),
        roughness_map=np.load(src / "roughness.npy"),
        class_traversable={int(k): bool(v) for k, v in meta["class_traversable"].items()},
        seed=int(meta["seed"]),
    )
