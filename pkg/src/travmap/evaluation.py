"""Costmap scoring and planner-in-the-loop navigation trials.

Costmaps are scored against binarized semantic ground truth (traversable
classes are 1, everything else 0) with four metrics: accuracy over the
traversable cells, accuracy over all cells, ROC AUC from a threshold
sweep of the continuous predictions, and mean squared error. Navigation
trials plan on a costmap with a weighted 8-connected grid search, drive
the plan through the simulator, and report success rate, normalized
trajectory length, relative time cost and vibration-based stability.
"""

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .costmap import ABSENT, CostMap
from .geometry import GridMap, build_grid_map
from .risk import SteadyDistribution, risk_level
from .world import SimConfig, World, render_global_cloud, safe_raster, simulate_traverse

GT_ABSENT = -1
PLANNER_WEIGHT = 5.0       # roughness penalty per unit of (1 - value)
OBSTACLE_THRESHOLD = 0.05  # values at or below this are impassable
SUCCESS_BUDGET = 4.0       # allowed path length as a multiple of Euclidean
GOAL_RADIUS = 0.5          # meters


# ---------------------------------------------------------------------------
# Costmap metrics
# ---------------------------------------------------------------------------


def binarize_ground_truth(class_raster, traversable_classes) -> np.ndarray:
    """Per-cell 1 for traversable classes, 0 for others, GT_ABSENT for no data."""
    cls = np.asarray(class_raster)
    members = np.asarray(sorted(traversable_classes), dtype=cls.dtype)
    out = np.where(np.isin(cls, members), 1, 0).astype(np.int8)
    out[cls < 0] = GT_ABSENT
    return out


def _roc_sweep(preds: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """ROC as (fpr, tpr, threshold) rows from a descending threshold sweep."""
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-preds, kind="stable")
    sorted_l = labels[order]
    sorted_p = preds[order]
    # Last index of each tied-prediction group.
    last = np.flatnonzero(np.diff(sorted_p) != 0)
    last = np.concatenate([last, [preds.size - 1]])
    tp = np.cumsum(sorted_l == 1)[last]
    fp = (last + 1) - tp
    points = np.column_stack([fp / n_neg, tp / n_pos, sorted_p[last]])
    return np.vstack([[0.0, 0.0, np.inf], points])


def roc_auc(preds, labels) -> float:
    pts = _roc_sweep(np.asarray(preds, dtype=np.float64), np.asarray(labels))
    return float(np.trapezoid(pts[:, 1], pts[:, 0]))


def costmap_metrics(costmap: CostMap, gt: np.ndarray) -> dict:
    """trav_acc / all_acc (percent), auc, mse over comparable cells.

    Comparable cells are present in the costmap and labeled in the ground
    truth. Accuracies binarize predictions at 0.5; trav_acc is restricted
    to cells whose ground truth is 1.
    """
    gt = np.asarray(gt)
    if gt.shape != costmap.values.shape:
        raise ValueError("ground truth shape does not match costmap")
    comp = costmap.present & (gt != GT_ABSENT)
    if not comp.any():
        raise ValueError("no comparable cells between costmap and ground truth")
    preds = costmap.values[comp]
    labels = gt[comp].astype(np.int8)
    binary = preds > 0.5
    pos = labels == 1
    trav_acc = 100.0 * float(np.mean(binary[pos])) if pos.any() else float("nan")
    all_acc = 100.0 * float(np.mean(binary == pos))
    auc = roc_auc(preds, labels) if pos.any() and not pos.all() else float("nan")
    mse = float(np.mean((preds - labels.astype(np.float64)) ** 2))
    return {"trav_acc": trav_acc, "all_acc": all_acc, "auc": auc, "mse": mse}


def roc_points(costmap: CostMap, gt: np.ndarray) -> np.ndarray:
    """(fpr, tpr, threshold) rows over the comparable cells."""
    gt = np.asarray(gt)
    comp = costmap.present & (gt != GT_ABSENT)
    if not comp.any():
        raise ValueError("no comparable cells between costmap and ground truth")
    return _roc_sweep(costmap.values[comp], gt[comp])


def save_roc(points: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        fh.write("fpr tpr threshold\n")
        for fpr, tpr, thr in points:
            fh.write(f"{float(fpr)!r} {float(tpr)!r} {float(thr)!r}\n")


# ---------------------------------------------------------------------------
# Planner
# ---------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_STEPS = (
    (-1, -1, _SQRT2), (-1, 0, 1.0), (-1, 1, _SQRT2),
    (0, -1, 1.0), (0, 1, 1.0),
    (1, -1, _SQRT2), (1, 0, 1.0), (1, 1, _SQRT2),
)


def _check_endpoint(costmap, cell, name, obstacle_threshold):
    r, c = cell
    if not (0 <= r < costmap.height and 0 <= c < costmap.width):
        raise ValueError(f"{name} cell {cell} is outside the costmap")
    if not costmap.present[r, c]:
        raise ValueError(f"{name} cell {cell} is absent")
    if costmap.values[r, c] <= obstacle_threshold:
        raise ValueError(f"{name} cell {cell} is blocked")


def plan_path(costmap: CostMap, start, goal,
              obstacle_threshold: float = OBSTACLE_THRESHOLD,
              weight: float = PLANNER_WEIGHT):
    """A* on the 8-connected cell grid, or None when the goal is unreachable.

    Edge weight is step length times (1 + weight * (1 - mean endpoint
    value)), so low-value terrain is crossed only when the detour costs
    more; cells at or below `obstacle_threshold` are impassable.
    """
    start = (int(start[0]), int(start[1]))
    goal = (int(goal[0]), int(goal[1]))
    _check_endpoint(costmap, start, "start", obstacle_threshold)
    _check_endpoint(costmap, goal, "goal", obstacle_threshold)

    values = costmap.values
    res = costmap.resolution
    h, w = values.shape
    passable = costmap.present & (values > obstacle_threshold)
    g = np.full((h, w), np.inf)
    parent = np.full((h, w), -1, dtype=np.int64)
    closed = np.zeros((h, w), dtype=bool)
    (sr, sc), (gr, gc) = start, goal
    g[sr, sc] = 0.0
    heap = [(res * math.hypot(gr - sr, gc - sc), 0, sr, sc)]
    counter = 1
    while heap:
        _, _, r, c = heapq.heappop(heap)
        if closed[r, c]:
            continue
        closed[r, c] = True
        if (r, c) == (gr, gc):
            cells = [(r, c)]
            while cells[-1] != start:
                p = parent[cells[-1]]
                cells.append((int(p) // w, int(p) % w))
            return cells[::-1]
        base = g[r, c]
        val = values[r, c]
        for dr, dc, step in _STEPS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w):
                continue
            if closed[nr, nc] or not passable[nr, nc]:
                continue
            cand = base + step * res * (1.0 + weight * (1.0 - 0.5 * (val + values[nr, nc])))
            if cand < g[nr, nc]:
                g[nr, nc] = cand
                parent[nr, nc] = r * w + c
                f = cand + res * math.hypot(gr - nr, gc - nc)
                heapq.heappush(heap, (f, counter, nr, nc))
                counter += 1
    return None


def path_cost(costmap: CostMap, cells, weight: float = PLANNER_WEIGHT) -> float:
    """Total planner cost of a cell path (adjacent 8-connected steps)."""
    total = 0.0
    res = costmap.resolution
    for (r0, c0), (r1, c1) in zip(cells[:-1], cells[1:]):
        dr, dc = abs(r1 - r0), abs(c1 - c0)
        if max(dr, dc) != 1:
            raise ValueError("path cells must be 8-connected neighbors")
        step = _SQRT2 if dr + dc == 2 else 1.0
        mean_val = 0.5 * (costmap.values[r0, c0] + costmap.values[r1, c1])
        total += step * res * (1.0 + weight * (1.0 - mean_val))
    return total


def cells_to_waypoints(costmap: CostMap, cells) -> np.ndarray:
    """Cell centers with collinear runs collapsed to their endpoints."""
    pts = np.array([
        (costmap.origin[0] + (c + 0.5) * costmap.resolution,
         costmap.origin[1] + (r + 0.5) * costmap.resolution)
        for r, c in cells
    ])
    if len(pts) <= 2:
        return pts
    keep = [0]
    for i in range(1, len(pts) - 1):
        d0 = pts[i] - pts[keep[-1]]
        d1 = pts[i + 1] - pts[i]
        if abs(d0[0] * d1[1] - d0[1] * d1[0]) > 1e-12:
            keep.append(i)
    keep.append(len(pts) - 1)
    return pts[keep]


# ---------------------------------------------------------------------------
# Navigation trials
# ---------------------------------------------------------------------------


@dataclass
class TrialResult:
    """Outcome of one planned traverse.

    `alphas` holds the per-IMU-frame risk level of whatever was actually
    driven, which for collisions covers the segment up to impact.
    """

    success: bool
    path_length: float
    euclidean: float
    elapsed: float
    alphas: np.ndarray
    trajectory: np.ndarray = None
    failure: str = ""


def global_grid_map(world: World, points_per_cell: int = 5) -> GridMap:
    """World-frame grid map over the full extent, aligned with world rasters."""
    cloud = render_global_cloud(world, points_per_cell)
    # No single vehicle height exists for a global map; disable the
    # overhead cutoff by referencing the highest point.
    top = float(cloud.xyz[:, 2].max())
    return build_grid_map(cloud, top, resolution=world.resolution,
                          origin=(0.0, 0.0), shape=world.class_map.shape)


def uniform_costmap(grid_map: GridMap) -> CostMap:
    """Baseline: every occupied cell fully traversable."""
    values = np.where(grid_map.occupancy, 1.0, ABSENT)
    return CostMap(grid_map.origin, grid_map.resolution, values,
                   grid_map.occupancy.copy())


def semantic_costmap(grid_map: GridMap, traversable_classes) -> CostMap:
    """Baseline: 1 on traversable classes, 0 elsewhere, no continuous shading."""
    members = np.asarray(sorted(traversable_classes), dtype=grid_map.class_id.dtype)
    values = np.where(np.isin(grid_map.class_id, members), 1.0, 0.0)
    values[~grid_map.occupancy] = ABSENT
    return CostMap(grid_map.origin, grid_map.resolution, values,
                   grid_map.occupancy.copy())


def sample_trial_endpoints(world: World, count: int, seed: int,
                           min_separation: float = 8.0,
                           clearance: float = 0.5) -> list:
    """(start_xy, goal_xy) cell-center pairs on safely traversable ground."""
    safe = safe_raster(world, clearance)
    rows, cols = np.nonzero(safe)
    if rows.size < 2:
        raise ValueError("world has too little safe ground for trials")
    rng = np.random.default_rng((seed, 7401))
    res = world.resolution
    pairs = []
    attempts = 0
    while len(pairs) < count:
        attempts += 1
        if attempts > 1000 * count:
            raise RuntimeError("could not sample endpoints far enough apart")
        i, j = rng.integers(0, rows.size, size=2)
        start = ((cols[i] + 0.5) * res, (rows[i] + 0.5) * res)
        goal = ((cols[j] + 0.5) * res, (rows[j] + 0.5) * res)
        if math.hypot(goal[0] - start[0], goal[1] - start[1]) >= min_separation:
            pairs.append((start, goal))
    return pairs


def run_trial(world: World, costmap: CostMap, start_xy, goal_xy,
              dist: SteadyDistribution, speed: float = 1.0,
              config: SimConfig = SimConfig(), seed: int = 0,
              obstacle_threshold: float = OBSTACLE_THRESHOLD,
              weight: float = PLANNER_WEIGHT) -> TrialResult:
    """Plan on the costmap, drive the plan, and score the traverse."""
    euclid = math.hypot(goal_xy[0] - start_xy[0], goal_xy[1] - start_xy[1])
    res = costmap.resolution
    start = (int(math.floor((start_xy[1] - costmap.origin[1]) / res)),
             int(math.floor((start_xy[0] - costmap.origin[0]) / res)))
    goal = (int(math.floor((goal_xy[1] - costmap.origin[1]) / res)),
            int(math.floor((goal_xy[0] - costmap.origin[0]) / res)))
    try:
        cells = plan_path(costmap, start, goal, obstacle_threshold, weight)
    except ValueError:
        cells = None
    if cells is None:
        return TrialResult(False, 0.0, euclid, float("nan"),
                           np.zeros(0), None, failure="no_path")
    waypoints = cells_to_waypoints(costmap, cells)
    if len(waypoints) < 2:
        return TrialResult(False, 0.0, euclid, float("nan"),
                           np.zeros(0), None, failure="degenerate_path")
    traverse = simulate_traverse(world, waypoints, speed, config, seed)
    alphas = risk_level(traverse.imu.a_z, dist)
    seg = np.diff(waypoints, axis=0)
    length = float(np.hypot(seg[:, 0], seg[:, 1]).sum())
    elapsed = float(traverse.imu.t[-1]) if traverse.imu.t.size else float("nan")
    end = traverse.odom.xyz[-1, :2]
    reached = math.hypot(end[0] - goal_xy[0], end[1] - goal_xy[1]) <= GOAL_RADIUS
    failure = ""
    if traverse.collided:
        failure = "collision"
    elif length > SUCCESS_BUDGET * euclid:
        failure = "budget"
    elif not reached:
        failure = "short"
    success = failure == ""
    return TrialResult(success, length, euclid, elapsed, alphas,
                       waypoints, failure=failure)


def navigation_metrics(trials, baseline_trials=None) -> dict:
    """success_rate (percent), norm_length, rel_time, mean_stability.

    norm_length averages length/Euclidean over successful trials;
    rel_time is total baseline time over total time on trials successful
    in both sets (None when there are none); mean_stability pools the
    per-frame risk levels of every driven frame.
    """
    if not trials:
        raise ValueError("at least one trial is required")
    succ = [t.success for t in trials]
    out = {"success_rate": 100.0 * float(np.mean(succ))}
    ratios = [t.path_length / t.euclidean for t in trials if t.success]
    out["norm_length"] = float(np.mean(ratios)) if ratios else float("nan")
    rel_time = None
    if baseline_trials is not None:
        if len(baseline_trials) != len(trials):
            raise ValueError("baseline trial count must match")
        common = [i for i, t in enumerate(trials)
                  if t.success and baseline_trials[i].success]
        if common:
            ours = sum(trials[i].elapsed for i in common)
            theirs = sum(baseline_trials[i].elapsed for i in common)
            rel_time = float(theirs / ours)
    out["rel_time"] = rel_time
    frames = [t.alphas for t in trials if t.alphas.size]
    out["mean_stability"] = (
        float(np.mean(np.concatenate(frames))) if frames else float("nan")
    )
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def format_cell(x) -> str:
    if x is None:
        return "undefined"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def ascii_table(headers, rows) -> str:
    """Plain left-aligned column layout with a dashed header underline."""
    cells = [[format_cell(x) for x in row] for row in rows]
    widths = [
        max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
        for i, h in enumerate(headers)
    ]
    def line(parts):
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [line(headers), line("-" * w for w in widths)]
    out.extend(line(r) for r in cells)
    return "\n".join(out) + "\n"


def costmap_report(rows) -> str:
    """Rows of (name, metrics dict) as a Table-style accuracy report."""
    headers = ["method", "trav_acc", "all_acc", "auc", "mse"]
    body = [
        [name, m["trav_acc"], m["all_acc"], m["auc"], m["mse"]]
        for name, m in rows
    ]
    return ascii_table(headers, body)


def navigation_report(rows) -> str:
    """Rows of (name, metrics dict) as a Table-style navigation report."""
    headers = ["method", "success_rate", "norm_length", "rel_time", "mean_stability"]
    body = [
        [name, m["success_rate"], m["norm_length"], m["rel_time"], m["mean_stability"]]
        for name, m in rows
    ]
    return ascii_table(headers, body)
