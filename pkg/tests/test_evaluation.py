import math

import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.stats import rankdata

from travmap import evaluation as E
from travmap.costmap import ABSENT, CostMap
from travmap.risk import SteadyDistribution, risk_level
from travmap.world import TRAVERSABLE_CLASSES, Region, TerrainSpec, generate_world


def make_costmap(values, present=None, origin=(0.0, 0.0), res=0.1):
    values = np.asarray(values, dtype=np.float64)
    if present is None:
        present = values != ABSENT
    vals = np.where(present, values, ABSENT)
    return CostMap(origin, res, vals, np.asarray(present, dtype=bool))


def balanced_case(n=400, seed=0):
    rng = np.random.default_rng(seed)
    side = int(math.isqrt(n))
    gt = np.zeros(side * side, dtype=np.int8)
    gt[: gt.size // 2] = 1
    rng.shuffle(gt)
    gt = gt.reshape(side, side)
    preds = rng.random((side, side))
    return make_costmap(preds), gt


# ---------------------------------------------------------------------------
# Ground truth and metrics
# ---------------------------------------------------------------------------


def test_binarize_ground_truth():
    raster = np.array([[2, 4], [-1, 0], [5, 1]], dtype=np.int16)
    gt = E.binarize_ground_truth(raster, TRAVERSABLE_CLASSES)
    assert gt[0, 0] == 1      # grass
    assert gt[0, 1] == 0      # rock
    assert gt[1, 0] == E.GT_ABSENT
    assert gt[1, 1] == 1 and gt[2, 1] == 1
    assert gt[2, 0] == 0      # trunk


def test_metrics_perfect_predictor():
    rng = np.random.default_rng(1)
    gt = (rng.random((30, 30)) > 0.5).astype(np.int8)
    cm = make_costmap(gt.astype(np.float64))
    m = E.costmap_metrics(cm, gt)
    assert m["trav_acc"] == 100.0
    assert m["all_acc"] == 100.0
    assert m["auc"] == 1.0
    assert m["mse"] == 0.0


def test_metrics_constant_half():
    gt = np.zeros((20, 20), dtype=np.int8)
    gt[:10] = 1
    cm = make_costmap(np.full((20, 20), 0.5))
    m = E.costmap_metrics(cm, gt)
    assert m["mse"] == 0.25
    assert m["auc"] == 0.5
    assert m["all_acc"] == 50.0


def test_metrics_random_auc_near_half():
    cm, gt = balanced_case(n=10000, seed=2)
    m = E.costmap_metrics(cm, gt)
    assert abs(m["auc"] - 0.5) < 0.03


def test_auc_monotone_invariant():
    cm, gt = balanced_case(seed=3)
    cubed = make_costmap(cm.values**3)
    assert E.costmap_metrics(cm, gt)["auc"] == E.costmap_metrics(cubed, gt)["auc"]


def test_auc_matches_rank_statistic_with_ties():
    rng = np.random.default_rng(4)
    preds = np.round(rng.random((25, 25)), 1)  # heavy ties
    gt = (rng.random((25, 25)) > 0.4).astype(np.int8)
    auc = E.costmap_metrics(make_costmap(preds), gt)["auc"]
    flat_p, flat_l = preds.ravel(), gt.ravel()
    ranks = rankdata(flat_p, method="average")
    n_pos = int(flat_l.sum())
    n_neg = flat_l.size - n_pos
    oracle = (ranks[flat_l == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    assert auc == pytest.approx(oracle, abs=1e-12)


def test_trav_acc_ignores_nontraversable_cells():
    cm, gt = balanced_case(seed=5)
    before = E.costmap_metrics(cm, gt)["trav_acc"]
    perturbed = cm.values.copy()
    perturbed[gt == 0] = np.clip(perturbed[gt == 0] * 0.17 + 0.05, 0, 1)
    after = E.costmap_metrics(make_costmap(perturbed), gt)["trav_acc"]
    assert before == after


def test_metrics_exclude_absent_cells():
    gt = np.array([[1, 0], [1, 0]], dtype=np.int8)
    values = np.array([[1.0, 0.0], [0.0, 1.0]])
    present = np.array([[True, True], [False, False]])
    m = E.costmap_metrics(make_costmap(values, present), gt)
    assert m["all_acc"] == 100.0 and m["mse"] == 0.0
    gt2 = gt.copy()
    gt2[0] = E.GT_ABSENT
    with pytest.raises(ValueError, match="comparable"):
        E.costmap_metrics(make_costmap(values, present), gt2)


def test_mse_bounded():
    cm, gt = balanced_case(seed=6)
    m = E.costmap_metrics(cm, gt)
    assert 0.0 <= m["mse"] <= 1.0


def test_roc_points_and_export(tmp_path):
    cm, gt = balanced_case(seed=7)
    pts = E.roc_points(cm, gt)
    assert tuple(pts[0]) == (0.0, 0.0, np.inf)
    assert pts[-1, 0] == 1.0 and pts[-1, 1] == 1.0
    assert np.all(np.diff(pts[:, 0]) >= 0) and np.all(np.diff(pts[:, 1]) >= 0)
    assert np.all(np.diff(pts[1:, 2]) < 0)
    path = tmp_path / "roc.txt"
    E.save_roc(pts, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "fpr tpr threshold"
    assert len(lines) == len(pts) + 1
    back = np.array([[float(x) for x in ln.split()] for ln in lines[1:]])
    assert np.array_equal(back, pts)


# ---------------------------------------------------------------------------
# Planner
# ---------------------------------------------------------------------------


def edge_graph(cm, threshold=E.OBSTACLE_THRESHOLD, weight=E.PLANNER_WEIGHT):
    h, w = cm.values.shape
    passable = cm.present & (cm.values > threshold)
    rows, cols, data = [], [], []
    for r in range(h):
        for c in range(w):
            if not passable[r, c]:
                continue
            for dr, dc, step in E._STEPS:
                nr, nc = r + dr, c + dc
                if 0 <= nr < h and 0 <= nc < w and passable[nr, nc]:
                    cost = step * cm.resolution * (
                        1 + weight * (1 - 0.5 * (cm.values[r, c] + cm.values[nr, nc]))
                    )
                    rows.append(r * w + c)
                    cols.append(nr * w + nc)
                    data.append(cost)
    return csr_matrix((data, (rows, cols)), shape=(h * w, h * w))


def test_plan_uniform_grid_matches_diagonal_formula():
    cm = make_costmap(np.ones((20, 20)))
    path = E.plan_path(cm, (2, 3), (17, 12))
    assert path[0] == (2, 3) and path[-1] == (17, 12)
    dr, dc = 15, 9
    expect = 0.1 * (math.sqrt(2.0) * min(dr, dc) + abs(dr - dc))
    assert E.path_cost(cm, path) == pytest.approx(expect, abs=1e-9)


def test_plan_blocked_ring_fails():
    values = np.full((9, 9), 0.9)
    values[3:6, 3:6] = 0.0
    values[4, 4] = 0.9
    cm = make_costmap(values, present=np.ones((9, 9), dtype=bool))
    assert E.plan_path(cm, (0, 0), (4, 4)) is None


def test_plan_endpoint_errors():
    values = np.full((9, 9), 0.9)
    values[0, 0] = ABSENT
    present = values != ABSENT
    values[8, 8] = 0.01
    cm = CostMap((0.0, 0.0), 0.1, np.where(present, values, ABSENT), present)
    with pytest.raises(ValueError, match="absent"):
        E.plan_path(cm, (0, 0), (4, 4))
    with pytest.raises(ValueError, match="blocked"):
        E.plan_path(cm, (4, 4), (8, 8))
    with pytest.raises(ValueError, match="outside"):
        E.plan_path(cm, (4, 4), (9, 0))


def test_plan_prefers_smooth_corridor():
    values = np.zeros((9, 21))
    values[1, :] = 0.9    # smooth corridor
    values[7, :] = 0.35   # rough corridor, same length
    values[1:8, 0] = 0.9
    values[1:8, 20] = 0.9
    cm = make_costmap(values, present=np.ones_like(values, dtype=bool))
    path = E.plan_path(cm, (4, 0), (4, 20))
    rows = {r for r, _ in path}
    assert 1 in rows and 7 not in rows


def test_plan_matches_dijkstra_oracle():
    for seed in range(8):
        rng = np.random.default_rng(seed)
        values = rng.random((8, 8))
        values[0, 0] = values[7, 7] = 0.9
        cm = make_costmap(values, present=np.ones((8, 8), dtype=bool))
        dist = dijkstra(edge_graph(cm), indices=0)[63]
        path = E.plan_path(cm, (0, 0), (7, 7))
        if math.isinf(dist):
            assert path is None
        else:
            assert E.path_cost(cm, path) == pytest.approx(dist, abs=1e-9)


def test_plan_beats_exhaustive_enumeration():
    rng = np.random.default_rng(9)
    values = 0.1 + 0.9 * rng.random((3, 4))
    cm = make_costmap(values, present=np.ones((3, 4), dtype=bool))
    start, goal = (0, 0), (2, 3)

    best = [math.inf]

    def dfs(cell, visited, cost):
        if cost >= best[0]:
            return
        if cell == goal:
            best[0] = cost
            return
        r, c = cell
        for dr, dc, step in E._STEPS:
            nxt = (r + dr, c + dc)
            if not (0 <= nxt[0] < 3 and 0 <= nxt[1] < 4) or nxt in visited:
                continue
            edge = step * 0.1 * (1 + 5.0 * (1 - 0.5 * (values[cell] + values[nxt])))
            dfs(nxt, visited | {nxt}, cost + edge)

    dfs(start, {start}, 0.0)
    path = E.plan_path(cm, start, goal)
    assert E.path_cost(cm, path) == pytest.approx(best[0], abs=1e-12)


def test_cells_to_waypoints_collapses_collinear():
    cm = make_costmap(np.ones((10, 10)))
    straight = [(0, i) for i in range(6)]
    pts = E.cells_to_waypoints(cm, straight)
    assert pts.shape == (2, 2)
    bend = [(0, 0), (0, 1), (0, 2), (1, 3), (2, 4)]
    pts = E.cells_to_waypoints(cm, bend)
    assert pts.shape == (3, 2)
    assert pts[0] == pytest.approx([0.05, 0.05])


# ---------------------------------------------------------------------------
# Baseline costmaps
# ---------------------------------------------------------------------------


def baseline_grid():
    from travmap.geometry import GridMap

    occ = np.ones((12, 12), dtype=bool)
    occ[0, 0] = False
    cls = np.zeros((12, 12), dtype=np.int16)
    cls[5, 5] = 4
    cls[6, 6] = 2
    cls = np.where(occ, cls, -1).astype(np.int16)
    nanw = np.where(occ, 0.0, np.nan)
    return GridMap((0.0, 0.0), 0.1, occ, cls, nanw.copy(), nanw.copy(),
                   nanw.copy(), nanw.copy())


def test_uniform_costmap_baseline():
    cm = E.uniform_costmap(baseline_grid())
    assert not cm.present[0, 0]
    assert np.all(cm.values[cm.present] == 1.0)


def test_semantic_costmap_baseline():
    cm = E.semantic_costmap(baseline_grid(), TRAVERSABLE_CLASSES)
    assert cm.values[5, 5] == 0.0
    assert cm.values[6, 6] == 1.0
    assert cm.values[3, 3] == 1.0
    assert not cm.present[0, 0]


# ---------------------------------------------------------------------------
# Navigation metrics
# ---------------------------------------------------------------------------


def trial(success, length=10.0, euclid=10.0, elapsed=10.0, alphas=()):
    return E.TrialResult(success, length, euclid, elapsed, np.asarray(alphas, dtype=np.float64))


def test_navigation_metrics_all_success():
    trials = [trial(True, 12.0, 10.0, alphas=[1.0, 1.0]) for _ in range(8)]
    m = E.navigation_metrics(trials)
    assert m["success_rate"] == 100.0
    assert m["norm_length"] == pytest.approx(1.2)
    assert m["mean_stability"] == 1.0
    assert m["rel_time"] is None


def test_navigation_metrics_stability_pools_frames():
    dist = SteadyDistribution(9.81, 0.1, (0.0, 1.0))
    at_mu = risk_level(np.full(5, 9.81), dist)
    trials = [trial(True, alphas=at_mu), trial(False, alphas=[0.0])]
    m = E.navigation_metrics(trials)
    assert m["success_rate"] == 50.0
    assert m["mean_stability"] == pytest.approx(5.0 / 6.0)


def test_navigation_metrics_rel_time():
    ours = [trial(True, elapsed=10.0), trial(True, elapsed=20.0), trial(False)]
    base = [trial(False), trial(True, elapsed=30.0), trial(True, elapsed=5.0)]
    m = E.navigation_metrics(ours, base)
    assert m["rel_time"] == pytest.approx(30.0 / 20.0)
    disjoint = [trial(False), trial(False), trial(True, elapsed=9.0)]
    assert E.navigation_metrics(ours, disjoint)["rel_time"] is None
    with pytest.raises(ValueError):
        E.navigation_metrics([])


def test_navigation_metrics_norm_length_successes_only():
    trials = [trial(True, 15.0, 10.0), trial(False, 900.0, 10.0)]
    assert E.navigation_metrics(trials)["norm_length"] == pytest.approx(1.5)


# ---------------------------------------------------------------------------
# Trials in the simulator
# ---------------------------------------------------------------------------


def flat_world():
    spec = TerrainSpec(
        extent=(20.0, 20.0),
        regions=(Region(0, "rect", bounds=(0.0, 0.0, 20.0, 20.0), roughness=0.0),),
        seed=5, amplitude=0.0,
    )
    return generate_world(spec)


def test_run_trial_straight_line_success():
    world = flat_world()
    gm = E.global_grid_map(world)
    cm = E.uniform_costmap(gm)
    dist = SteadyDistribution(9.81, 0.05, (0.0, 1.0))
    res = E.run_trial(world, cm, (3.05, 3.05), (16.05, 16.05), dist, speed=1.5)
    assert res.success
    assert res.failure == ""
    assert res.path_length >= res.euclidean - 1e-9
    assert res.path_length <= 1.05 * res.euclidean
    assert res.alphas.size > 100
    assert np.all((res.alphas >= 0.0) & (res.alphas <= 1.0))
    assert res.elapsed == pytest.approx(res.path_length / 1.5, rel=0.05)


def test_run_trial_detours_around_wall():
    world = flat_world()
    gm = E.global_grid_map(world)
    cm = E.uniform_costmap(gm)
    values = cm.values.copy()
    values[80:82, 20:180] = 0.0   # wall with gaps at the map edges
    walled = CostMap(cm.origin, cm.resolution, values, cm.present.copy())
    dist = SteadyDistribution(9.81, 0.05, (0.0, 1.0))
    res = E.run_trial(world, walled, (10.05, 3.05), (10.05, 16.05), dist)
    assert res.success
    assert res.path_length > 1.3 * res.euclidean


def test_run_trial_no_path():
    world = flat_world()
    gm = E.global_grid_map(world)
    cm = E.uniform_costmap(gm)
    values = cm.values.copy()
    values[95:106, 95:106] = 0.0
    values[100, 100] = 1.0        # goal cell inside a sealed ring
    sealed = CostMap(cm.origin, cm.resolution, values, cm.present.copy())
    dist = SteadyDistribution(9.81, 0.05, (0.0, 1.0))
    res = E.run_trial(world, sealed, (3.05, 3.05), (10.05, 10.05), dist)
    assert not res.success
    assert res.failure == "no_path"
    assert res.alphas.size == 0


def test_sample_trial_endpoints_separated_and_safe():
    world = flat_world()
    pairs = E.sample_trial_endpoints(world, 6, seed=1, min_separation=8.0)
    assert len(pairs) == 6
    for start, goal in pairs:
        assert math.hypot(goal[0] - start[0], goal[1] - start[1]) >= 8.0
        assert world.traversable_at(start[0], start[1])
        assert world.traversable_at(goal[0], goal[1])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def test_ascii_reports():
    m = {"trav_acc": 91.25, "all_acc": 88.0, "auc": 0.9321, "mse": 0.0412}
    text = E.costmap_report([("model", m), ("semantic", m)])
    lines = text.splitlines()
    assert lines[0].split() == ["method", "trav_acc", "all_acc", "auc", "mse"]
    assert set(lines[1]) <= {"-", " "}
    assert lines[2].startswith("model") and "0.9321" in lines[2]

    nav = {"success_rate": 87.5, "norm_length": 1.08, "rel_time": None,
           "mean_stability": 0.71}
    text = E.navigation_report([("model", nav)])
    assert "undefined" in text
    assert "87.5000" in text
