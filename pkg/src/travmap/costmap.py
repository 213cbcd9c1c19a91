"""Robot-centric continuous costmaps from local grid maps.

A trained model scores overlapping 1x1 m patches swept over the local map
on a 0.2 m lattice. Each 0.1 m cell takes the mean value of every patch
covering it; cells with no cloud support or no covering patch are absent,
and cells whose dominant semantic class is configured untraversable are
forced to exactly 0 regardless of the prediction.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .dataset import PATCH_CELLS, patch_channels, window_cells
from .geometry import GridMap, SemanticPointCloud, build_grid_map
from .model import ModelParams, forward

ABSENT = -1.0              # exported sentinel for cells without a value
SWEEP_STRIDE = 0.2         # meters between patch centers
LOCAL_EXTENT = 10.0        # side length of the local map, meters
COSTMAP_FORMAT_VERSION = 1
_PREDICT_BATCH = 256


@dataclass
class CostMap:
    """Continuous traversability raster; [row, col] indexes (y, x).

    `values` holds ABSENT at cells without a value and a number in [0, 1]
    everywhere `present` is set.
    """

    origin: tuple
    resolution: float
    values: np.ndarray     # (H, W) float64
    present: np.ndarray    # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.values.shape != self.present.shape or self.values.ndim != 2:
            raise ValueError("values and present must be matching 2-D rasters")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        vals = self.values[self.present]
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("present cell values must lie in [0, 1]")
        if not np.all(self.values[~self.present] == ABSENT):
            raise ValueError("absent cells must carry the ABSENT sentinel")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class SweepPatches:
    """Patches on the sweep lattice plus the exact cells each one covers.

    `index` is the flat lattice position of each kept patch, so a caller
    streaming successive frames can match patches at the same position.
    """

    patches: np.ndarray    # (P, C, 10, 10)
    rows: np.ndarray       # (P, 10, 10) covered cell rows
    cols: np.ndarray       # (P, 10, 10) covered cell cols
    centers: np.ndarray    # (P, 2) map-frame centers
    index: np.ndarray      # (P,) flat lattice index
    lattice_shape: tuple   # (ny, nx) of the full sweep lattice

    def __len__(self):
        return len(self.patches)


def build_local_map(cloud: SemanticPointCloud, vehicle_height: float = 0.0) -> GridMap:
    """Rasterize a vehicle-frame cloud into the fixed 100x100 local map."""
    half = LOCAL_EXTENT / 2.0
    cells = int(round(LOCAL_EXTENT / 0.1))
    return build_grid_map(
        cloud, vehicle_height, resolution=0.1,
        origin=(-half, -half), shape=(cells, cells),
    )


def sweep_patches(local_map: GridMap, stride: float = SWEEP_STRIDE) -> SweepPatches:
    """Cut axis-aligned 1x1 m patches at every lattice center with enough support.

    Centers run from half a patch in from the map edge to half a patch
    short of the far edge in steps of `stride`; windows with less than
    half their cells occupied are skipped.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    res = local_map.resolution
    half_patch = PATCH_CELLS * res / 2.0
    width_m = local_map.width * res
    height_m = local_map.height * res
    nx = int(np.floor((width_m - 2 * half_patch) / stride + 1e-9)) + 1
    ny = int(np.floor((height_m - 2 * half_patch) / stride + 1e-9)) + 1
    if nx <= 0 or ny <= 0:
        empty = np.zeros
        return SweepPatches(
            empty((0, 0, PATCH_CELLS, PATCH_CELLS)), empty((0, PATCH_CELLS, PATCH_CELLS), dtype=np.int64),
            empty((0, PATCH_CELLS, PATCH_CELLS), dtype=np.int64), empty((0, 2)),
            empty(0, dtype=np.int64), (0, 0),
        )
    cx = local_map.origin[0] + half_patch + stride * np.arange(nx)
    cy = local_map.origin[1] + half_patch + stride * np.arange(ny)
    centers = np.column_stack([
        np.broadcast_to(cx[None, :], (ny, nx)).ravel(),
        np.broadcast_to(cy[:, None], (ny, nx)).ravel(),
    ])
    yaws = np.zeros(len(centers))
    patches, valid = patch_channels(local_map, centers, yaws)
    rows, cols, _ = window_cells(local_map, centers, yaws)
    keep = np.flatnonzero(valid)
    return SweepPatches(
        patches=patches[keep],
        rows=rows[keep],
        cols=cols[keep],
        centers=centers[keep],
        index=keep,
        lattice_shape=(ny, nx),
    )


def aggregate(values, sweep: SweepPatches, local_map: GridMap) -> CostMap:
    """Mean patch value per covered cell; no coverage or no points -> ABSENT."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(sweep),):
        raise ValueError("one value per swept patch is required")
    h, w = local_map.occupancy.shape
    acc = np.zeros(h * w)
    cnt = np.zeros(h * w, dtype=np.int64)
    vmin = np.full(h * w, np.inf)
    vmax = np.full(h * w, -np.inf)
    if len(sweep):
        flat = (sweep.rows * w + sweep.cols).ravel()
        spread = np.repeat(values, PATCH_CELLS * PATCH_CELLS)
        acc = np.bincount(flat, weights=spread, minlength=h * w)
        cnt = np.bincount(flat, minlength=h * w)
        np.minimum.at(vmin, flat, spread)
        np.maximum.at(vmax, flat, spread)
    present = (cnt > 0).reshape(h, w) & local_map.occupancy
    out = np.full(h * w, ABSENT)
    sel = present.ravel()
    # Clipping into the covering patches' range makes the bounds property
    # exact and collapses constant-valued coverage to the exact value.
    out[sel] = np.clip(acc[sel] / cnt[sel], vmin[sel], vmax[sel])
    return CostMap(local_map.origin, local_map.resolution, out.reshape(h, w), present)


def apply_semantic_override(costmap: CostMap, local_map: GridMap,
                            untraversable_classes) -> CostMap:
    """Zero every present cell whose dominant class is untraversable."""
    if costmap.values.shape != local_map.class_id.shape:
        raise ValueError("costmap and local map shapes differ")
    classes = np.asarray(sorted(untraversable_classes), dtype=local_map.class_id.dtype)
    values = costmap.values.copy()
    if classes.size:
        hit = costmap.present & np.isin(local_map.class_id, classes)
        values[hit] = 0.0
    return CostMap(costmap.origin, costmap.resolution, values, costmap.present.copy())


class CostmapPredictor:
    """Streams local maps into costmaps with a trained model.

    The recurrent model needs a length-L sequence per patch. The predictor
    keeps the last L-1 patches seen at each sweep lattice position; on a
    cold start (or whenever a position lacks history) the current patch is
    repeated to fill the sequence. All patches of a frame share the
    current measured (v, omega).
    """

    def __init__(self, params: ModelParams, untraversable_classes=frozenset(),
                 stride: float = SWEEP_STRIDE):
        self.params = params
        self.untraversable_classes = frozenset(untraversable_classes)
        self.stride = stride
        self._history = {}
        self._lattice_shape = None

    def reset(self) -> None:
        self._history = {}
        self._lattice_shape = None

    def predict(self, local_map: GridMap, v: float, omega: float) -> CostMap:
        sweep = sweep_patches(local_map, self.stride)
        if self._lattice_shape is not None and sweep.lattice_shape != self._lattice_shape:
            raise ValueError("local map shape changed mid-stream; call reset()")
        self._lattice_shape = sweep.lattice_shape
        seq_len = self.params.config.seq_len
        n = len(sweep)
        if n == 0:
            h, w = local_map.occupancy.shape
            empty = CostMap(local_map.origin, local_map.resolution,
                            np.full((h, w), ABSENT), np.zeros((h, w), dtype=bool))
            return empty

        c = sweep.patches.shape[1]
        seqs = np.empty((n, seq_len, c, PATCH_CELLS, PATCH_CELLS))
        for i, (flat_idx, patch) in enumerate(zip(sweep.index, sweep.patches)):
            past = self._history.get(int(flat_idx), [])
            steps = (past + [patch])[-seq_len:]
            while len(steps) < seq_len:
                steps.insert(0, steps[0])
            seqs[i] = steps

        values = np.empty(n)
        for start in range(0, n, _PREDICT_BATCH):
            chunk = seqs[start:start + _PREDICT_BATCH]
            b = chunk.shape[0]
            v_arr = np.full((b, seq_len), float(v))
            w_arr = np.full((b, seq_len), float(omega))
            values[start:start + b] = forward(self.params, chunk, v_arr, w_arr)

        new_history = {}
        keep = seq_len - 1
        for flat_idx, patch in zip(sweep.index, sweep.patches):
            key = int(flat_idx)
            past = self._history.get(key, [])
            new_history[key] = (past + [patch])[-keep:] if keep else []
        self._history = new_history

        cm = aggregate(values, sweep, local_map)
        return apply_semantic_override(cm, local_map, self.untraversable_classes)


def save_costmap(costmap: CostMap, out_dir) -> None:
    """Write meta.json, the value raster (ABSENT sentinel), and a preview PNG."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "absent": ABSENT,
        "format_version": COSTMAP_FORMAT_VERSION,
        "origin": [float(costmap.origin[0]), float(costmap.origin[1])],
        "resolution": float(costmap.resolution),
        "shape": [costmap.height, costmap.width],
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    np.save(os.path.join(out_dir, "values.npy"), costmap.values)
    gray = np.zeros(costmap.values.shape, dtype=np.uint8)
    gray[costmap.present] = np.round(costmap.values[costmap.present] * 255.0).astype(np.uint8)
    alpha = np.where(costmap.present, 255, 0).astype(np.uint8)
    # Flip so the image's top row is the map's far (+y) edge.
    img = Image.fromarray(np.stack([gray[::-1], alpha[::-1]], axis=-1), mode="LA")
    img.save(os.path.join(out_dir, "preview.png"))


def load_costmap(in_dir) -> CostMap:
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    if meta["format_version"] != COSTMAP_FORMAT_VERSION:
        raise ValueError(f"unsupported costmap format {meta['format_version']}")
    values = np.load(os.path.join(in_dir, "values.npy"))
    if tuple(meta["shape"]) != values.shape:
        raise ValueError("raster shape does not match metadata")
    present = values != meta["absent"]
    return CostMap(tuple(meta["origin"]), meta["resolution"], values, present)
