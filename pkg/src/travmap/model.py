"""Sequence regressor for traversability values, hand-rolled on numpy.

Per step, a three-layer strided conv encoder embeds the feature patch and
a small MLP embeds the Fourier velocity features; the concatenated step
features feed a gated recurrent unit across the sequence (or are
mean-pooled when recurrence is ablated) and a sigmoid head emits a value
in [0, 1]. Training is plain MSE with adaptive moment estimation, fully
deterministic under the config seed. All math is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import N_CHANNELS, PatchDataset
from .fourier import FourierConfig, sample_frequencies

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = N_CHANNELS
    conv_channels: tuple = (16, 32, 64)
    kernel: int = 3
    mlp_hidden: int = 32
    hidden_size: int = 64
    seq_len: int = 5
    m: int = 8                  # Fourier frequency pairs
    sigma_b: float = 1.0
    fourier_seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    patience: int = 15
    seed: int = 0
    use_omega: bool = True
    use_recurrent: bool = True

    def __post_init__(self):
        dims = (self.in_channels, self.mlp_hidden, self.hidden_size,
                self.seq_len, self.m, self.batch_size, *self.conv_channels)
        if any(d < 1 for d in dims):
            raise ValueError("all model dimensions must be positive")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")

    @property
    def step_features(self) -> int:
        return self.conv_channels[-1] + self.mlp_hidden

    @property
    def head_in(self) -> int:
        return self.hidden_size if self.use_recurrent else self.step_features


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict                # name -> float64 array
    b: np.ndarray                # Fourier frequencies, persisted with the model
    norm_mean: np.ndarray        # per patch channel
    norm_std: np.ndarray


def encode_velocity(v, omega, b: np.ndarray, use_omega: bool = True) -> np.ndarray:
    """Flattened 4m-vector form of the 2m x 2 Fourier block.

    Matches fourier_encode followed by row-major flattening; the omega
    ablation zeroes omega before encoding, so its columns become the
    constant zero-phase pattern rather than all-zeros.
    """
    v = np.asarray(v, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64) if use_omega else np.zeros_like(v)
    phase_v = 2.0 * np.pi * (b * v[..., None])
    phase_w = 2.0 * np.pi * (b * omega[..., None])
    m = b.shape[0]
    out = np.empty(v.shape + (2 * m, 2), dtype=np.float64)
    out[..., 0::2, 0] = np.cos(phase_v)
    out[..., 1::2, 0] = np.sin(phase_v)
    out[..., 0::2, 1] = np.cos(phase_w)
    out[..., 1::2, 1] = np.sin(phase_w)
    return out.reshape(v.shape + (4 * m,))


def init_params(config: ModelConfig) -> ModelParams:
    """He/Glorot-initialized weights, deterministic under the config seed."""
    rng = np.random.default_rng((config.seed, 11001))
    k = config.kernel
    weights = {}

    def he(name, shape, fan_in):
        weights[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    def glorot(name, shape):
        lim = math.sqrt(6.0 / (shape[0] + shape[1]))
        weights[name] = rng.uniform(-lim, lim, size=shape)

    c_prev = config.in_channels
    for i, c_out in enumerate(config.conv_channels):
        he(f"conv{i}_w", (c_out, c_prev * k * k), c_prev * k * k)
        weights[f"conv{i}_b"] = np.zeros(c_out)
        c_prev = c_out
    he("mlp_w", (4 * config.m, config.mlp_hidden), 4 * config.m)
    weights["mlp_b"] = np.zeros(config.mlp_hidden)
    d_in = config.step_features + config.hidden_size
    for gate in ("z", "r", "h"):
        glorot(f"gru_w{gate}", (d_in, config.hidden_size))
        weights[f"gru_b{gate}"] = np.zeros(config.hidden_size)
    glorot("head_w", (config.head_in, 1))
    weights["head_b"] = np.zeros(1)

    b = sample_frequencies(FourierConfig(m=config.m, sigma_b=config.sigma_b,
                                         seed=config.fourier_seed))
    c = config.in_channels
    return ModelParams(config=config, weights=weights, b=b,
                       norm_mean=np.zeros(c), norm_std=np.ones(c))


def fit_normalization(params: ModelParams, patches: np.ndarray):
    """Per-channel mean/std from training patches, stored in the params."""
    flat = patches.astype(np.float64).transpose(1, 0, 2, 3).reshape(patches.shape[1], -1)
    params.norm_mean = flat.mean(axis=1)
    params.norm_std = np.maximum(flat.std(axis=1), 1e-6)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

_STRIDE = 2
_PAD = 1


def _conv_geometry(h, w, k):
    h_out = (h + 2 * _PAD - k) // _STRIDE + 1
    w_out = (w + 2 * _PAD - k) // _STRIDE + 1
    i0 = np.repeat(np.arange(k), k)
    j0 = np.tile(np.arange(k), k)
    i1 = _STRIDE * np.repeat(np.arange(h_out), w_out)
    j1 = _STRIDE * np.tile(np.arange(w_out), h_out)
    rows = i0[:, None] + i1[None, :]
    cols = j0[:, None] + j1[None, :]
    return h_out, w_out, rows, cols


def _conv_forward(x, w_flat, bias, k):
    n, c, h, _ = x.shape
    h_out, w_out, rows, cols = _conv_geometry(h, x.shape[3], k)
    xp = np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    # (n*positions, c*k*k) layout keeps the contraction a single dgemm.
    cols_mat = np.ascontiguousarray(
        xp[:, :, rows, cols].transpose(0, 3, 1, 2)
    ).reshape(n * h_out * w_out, c * k * k)
    out = cols_mat @ w_flat.T + bias
    out = out.reshape(n, h_out * w_out, -1).transpose(0, 2, 1).reshape(n, -1, h_out, w_out)
    mask = out > 0
    margin = float(np.min(np.abs(out)))
    return np.where(mask, out, 0.0), (cols_mat, mask, x.shape, margin)


def _conv_backward(dout, w_flat, k, cache):
    cols_mat, mask, x_shape, _ = cache
    n, c, h, w = x_shape
    h_out, w_out, rows, cols = _conv_geometry(h, w, k)
    f = dout.shape[1]
    dout = np.where(mask, dout, 0.0)
    dout_r = np.ascontiguousarray(
        dout.reshape(n, f, -1).transpose(0, 2, 1)
    ).reshape(n * h_out * w_out, f)
    dw = dout_r.T @ cols_mat
    db = dout_r.sum(axis=0)
    dcols = (dout_r @ w_flat).reshape(n, h_out * w_out, c, k * k)
    dcols = dcols.transpose(0, 2, 3, 1)
    dxp = np.zeros((n, c, h + 2 * _PAD, w + 2 * _PAD))
    for idx in range(k * k):
        i0, j0 = idx // k, idx % k
        dxp[:, :, i0:i0 + _STRIDE * h_out:_STRIDE, j0:j0 + _STRIDE * w_out:_STRIDE] += (
            dcols[:, :, idx, :].reshape(n, c, h_out, w_out)
        )
    return dxp[:, :, _PAD:_PAD + h, _PAD:_PAD + w], dw, db


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(params: ModelParams, patches, v, omega, want_cache: bool = False):
    """Predictions in [0, 1] for a batch of sequences.

    patches: (B, L, C, 10, 10); v, omega: (B, L). Raises on non-finite
    activations so silent NaN propagation cannot reach the costmap.
    """
    cfg = params.config
    w = params.weights
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 5 or patches.shape[2] != cfg.in_channels:
        raise ValueError(f"patches shape {patches.shape} does not match config")
    bsz, seq_len = patches.shape[:2]
    v = np.asarray(v, dtype=np.float64).reshape(bsz, seq_len)
    omega = np.asarray(omega, dtype=np.float64).reshape(bsz, seq_len)

    x = (patches - params.norm_mean[:, None, None]) / params.norm_std[:, None, None]
    x = x.reshape(bsz * seq_len, cfg.in_channels, *patches.shape[3:])
    conv_caches = []
    for i in range(len(cfg.conv_channels)):
        x, cache = _conv_forward(x, w[f"conv{i}_w"], w[f"conv{i}_b"], cfg.kernel)
        conv_caches.append(cache)
    gap_spatial = x.shape[2] * x.shape[3]
    conv_feat = x.mean(axis=(2, 3))

    vel = encode_velocity(v, omega, params.b, cfg.use_omega).reshape(bsz * seq_len, -1)
    mlp_pre = vel @ w["mlp_w"] + w["mlp_b"]
    mlp_mask = mlp_pre > 0
    mlp_feat = np.where(mlp_mask, mlp_pre, 0.0)

    feats = np.concatenate([conv_feat, mlp_feat], axis=1).reshape(bsz, seq_len, -1)

    gru_cache = []
    if cfg.use_recurrent:
        h = np.zeros((bsz, cfg.hidden_size))
        for t in range(seq_len):
            conc = np.concatenate([feats[:, t], h], axis=1)
            z = _sigmoid(conc @ w["gru_wz"] + w["gru_bz"])
            r = _sigmoid(conc @ w["gru_wr"] + w["gru_br"])
            conc_r = np.concatenate([feats[:, t], r * h], axis=1)
            hhat = np.tanh(conc_r @ w["gru_wh"] + w["gru_bh"])
            h_new = (1.0 - z) * h + z * hhat
            gru_cache.append((conc, z, r, conc_r, hhat, h))
            h = h_new
        head_in = h
    else:
        head_in = feats.mean(axis=1)

    logit = (head_in @ w["head_w"] + w["head_b"]).ravel()
    pred = _sigmoid(logit)
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("non-finite activation in forward pass")
    if not want_cache:
        return pred
    kink_margin = min(min(c[3] for c in conv_caches), float(np.min(np.abs(mlp_pre))))
    cache = {
        "conv_caches": conv_caches, "gap_spatial": gap_spatial,
        "conv_feat_dim": conv_feat.shape[1], "vel": vel, "mlp_mask": mlp_mask,
        "feats": feats, "gru_cache": gru_cache, "head_in": head_in,
        "pred": pred, "bsz": bsz, "seq_len": seq_len, "kink_margin": kink_margin,
    }
    return pred, cache


def backward(params: ModelParams, cache, dpred):
    """Gradients of the scalar loss for every weight tensor."""
    cfg = params.config
    w = params.weights
    grads = {name: np.zeros_like(arr) for name, arr in w.items()}
    bsz, seq_len = cache["bsz"], cache["seq_len"]
    pred = cache["pred"]

    dlogit = dpred * pred * (1.0 - pred)
    grads["head_w"] += cache["head_in"].T @ dlogit[:, None]
    grads["head_b"] += dlogit.sum(keepdims=True)
    dhead_in = dlogit[:, None] @ w["head_w"].T

    dfeats = np.zeros_like(cache["feats"])
    if cfg.use_recurrent:
        dh = dhead_in
        for t in range(seq_len - 1, -1, -1):
            conc, z, r, conc_r, hhat, h_prev = cache["gru_cache"][t]
            dz = dh * (hhat - h_prev)
            dhhat = dh * z
            dh_prev = dh * (1.0 - z)
            da_h = dhhat * (1.0 - hhat**2)
            grads["gru_wh"] += conc_r.T @ da_h
            grads["gru_bh"] += da_h.sum(axis=0)
            dconc_r = da_h @ w["gru_wh"].T
            dx = dconc_r[:, :cfg.step_features].copy()
            drh = dconc_r[:, cfg.step_features:]
            dr = drh * h_prev
            dh_prev += drh * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            grads["gru_wz"] += conc.T @ da_z
            grads["gru_bz"] += da_z.sum(axis=0)
            grads["gru_wr"] += conc.T @ da_r
            grads["gru_br"] += da_r.sum(axis=0)
            dconc = da_z @ w["gru_wz"].T + da_r @ w["gru_wr"].T
            dx += dconc[:, :cfg.step_features]
            dh_prev += dconc[:, cfg.step_features:]
            dfeats[:, t] = dx
            dh = dh_prev
    else:
        dfeats += dhead_in[:, None, :] / seq_len

    dfeats = dfeats.reshape(bsz * seq_len, -1)
    dconv_feat = dfeats[:, :cache["conv_feat_dim"]]
    dmlp_feat = dfeats[:, cache["conv_feat_dim"]:]

    dmlp_pre = np.where(cache["mlp_mask"], dmlp_feat, 0.0)
    grads["mlp_w"] += cache["vel"].T @ dmlp_pre
    grads["mlp_b"] += dmlp_pre.sum(axis=0)

    last = len(cfg.conv_channels) - 1
    h_last = int(round(math.sqrt(cache["gap_spatial"])))
    dx = np.broadcast_to(
        dconv_feat[:, :, None, None] / cache["gap_spatial"],
        (bsz * seq_len, cfg.conv_channels[-1], h_last, h_last),
    )
    for i in range(last, -1, -1):
        dx, dw_i, db_i = _conv_backward(dx, w[f"conv{i}_w"], cfg.kernel, cache["conv_caches"][i])
        grads[f"conv{i}_w"] += dw_i
        grads[f"conv{i}_b"] += db_i
    return grads


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0 or pred.shape != target.shape:
        raise ValueError("pred and target must be equal-length and non-empty")
    return float(np.mean((pred - target) ** 2))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _batch(data: PatchDataset, rows):
    idx = data.seq_index[rows]
    patches = data.patches[idx].astype(np.float64)
    return patches, data.v[idx], data.omega[idx], data.labels[idx[:, -1]]


def evaluate_loss(params: ModelParams, data: PatchDataset, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(data), batch_size):
        rows = np.arange(lo, min(lo + batch_size, len(data)))
        patches, v, omega, y = _batch(data, rows)
        pred = forward(params, patches, v, omega)
        total += float(np.sum((pred - y) ** 2))
        count += rows.size
    return total / count


def predict_dataset(params: ModelParams, data: PatchDataset, batch_size: int = 256) -> np.ndarray:
    out = np.empty(len(data))
    for lo in range(0, len(data), batch_size):
        rows = np.arange(lo, min(lo + batch_size, len(data)))
        patches, v, omega, _ = _batch(data, rows)
        out[rows] = forward(params, patches, v, omega)
    return out


def train_model(train_data: PatchDataset, val_data: PatchDataset, config: ModelConfig):
    """MSE training with adaptive moments; returns (best params, curves).

    The returned params are the best-on-validation snapshot; curves is a
    list of (epoch, train_loss, val_loss) rows. Divergence raises with the
    failing step index.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation splits must be non-empty")
    params = init_params(config)
    fit_normalization(params, train_data.patches)
    if config.epochs == 0:
        return params, []

    adam_m = {k: np.zeros_like(v) for k, v in params.weights.items()}
    adam_v = {k: np.zeros_like(v) for k, v in params.weights.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    best_val = math.inf
    best_weights = {k: v.copy() for k, v in params.weights.items()}
    since_best = 0
    curves = []

    for epoch in range(config.epochs):
        order = np.random.default_rng((config.seed, 11003, epoch)).permutation(len(train_data))
        train_total, train_count = 0.0, 0
        for lo in range(0, order.size, config.batch_size):
            rows = order[lo:lo + config.batch_size]
            patches, v, omega, y = _batch(train_data, rows)
            pred, cache = forward(params, patches, v, omega, want_cache=True)
            loss = mse_loss(pred, y)
            if not math.isfinite(loss):
                raise FloatingPointError(f"training diverged at step {step}")
            train_total += loss * rows.size
            train_count += rows.size
            grads = backward(params, cache, 2.0 * (pred - y) / rows.size)
            step += 1
            for name, g in grads.items():
                adam_m[name] = beta1 * adam_m[name] + (1 - beta1) * g
                adam_v[name] = beta2 * adam_v[name] + (1 - beta2) * g * g
                m_hat = adam_m[name] / (1 - beta1**step)
                v_hat = adam_v[name] / (1 - beta2**step)
                params.weights[name] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        val_loss = evaluate_loss(params, val_data)
        curves.append((epoch, train_total / train_count, val_loss))
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_weights = {k: v.copy() for k, v in params.weights.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    params.weights = best_weights
    return params, curves


def save_loss_curves(curves, path):
    lines = ["epoch train_loss val_loss"]
    for epoch, train_loss, val_loss in curves:
        lines.append(f"{epoch} {float(train_loss)!r} {float(val_loss)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradient_check(config: ModelConfig = None, seed: int = 0, eps: float = 1e-5):
    """Max relative error between analytic and central-difference gradients.

    Every entry of every weight tensor is perturbed, so the default config
    must stay tiny.
    """
    if config is None:
        config = ModelConfig(
            in_channels=3, conv_channels=(2, 2, 4), mlp_hidden=4,
            hidden_size=4, seq_len=3, m=2, seed=seed,
        )
    params = init_params(config)
    bsz = 3
    # Central differences are invalid across ReLU kinks; redraw the probe
    # inputs until every pre-activation sits well clear of zero.
    for attempt in range(64):
        rng = np.random.default_rng((seed, 11005, attempt))
        patches = rng.normal(0.0, 1.0, size=(bsz, config.seq_len, config.in_channels, 10, 10))
        v = rng.uniform(0.0, 2.0, size=(bsz, config.seq_len))
        omega = rng.uniform(-1.0, 1.0, size=(bsz, config.seq_len))
        y = rng.uniform(0.0, 1.0, size=bsz)
        pred, cache = forward(params, patches, v, omega, want_cache=True)
        if cache["kink_margin"] > 100.0 * eps:
            break
    else:
        raise RuntimeError("could not find a kink-free probe input")
    grads = backward(params, cache, 2.0 * (pred - y) / bsz)

    worst = 0.0
    for name, arr in params.weights.items():
        flat = arr.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = mse_loss(forward(params, patches, v, omega), y)
            flat[i] = keep - eps
            down = mse_loss(forward(params, patches, v, omega), y)
            flat[i] = keep
            numeric = (up - down) / (2 * eps)
            analytic = grads[name].ravel()[i]
            scale = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path):
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "recurrent_cell": "gru",
        "config": asdict(params.config),
        "b": [float(x) for x in params.b],
        "norm_mean": [float(x) for x in params.norm_mean],
        "norm_std": [float(x) for x in params.norm_std],
        "weights": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
            for name, arr in sorted(params.weights.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')}")
    cfg_doc = dict(doc["config"])
    for key in ("conv_channels",):
        cfg_doc[key] = tuple(cfg_doc[key])
    config = ModelConfig(**cfg_doc)
    weights = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["weights"].items()
    }
    return ModelParams(
        config=config,
        weights=weights,
        b=np.array(doc["b"], dtype=np.float64),
        norm_mean=np.array(doc["norm_mean"], dtype=np.float64),
        norm_std=np.array(doc["norm_std"], dtype=np.float64),
    )


def check_feature_compatibility(params: ModelParams, manifest: dict):
    """Hard error when the dataset's Fourier features mismatch the model."""
    if "b" in manifest:
        b = np.array(manifest["b"], dtype=np.float64)
        if b.shape != params.b.shape or not np.array_equal(b, params.b):
            raise ValueError("dataset Fourier frequencies do not match the checkpoint")
    for key, val in (("m", params.config.m), ("sigma_b", params.config.sigma_b)):
        if key in manifest and manifest[key] != val:
            raise ValueError(f"dataset {key}={manifest[key]} does not match model {val}")
