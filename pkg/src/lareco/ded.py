"""Tied-weight dense encoder-decoder on flattened voxel grids, implemented in
numpy: forward/backward with batch normalization and input masking, the
combined cross-entropy + weighted-DICE loss, a spatial weight smoothing
penalty on the voxel-facing weight matrix, and Adam training.

Volumes are flattened in C order of the [ix, iy, iz] array; the spatial
penalty reshapes weight columns back onto the grid with the same convention.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import EmptyDataset, GridMismatch, ShapeMismatch
from .grid import GridSpec, OccupancyVolume, ScalarField, boundary_weight_mask

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CLAMP = 1e-7


@dataclass
class LossConfig:
    ce_weight: float = 0.4
    dice_weight: float = 0.6
    lambda_swr: float = 0.0
    use_boundary_mask: bool = True
    mask_alpha: float = 14.0
    mask_sigma: float = 1.5
    input_mask_prob: float = 0.1

    def __post_init__(self):
        if abs(self.ce_weight + self.dice_weight - 1.0) > 1e-9:
            raise ValueError("ce_weight + dice_weight must equal 1")
        if min(self.ce_weight, self.dice_weight, self.lambda_swr) < 0:
            raise ValueError("loss weights must be >= 0")
        if not (0.0 <= self.input_mask_prob < 1.0):
            raise ValueError("input_mask_prob must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "ce_weight": self.ce_weight, "dice_weight": self.dice_weight,
            "lambda_swr": self.lambda_swr, "use_boundary_mask": self.use_boundary_mask,
            "mask_alpha": self.mask_alpha, "mask_sigma": self.mask_sigma,
            "input_mask_prob": self.input_mask_prob,
        }


@dataclass
class BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @staticmethod
    def identity(dim: int) -> "BnLayer":
        return BnLayer(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim))


@dataclass
class DedModel:
    """Encoder s -> h1 -> ... -> hk; decoder reuses the transposed encoder
    matrices (tied weights), with its own biases.  Batch norm after every
    affine layer except the last."""

    grid: GridSpec
    layer_sizes: list            # [s, h1, ..., hk]
    W: list = dc_field(repr=False)      # W[i]: (h_{i+1}, h_i)
    b_enc: list = dc_field(repr=False)  # encoder biases, sizes h1..hk
    b_dec: list = dc_field(repr=False)  # decoder biases, sizes h_{k-1}..h1, s
    bn: list = dc_field(repr=False)     # 2k-1 BnLayer (all layers but the last)

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 1

    def params(self) -> dict:
        """Name -> array views of every trainable parameter."""
        p = {}
        for i, w in enumerate(self.W):
            p[f"W{i}"] = w
        for i, b in enumerate(self.b_enc):
            p[f"b_enc{i}"] = b
        for i, b in enumerate(self.b_dec):
            p[f"b_dec{i}"] = b
        for i, layer in enumerate(self.bn):
            p[f"bn{i}_gamma"] = layer.gamma
            p[f"bn{i}_beta"] = layer.beta
        return p

    def set_params(self, values: dict) -> None:
        own = self.params()
        for name, arr in values.items():
            own[name][...] = arr

    def weight_checksum(self) -> float:
        return float(sum(np.abs(w).sum() for w in self.W))


def init_model(grid: GridSpec, hidden_sizes, seed: int) -> DedModel:
    """Symmetric uniform init in +-sqrt(6 / (fan_in + fan_out)); zero biases;
    identity batch norm."""
    sizes = [grid.n_voxels] + [int(h) for h in hidden_sizes]
    rng = np.random.default_rng(seed)
    W = []
    for i in range(len(sizes) - 1):
        limit = np.sqrt(6.0 / (sizes[i] + sizes[i + 1]))
        W.append(rng.uniform(-limit, limit, size=(sizes[i + 1], sizes[i])))
    b_enc = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
    dec_sizes = sizes[-2::-1]  # h_{k-1}, ..., h1, s
    b_dec = [np.zeros(d) for d in dec_sizes]
    k = len(sizes) - 1
    bn_dims = sizes[1:] + dec_sizes[:-1]  # encoder outputs + decoder hidden outputs
    assert len(bn_dims) == 2 * k - 1
    bn = [BnLayer.identity(d) for d in bn_dims]
    return DedModel(grid, sizes, W, b_enc, b_dec, bn)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def forward(model: DedModel, X: np.ndarray, mode: str = "infer",
            rng: np.random.Generator | None = None,
            input_mask_prob: float = 0.0):
    """Run the network on a batch (B, s).  Train mode applies input masking
    and batch statistics; infer mode uses running statistics and no masking.
    Returns (z, cache)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.layer_sizes[0]:
        raise ShapeMismatch(f"input shape {X.shape}, expected (B, {model.layer_sizes[0]})")
    train = mode == "train"
    if train and input_mask_prob > 0:
        if rng is None:
            raise ValueError("train mode with masking needs an rng")
        mask = rng.random(X.shape) >= input_mask_prob
        x = X * mask
    else:
        x = X
    k = model.n_hidden
    cache = {"x0": x, "inputs": [], "pre_bn": [], "bn": [], "post_bn": [], "train": train,
             "batch_stats": X.shape[0] >= 2}
    h = x
    n_layers = 2 * k
    for layer in range(n_layers):
        cache["inputs"].append(h)
        if layer < k:
            a = h @ model.W[layer].T + model.b_enc[layer]
        else:
            a = h @ model.W[n_layers - 1 - layer] + model.b_dec[layer - k]
        last = layer == n_layers - 1
        if last:
            z = _sigmoid(a)
            cache["pre_bn"].append(a)
            cache["bn"].append(None)
            cache["post_bn"].append(None)
            cache["z"] = z
            return z, cache
        bn = model.bn[layer]
        if train and cache["batch_stats"]:
            mu = a.mean(axis=0)
            var = a.var(axis=0)
            bn.running_mean[...] = BN_MOMENTUM * bn.running_mean + (1 - BN_MOMENTUM) * mu
            bn.running_var[...] = BN_MOMENTUM * bn.running_var + (1 - BN_MOMENTUM) * var
        else:
            mu, var = bn.running_mean, bn.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (a - mu) * inv_std
        y = bn.gamma * xhat + bn.beta
        h = np.maximum(y, 0.0)
        cache["pre_bn"].append(a)
        cache["bn"].append({"mu": mu, "var": var, "inv_std": inv_std, "xhat": xhat, "y": y})
        cache["post_bn"].append(h)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def wdice(z: np.ndarray, target: np.ndarray, weights: np.ndarray | None) -> float:
    """Weighted DICE between a probability vector and a binary target."""
    if weights is None:
        w2 = 1.0
    else:
        w2 = weights ** 2
    num = 2.0 * float(np.sum(w2 * target * z))
    den = float(np.sum(w2 * target * target) + np.sum(w2 * z * z))
    if den == 0.0:
        return 1.0
    return num / den


def swr_penalty(model: DedModel) -> float:
    """Sum over hidden units of squared forward differences (3 axes, no
    wraparound) of the first-layer weight columns laid out on the grid."""
    dims = model.grid.dims
    if model.layer_sizes[0] != model.grid.n_voxels:
        raise ShapeMismatch("first layer size does not match grid voxel count")
    cols = model.W[0].reshape(-1, *dims)  # (h1, nx, ny, nz)
    total = 0.0
    for axis in range(1, 4):
        d = np.diff(cols, axis=axis)
        total += float(np.sum(d * d))
    return total


def swr_gradient(model: DedModel) -> np.ndarray:
    """Gradient of swr_penalty with respect to W[0] (same shape)."""
    dims = model.grid.dims
    cols = model.W[0].reshape(-1, *dims)
    g = np.zeros_like(cols)
    for axis in range(1, 4):
        d = np.diff(cols, axis=axis)
        sl_hi = [slice(None)] * 4
        sl_lo = [slice(None)] * 4
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        g[tuple(sl_hi)] += 2.0 * d
        g[tuple(sl_lo)] -= 2.0 * d
    return g.reshape(model.W[0].shape)


def loss(z: np.ndarray, target: np.ndarray, weights: np.ndarray | None,
         cfg: LossConfig, model: DedModel):
    """Batch loss: mean over samples of ce_weight*(-CE) + dice_weight*(-WDICE),
    plus lambda_swr * swr_penalty(model).  Returns (scalar, breakdown dict)."""
    z = np.atleast_2d(z)
    target = np.atleast_2d(target)
    if z.shape != target.shape:
        raise ShapeMismatch("z and target shapes differ")
    B = z.shape[0]
    zc = np.clip(z, CLAMP, 1.0 - CLAMP)
    clamped = int(np.sum((z < CLAMP) | (z > 1.0 - CLAMP)))
    ce = np.sum(target * np.log(zc) + (1.0 - target) * np.log(1.0 - zc), axis=1)
    if weights is not None:
        weights = np.atleast_2d(weights)
        dices = np.array([wdice(z[i], target[i], weights[i]) for i in range(B)])
    else:
        dices = np.array([wdice(z[i], target[i], None) for i in range(B)])
    ce_term = cfg.ce_weight * float(np.mean(-ce))
    dice_term = cfg.dice_weight * float(np.mean(-dices))
    swr_term = cfg.lambda_swr * swr_penalty(model) if cfg.lambda_swr else 0.0
    total = ce_term + dice_term + swr_term
    breakdown = {"total": total, "ce": ce_term, "wdice": dice_term,
                 "swr": swr_term, "clamped": clamped,
                 "mean_wdice": float(np.mean(dices))}
    return total, breakdown


def _loss_grad_z(z: np.ndarray, target: np.ndarray, weights: np.ndarray | None,
                 cfg: LossConfig) -> np.ndarray:
    """d(batch data loss)/dz."""
    B = z.shape[0]
    zc = np.clip(z, CLAMP, 1.0 - CLAMP)
    active = (z > CLAMP) & (z < 1.0 - CLAMP)
    dce = -(target / zc - (1.0 - target) / (1.0 - zc)) * active
    grad = cfg.ce_weight * dce / B
    for i in range(B):
        w2 = 1.0 if weights is None else np.atleast_2d(weights)[i] ** 2
        t, zi = target[i], z[i]
        num = 2.0 * np.sum(w2 * t * zi)
        den = np.sum(w2 * t * t) + np.sum(w2 * zi * zi)
        if den == 0.0:
            continue
        ddice = (2.0 * w2 * t * den - num * 2.0 * w2 * zi) / (den * den)
        grad[i] += cfg.dice_weight * (-ddice) / B
    return grad


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _bn_backward(dy: np.ndarray, a: np.ndarray, bn_cache: dict, gamma: np.ndarray,
                 batch_stats: bool):
    """Backprop through batch norm; returns (da, dgamma, dbeta)."""
    xhat, inv_std, mu = bn_cache["xhat"], bn_cache["inv_std"], bn_cache["mu"]
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    dxhat = dy * gamma
    if not batch_stats:
        # normalization used frozen running statistics
        return dxhat * inv_std, dgamma, dbeta
    B = a.shape[0]
    amu = a - mu
    dvar = np.sum(dxhat * amu, axis=0) * (-0.5) * inv_std ** 3
    dmu = np.sum(-dxhat * inv_std, axis=0) + dvar * np.sum(-2.0 * amu, axis=0) / B
    da = dxhat * inv_std + dvar * 2.0 * amu / B + dmu / B
    return da, dgamma, dbeta


def backward(model: DedModel, cache: dict, z: np.ndarray, target: np.ndarray,
             weights: np.ndarray | None, cfg: LossConfig) -> dict:
    """Exact analytic gradient of loss() w.r.t. every parameter; tied weights
    accumulate the encoder and decoder contributions into one tensor."""
    if not cache.get("train"):
        raise ValueError("backward needs a cache from forward(train)")
    k = model.n_hidden
    n_layers = 2 * k
    grads = {name: np.zeros_like(arr) for name, arr in model.params().items()}
    target = np.atleast_2d(np.asarray(target, dtype=float))
    da = _loss_grad_z(z, target, weights, cfg) * z * (1.0 - z)  # through sigmoid
    for layer in range(n_layers - 1, -1, -1):
        h_in = cache["inputs"][layer]
        if layer == n_layers - 1:
            # last decoder layer: a = h_in @ W[0] + b_dec[-1]
            grads["W0"] += h_in.T @ da
            grads[f"b_dec{layer - k}"] += da.sum(axis=0)
            da = da @ model.W[0].T
            continue
        # da is the gradient w.r.t. this layer's post-activation output
        bnc = cache["bn"][layer]
        relu_mask = bnc["y"] > 0
        dy = da * relu_mask
        a_pre = cache["pre_bn"][layer]
        da_pre, dgamma, dbeta = _bn_backward(dy, a_pre, bnc, model.bn[layer].gamma,
                                             cache["batch_stats"])
        grads[f"bn{layer}_gamma"] += dgamma
        grads[f"bn{layer}_beta"] += dbeta
        if layer < k:
            # encoder: a = h_in @ W[layer].T + b_enc[layer]
            grads[f"W{layer}"] += da_pre.T @ h_in
            grads[f"b_enc{layer}"] += da_pre.sum(axis=0)
            da = da_pre @ model.W[layer]
        else:
            wi = n_layers - 1 - layer
            grads[f"W{wi}"] += h_in.T @ da_pre
            grads[f"b_dec{layer - k}"] += da_pre.sum(axis=0)
            da = da_pre @ model.W[wi].T
    if cfg.lambda_swr:
        grads["W0"] += cfg.lambda_swr * swr_gradient(model)
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8


def adam_step(model: DedModel, grads: dict, state: AdamState) -> AdamState:
    """Standard Adam with bias correction, in place on the model parameters."""
    params = model.params()
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape mismatch for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m[...] = state.beta1 * m + (1 - state.beta1) * g
        v[...] = state.beta2 * v + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps_adam)
    return state


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------

def _flatten_volumes(vols, grid: GridSpec) -> np.ndarray:
    out = np.empty((len(vols), grid.n_voxels))
    for i, v in enumerate(vols):
        if v.grid != grid:
            raise GridMismatch("volume grid differs from model grid")
        out[i] = v.data.ravel().astype(float)
    return out


def sample_weight_masks(targets, cfg: LossConfig, grid: GridSpec) -> np.ndarray | None:
    if not cfg.use_boundary_mask:
        return None
    masks = np.empty((len(targets), grid.n_voxels))
    for i, t in enumerate(targets):
        masks[i] = boundary_weight_mask(t, cfg.mask_alpha, cfg.mask_sigma).data.ravel()
    return masks


def train(dataset, grid: GridSpec, hidden_sizes=(64, 64), cfg: LossConfig | None = None,
          epochs: int = 50, batch_size: int = 16, seed: int = 0,
          lr: float = 3e-3, beta1: float = 0.9, beta2: float = 0.999,
          eps_adam: float = 1e-8):
    """Train on (path_volume, shape_volume) pairs.  Deterministic given seed.
    Returns (model, per-epoch metrics list)."""
    if cfg is None:
        cfg = LossConfig()
    if not dataset:
        raise EmptyDataset("dataset is empty")
    X = _flatten_volumes([d[0] for d in dataset], grid)
    Y = _flatten_volumes([d[1] for d in dataset], grid)
    masks = sample_weight_masks([d[1] for d in dataset], cfg, grid)
    model = init_model(grid, hidden_sizes, seed)
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps_adam=eps_adam)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    n = len(dataset)
    metrics = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        epoch_terms = {"total": 0.0, "ce": 0.0, "wdice": 0.0, "swr": 0.0, "clamped": 0}
        n_batches = 0
        for start in range(0, n, batch_size):
            sel = perm[start:start + batch_size]
            xb, yb = X[sel], Y[sel]
            mb = masks[sel] if masks is not None else None
            z, cache = forward(model, xb, mode="train", rng=rng,
                               input_mask_prob=cfg.input_mask_prob)
            total, br = loss(z, yb, mb, cfg, model)
            grads = backward(model, cache, z, yb, mb, cfg)
            adam_step(model, grads, state)
            for key in ("total", "ce", "wdice", "swr"):
                epoch_terms[key] += br[key]
            epoch_terms["clamped"] += br["clamped"]
            n_batches += 1
        row = {"epoch": epoch}
        for key in ("total", "ce", "wdice", "swr"):
            row[key] = epoch_terms[key] / max(n_batches, 1)
        row["clamped"] = epoch_terms["clamped"]
        row["train_dice"] = _dataset_dice(model, X, Y)
        metrics.append(row)
    return model, metrics


def _dataset_dice(model: DedModel, X: np.ndarray, Y: np.ndarray) -> float:
    z, _ = forward(model, X, mode="infer")
    pred = z >= 0.5
    t = Y >= 0.5
    inter = np.sum(pred & t, axis=1)
    sizes = pred.sum(axis=1) + t.sum(axis=1)
    with np.errstate(invalid="ignore"):
        d = np.where(sizes > 0, 2.0 * inter / sizes, 1.0)
    return float(np.mean(d))


def infer(model: DedModel, path_volume: OccupancyVolume):
    """Probability field and its 0.5-thresholded binarization."""
    if path_volume.grid != model.grid:
        raise GridMismatch("input grid differs from model grid")
    z, _ = forward(model, path_volume.data.ravel().astype(float)[None, :], mode="infer")
    prob = z[0].reshape(model.grid.dims)
    return ScalarField(model.grid, prob), OccupancyVolume(model.grid, prob >= 0.5)


# ---------------------------------------------------------------------------
# Checkpoint I/O: model.json + model.raw (little-endian float32)
# ---------------------------------------------------------------------------

def _tensor_order(model: DedModel) -> list:
    names = [f"W{i}" for i in range(len(model.W))]
    names += [f"b_enc{i}" for i in range(len(model.b_enc))]
    names += [f"b_dec{i}" for i in range(len(model.b_dec))]
    for i in range(len(model.bn)):
        names += [f"bn{i}_gamma", f"bn{i}_beta", f"bn{i}_running_mean", f"bn{i}_running_var"]
    return names


def _all_tensors(model: DedModel) -> dict:
    t = dict(model.params())
    for i, layer in enumerate(model.bn):
        t[f"bn{i}_running_mean"] = layer.running_mean
        t[f"bn{i}_running_var"] = layer.running_var
    return t


def save_checkpoint(base_path, model: DedModel, cfg: LossConfig | None = None,
                    seed: int | None = None) -> None:
    base = str(base_path)
    tensors = _all_tensors(model)
    order = _tensor_order(model)
    header = {
        "layer_sizes": list(model.layer_sizes),
        "grid": {"dims": list(model.grid.dims), "spacing_mm": model.grid.spacing_mm,
                 "origin_mm": list(model.grid.origin_mm)},
        "bn": {"eps": BN_EPS, "momentum": BN_MOMENTUM},
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in order],
        "loss_config": cfg.to_dict() if cfg else None,
        "seed": seed,
    }
    with open(base + ".json", "w") as f:
        json.dump(header, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    with open(base + ".raw", "wb") as f:
        for n in order:
            f.write(tensors[n].astype("<f4").tobytes())


def load_checkpoint(base_path) -> DedModel:
    base = str(base_path)
    with open(base + ".json") as f:
        header = json.load(f)
    g = header["grid"]
    grid = GridSpec(tuple(g["dims"]), g["spacing_mm"], tuple(g["origin_mm"]))
    model = init_model(grid, header["layer_sizes"][1:], seed=0)
    raw = np.fromfile(base + ".raw", dtype="<f4")
    tensors = _all_tensors(model)
    pos = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        tensors[entry["name"]][...] = raw[pos:pos + size].reshape(shape).astype(float)
        pos += size
    if pos != raw.size:
        raise ValueError("checkpoint raw size mismatch")
    return model
