"""Dual-branch 1D CNN mapping (AIF, 3x3 tissue neighbourhood) to MBF.

Everything is plain float64 numpy: im2col convolutions, max pooling,
dense layers, manual backpropagation of the mean squared error, and Adam.
"""
from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, PreconditionError
from .phantom import Patient

BRANCHES = ("aif", "tissue")
IN_CHANNELS = {"aif": 1, "tissue": 9}


@dataclass(frozen=True)
class NetworkConfig:
    # (kernel width, output channels) per conv layer, shared by both branches
    convs: tuple[tuple[int, int], ...] = ((5, 16), (5, 32))
    pool: int = 2
    dense: tuple[int, ...] = (64, 32)
    n_times: int = 240
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "convs", tuple(tuple(int(v) for v in c) for c in self.convs))
        object.__setattr__(self, "dense", tuple(int(v) for v in self.dense))
        if not self.convs:
            raise PreconditionError("each branch needs at least one conv layer")
        for k, c in self.convs:
            if k < 1 or k % 2 == 0:
                raise PreconditionError(f"kernel width must be odd, got {k}")
            if c < 1:
                raise PreconditionError("conv channel counts must be >= 1")
        if self.pool < 2:
            raise PreconditionError("pool width must be >= 2")
        if self.feature_length() < 1:
            raise PreconditionError(
                f"n_times={self.n_times} is too short for {len(self.convs)} pooling stages"
            )

    def feature_length(self) -> int:
        t = self.n_times
        for _ in self.convs:
            t //= self.pool
        return t

    def flat_size(self) -> int:
        return 2 * self.convs[-1][1] * self.feature_length()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 40
    delay_augment: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise PreconditionError("learning_rate must be > 0")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise PreconditionError("patience, batch_size and max_epochs must be >= 1")
        if self.delay_augment < 0:
            raise PreconditionError("delay_augment must be >= 0")


@dataclass
class NetworkWeights:
    config: NetworkConfig
    tensors: "OrderedDict[str, np.ndarray]"

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __eq__(self, other):
        if not isinstance(other, NetworkWeights):
            return NotImplemented
        return (self.config == other.config
                and list(self.tensors) == list(other.tensors)
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))

    def validate(self) -> None:
        expected = weight_shapes(self.config)
        if list(expected) != list(self.tensors):
            raise PreconditionError(f"tensor names {list(self.tensors)} do not match the config")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise PreconditionError(f"{name}: shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise PreconditionError(f"{name}: non-finite values")


@dataclass
class Sample:
    aif_input: np.ndarray
    tissue_input: np.ndarray
    target_mbf: float | None
    patient_id: str
    x: int
    y: int


@dataclass
class SampleSet:
    """Stacked samples: ``aif`` is ``(N, 1, T)``, ``tissue`` is ``(N, 9, T)``."""

    aif: np.ndarray
    tissue: np.ndarray
    target: np.ndarray | None = None
    coords: list[tuple[str, int, int]] = field(default_factory=list)

    def __len__(self):
        return self.aif.shape[0]

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.aif[idx], self.tissue[idx],
                         None if self.target is None else self.target[idx],
                         [self.coords[i] for i in np.atleast_1d(idx)] if self.coords else [])

    @staticmethod
    def concat(sets: list["SampleSet"]) -> "SampleSet":
        targets = [s.target for s in sets]
        return SampleSet(
            np.concatenate([s.aif for s in sets]),
            np.concatenate([s.tissue for s in sets]),
            None if any(t is None for t in targets) else np.concatenate(targets),
            [c for s in sets for c in s.coords],
        )


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------


def _neighbour_index(mask: np.ndarray, x: int, y: int) -> list[tuple[int, int]]:
    h, w = mask.shape
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                out.append((yy, xx))
            else:
                out.append((y, x))
    return out


def build_samples(patient: Patient, voxels=None, targets: np.ndarray | None = None) -> SampleSet:
    """Network inputs for the given masked ``(x, y)`` voxels (default: all).

    Tissue channels follow the 3x3 neighbourhood in row-major order; neighbours
    outside the grid or mask repeat the centre curve. AIF and tissue are both
    divided by the AIF peak. ``targets`` is an MBF map indexed ``[y, x]``.
    """
    voxels = patient.voxels() if voxels is None else list(voxels)
    scale = float(np.max(patient.aif.values))
    if not scale > 0:
        raise PreconditionError(f"AIF of {patient.id} has no positive peak")
    n_t = patient.grid.n
    tissue = np.empty((len(voxels), 9, n_t))
    for i, (x, y) in enumerate(voxels):
        if not (0 <= y < patient.mask.shape[0] and 0 <= x < patient.mask.shape[1]) or not patient.mask[y, x]:
            raise PreconditionError(f"voxel ({x}, {y}) of {patient.id} is not masked")
        for c, (yy, xx) in enumerate(_neighbour_index(patient.mask, x, y)):
            tissue[i, c] = patient.tissue[yy, xx]
    tissue /= scale
    aif = np.broadcast_to(patient.aif.values / scale, (len(voxels), 1, n_t)).copy()
    target = None
    if targets is not None:
        target = np.array([targets[y, x] for x, y in voxels], dtype=np.float64)
    return SampleSet(aif, tissue, target, [(patient.id, x, y) for x, y in voxels])


def build_sample(patient: Patient, x: int, y: int, targets: np.ndarray | None = None) -> Sample:
    s = build_samples(patient, [(x, y)], targets)
    return Sample(s.aif[0], s.tissue[0], None if s.target is None else float(s.target[0]),
                  patient.id, x, y)


def shift_samples(arr: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Delay each row of ``(N, C, T)`` by its integer shift, zero-filled."""
    n, _, t = arr.shape
    out = np.zeros_like(arr)
    for s in np.unique(shifts):
        rows = np.nonzero(shifts == s)[0]
        if s >= 0:
            out[rows, :, s:] = arr[rows, :, : t - s]
        else:
            out[rows, :, : t + s] = arr[rows, :, -s:]
    return out


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def weight_shapes(cfg: NetworkConfig) -> "OrderedDict[str, tuple[int, ...]]":
    shapes = OrderedDict()
    for branch in BRANCHES:
        c_in = IN_CHANNELS[branch]
        for i, (k, c_out) in enumerate(cfg.convs):
            shapes[f"{branch}.conv{i}.w"] = (c_out, c_in, k)
            shapes[f"{branch}.conv{i}.b"] = (c_out,)
            c_in = c_out
    n_in = cfg.flat_size()
    for i, width in enumerate(cfg.dense):
        shapes[f"dense{i}.w"] = (n_in, width)
        shapes[f"dense{i}.b"] = (width,)
        n_in = width
    shapes["out.w"] = (n_in, 1)
    shapes["out.b"] = (1,)
    return shapes


def init_weights(cfg: NetworkConfig) -> NetworkWeights:
    """He-normal weights, zero biases, seeded by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    tensors = OrderedDict()
    for name, shape in weight_shapes(cfg).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if ".conv" in name else shape[0]
            tensors[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return NetworkWeights(cfg, tensors)


# Internal activations are channels-last, (B, T, C); weights keep (out, in, k).


def _conv_forward(x, w, b):
    # x: (B, T, C) -> (B, T, O), zero "same" padding, cross-correlation
    bsz, t, c_in = x.shape
    c_out, _, k = w.shape
    pad = k // 2
    xp = np.zeros((bsz, t + 2 * pad, c_in))
    xp[:, pad:pad + t] = x
    cols = np.concatenate([xp[:, j:j + t] for j in range(k)], axis=2).reshape(bsz * t, k * c_in)
    wmat = w.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = cols @ wmat + b
    return out.reshape(bsz, t, c_out), cols


def _conv_backward(dout, cols, w, x_shape, need_dx):
    bsz, t, c_in = x_shape
    c_out, _, k = w.shape
    d2 = dout.reshape(bsz * t, c_out)
    dw = (cols.T @ d2).reshape(k, c_in, c_out).transpose(2, 1, 0)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    wmat = w.transpose(2, 1, 0).reshape(k * c_in, c_out)
    dcols = (d2 @ wmat.T).reshape(bsz, t, k, c_in)
    pad = k // 2
    dxp = np.zeros((bsz, t + 2 * pad, c_in))
    for j in range(k):
        dxp[:, j:j + t] += dcols[:, :, j]
    return dxp[:, pad:pad + t], dw, db


def _pool_forward(x, p):
    # returns pooled (B, T//p, C) and the winning offset within each window
    tp = x.shape[1] // p
    out = x[:, 0:tp * p:p]
    idx = np.zeros(out.shape, dtype=np.int8)
    for j in range(1, p):
        cand = x[:, j:tp * p:p]
        better = cand > out  # strict: the first maximum wins ties
        out = np.where(better, cand, out)
        idx = np.where(better, np.int8(j), idx)
    return np.ascontiguousarray(out), idx


def _pool_backward(dout, idx, p, t):
    bsz, tp, c = dout.shape
    dx = np.zeros((bsz, t, c))
    for j in range(p):
        dx[:, j:tp * p:p] = np.where(idx == j, dout, 0.0)
    return dx


def _check_inputs(weights: NetworkWeights, aif: np.ndarray, tissue: np.ndarray) -> None:
    cfg = weights.config
    for name, arr, ch in (("aif branch", aif, 1), ("tissue branch", tissue, 9)):
        if arr.ndim != 3 or arr.shape[1] != ch or arr.shape[2] != cfg.n_times:
            raise PreconditionError(
                f"{name} input: shape {arr.shape}, expected (N, {ch}, {cfg.n_times})"
            )


def forward(weights: NetworkWeights, aif: np.ndarray, tissue: np.ndarray):
    """Predicted MBF for a batch plus the activation cache for :func:`backward`."""
    _check_inputs(weights, aif, tissue)
    cfg = weights.config
    w = weights.tensors
    cache = {"layers": {}, "dense": []}
    feats = []
    for branch, x in (("aif", aif), ("tissue", tissue)):
        x = np.ascontiguousarray(x.transpose(0, 2, 1))
        for i in range(len(cfg.convs)):
            z, cols = _conv_forward(x, w[f"{branch}.conv{i}.w"], w[f"{branch}.conv{i}.b"])
            a = np.maximum(z, 0.0)
            pooled, idx = _pool_forward(a, cfg.pool)
            cache["layers"][(branch, i)] = (x.shape, cols, z, idx)
            x = pooled
        cache[f"{branch}.shape"] = x.shape
        # flatten channel-major: feature index = channel * T' + time
        feats.append(x.transpose(0, 2, 1).reshape(x.shape[0], -1))
    h = np.concatenate(feats, axis=1)
    cache["split"] = feats[0].shape[1]
    for i in range(len(cfg.dense)):
        z = h @ w[f"dense{i}.w"] + w[f"dense{i}.b"]
        cache["dense"].append((h, z))
        h = np.maximum(z, 0.0)
    cache["head"] = h
    pred = (h @ w["out.w"] + w["out.b"])[:, 0]
    return pred, cache


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def backward(weights: NetworkWeights, pred: np.ndarray, target: np.ndarray, cache) -> "OrderedDict[str, np.ndarray]":
    """Exact gradients of ``mean((pred - target)**2)`` for every tensor."""
    cfg = weights.config
    w = weights.tensors
    if pred.shape != target.shape:
        raise PreconditionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    grads = OrderedDict()
    dpred = 2.0 * (pred - target) / pred.shape[0]
    h = cache["head"]
    grads["out.w"] = h.T @ dpred[:, None]
    grads["out.b"] = np.array([dpred.sum()])
    dh = dpred[:, None] @ w["out.w"].T
    for i in reversed(range(len(cfg.dense))):
        h_in, z = cache["dense"][i]
        dz = dh * (z > 0)
        grads[f"dense{i}.w"] = h_in.T @ dz
        grads[f"dense{i}.b"] = dz.sum(axis=0)
        dh = dz @ w[f"dense{i}.w"].T
    split = cache["split"]
    for branch, dflat in (("aif", dh[:, :split]), ("tissue", dh[:, split:])):
        bsz, tp, c = cache[f"{branch}.shape"]
        dx = dflat.reshape(bsz, c, tp).transpose(0, 2, 1)
        for i in reversed(range(len(cfg.convs))):
            x_shape, cols, z, idx = cache["layers"][(branch, i)]
            da = _pool_backward(dx, idx, cfg.pool, z.shape[1])
            dz = da * (z > 0)
            dx, dw, db = _conv_backward(dz, cols, w[f"{branch}.conv{i}.w"], x_shape, need_dx=i > 0)
            grads[f"{branch}.conv{i}.w"] = dw
            grads[f"{branch}.conv{i}.b"] = db
    return OrderedDict((name, grads[name]) for name in w)


@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    t: int = 0

    @classmethod
    def zeros_like(cls, weights: NetworkWeights) -> "AdamState":
        return cls(OrderedDict((k, np.zeros_like(a)) for k, a in weights.tensors.items()),
                   OrderedDict((k, np.zeros_like(a)) for k, a in weights.tensors.items()))


def adam_step(weights: NetworkWeights, grads, state: AdamState, t: int, cfg: TrainConfig) -> tuple[NetworkWeights, AdamState]:
    """One bias-corrected Adam update (step number ``t`` starts at 1)."""
    if t < 1:
        raise PreconditionError("Adam step counter must start at 1")
    new_w = OrderedDict()
    new_m = OrderedDict()
    new_v = OrderedDict()
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in weights.tensors.items():
        g = grads[name]
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        new_w[name] = p - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_m[name] = m
        new_v[name] = v
    return NetworkWeights(weights.config, new_w), AdamState(new_m, new_v, t)


def predict(weights: NetworkWeights, samples: SampleSet, batch_size: int = 1024) -> np.ndarray:
    out = np.empty(len(samples))
    for start in range(0, len(samples), batch_size):
        sl = slice(start, start + batch_size)
        out[sl], _ = forward(weights, samples.aif[sl], samples.tissue[sl])
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class History:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    loss_hashes: list[str] = field(default_factory=list)


def train(train_set: SampleSet, val_set: SampleSet, net_cfg: NetworkConfig,
          train_cfg: TrainConfig, progress=None) -> tuple[NetworkWeights, History]:
    """Mini-batch Adam with seeded shuffling, delay augmentation and early stopping.

    Returns the weights of the epoch with the lowest validation MSE. Epochs
    are numbered from 1; training stops once ``patience`` epochs pass without
    a strict improvement.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise PreconditionError("training and validation sets must be nonempty")
    if train_set.target is None or val_set.target is None:
        raise PreconditionError("training and validation samples need targets")
    rng = np.random.default_rng(train_cfg.seed)
    weights = init_weights(net_cfg)
    # start the linear head at the mean target so early epochs fit shape, not offset
    weights.tensors["out.b"][:] = float(np.mean(train_set.target))
    state = AdamState.zeros_like(weights)
    history = History()
    best = weights.copy()
    best_val = math.inf
    step = 0
    n = len(train_set)
    d = train_cfg.delay_augment
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(n)
        shifts = rng.integers(-d, d + 1, size=n) if d > 0 else np.zeros(n, dtype=int)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            aif = train_set.aif[idx]
            tissue = train_set.tissue[idx]
            if d > 0:
                aif = shift_samples(aif, shifts[idx])
                tissue = shift_samples(tissue, shifts[idx])
            pred, cache = forward(weights, aif, tissue)
            loss = mse(pred, train_set.target[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"diverged at epoch {epoch}")
            total += loss * len(idx)
            grads = backward(weights, pred, train_set.target[idx], cache)
            step += 1
            weights, state = adam_step(weights, grads, state, step, train_cfg)
        val = mse(predict(weights, val_set), val_set.target)
        if not math.isfinite(val):
            raise DivergenceError(f"diverged at epoch {epoch}")
        history.train_mse.append(total / n)
        history.val_mse.append(val)
        history.loss_hashes.append(
            hashlib.sha256(np.array([total / n, val]).tobytes()).hexdigest()[:16]
        )
        if val < best_val:
            best_val = val
            best = weights.copy()
            history.best_epoch = epoch
        if progress is not None and epoch % 10 == 0:
            progress(f"epoch {epoch}: train {total / n:.5f} val {val:.5f}")
        history.stopped_epoch = epoch
        if epoch - history.best_epoch >= train_cfg.patience:
            break
    return best, history


def predict_map(weights: NetworkWeights, patient: Patient) -> np.ndarray:
    """Predicted MBF map; NaN outside the mask, negative predictions clamped to 0."""
    if patient.grid.n != weights.config.n_times:
        raise PreconditionError(
            f"patient {patient.id} has {patient.grid.n} time points, network expects "
            f"{weights.config.n_times}"
        )
    samples = build_samples(patient)
    pred = np.maximum(predict(weights, samples), 0.0)
    out = np.full(patient.shape, np.nan)
    for (_, x, y), v in zip(samples.coords, pred):
        out[y, x] = v
    return out


