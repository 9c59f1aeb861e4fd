"""Experiment orchestration: split plans, cross-validated training, metrics
and the MCMC-versus-surrogate timing benchmark."""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cnn import NetworkConfig, NetworkWeights, SampleSet, TrainConfig, build_samples, predict, predict_map, train
from .errors import DivergenceError, PreconditionError
from .mcmc import McmcConfig, Prior, label_patient, run_mcmc
from .phantom import Patient, PhantomDataset, derive_seed

MAX_SPLIT_ATTEMPTS = 100_000


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    splits: tuple[Split, ...]

    def __len__(self):
        return len(self.splits)

    def __iter__(self):
        return iter(self.splits)

    def test_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.splits:
            for pid in s.train + s.val + s.test:
                counts.setdefault(pid, 0)
            for pid in s.test:
                counts[pid] += 1
        return counts


def make_splits(patient_ids, seed: int, sizes: tuple[int, int, int] = (5, 2, 2),
                n_splits: int = 10) -> SplitPlan:
    """Random train/val/test partitions in which every patient is tested at least once.

    Whole plans are drawn and rejected until the coverage constraint holds.
    """
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise PreconditionError("patient ids must be distinct")
    if len(ids) != sum(sizes) or min(sizes) < 1:
        raise PreconditionError(f"{len(ids)} ids cannot be split into sizes {sizes}")
    if n_splits < 1:
        raise PreconditionError("n_splits must be >= 1")
    n_train, n_val, _ = sizes
    rng = np.random.default_rng(derive_seed("splits", seed))
    for _ in range(MAX_SPLIT_ATTEMPTS):
        splits = []
        for _ in range(n_splits):
            perm = [ids[i] for i in rng.permutation(len(ids))]
            splits.append(Split(tuple(perm[:n_train]), tuple(perm[n_train:n_train + n_val]),
                                tuple(perm[n_train + n_val:])))
        plan = SplitPlan(tuple(splits))
        if min(plan.test_counts().values()) >= 1:
            return plan
    raise RuntimeError(f"no split plan with full test coverage after {MAX_SPLIT_ATTEMPTS} attempts")


@dataclass(frozen=True)
class MapMetrics:
    mse: float
    rel_error: float
    pred_median: float
    pred_p25: float
    pred_p75: float
    n_voxels: int


def evaluate_values(pred: np.ndarray, target: np.ndarray) -> MapMetrics:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise PreconditionError("cannot evaluate an empty mask")
    if pred.shape != target.shape:
        raise PreconditionError("prediction and target sizes differ")
    err = pred - target
    p25, med, p75 = np.percentile(pred, [25, 50, 75])
    return MapMetrics(
        mse=float(np.mean(err**2)),
        rel_error=float(np.mean(np.abs(err)) / np.median(target)),
        pred_median=float(med), pred_p25=float(p25), pred_p75=float(p75),
        n_voxels=int(pred.size),
    )


def evaluate_maps(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> MapMetrics:
    """MSE, mean relative error (denominator: target median) and prediction quartiles.

    Without ``mask`` the finite cells of ``target`` are used; the prediction
    must be finite on exactly those cells.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise PreconditionError(f"map shapes differ: {pred.shape} vs {target.shape}")
    if mask is None:
        mask = np.isfinite(target)
        if not np.array_equal(mask, np.isfinite(pred)):
            raise PreconditionError("prediction and target maps cover different masks")
    if not np.any(mask):
        raise PreconditionError("cannot evaluate an empty mask")
    return evaluate_values(pred[mask], target[mask])


@dataclass
class SplitMetrics:
    index: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    mse: float
    rel_error: float
    pred_median: float
    pred_p25: float
    pred_p75: float
    best_epoch: int = 0
    stopped_epoch: int = 0


@dataclass
class Timing:
    n_voxels: int
    workers: int
    mcmc_seconds: float
    surrogate_seconds: float
    mcmc_seconds_per_voxel: float
    surrogate_seconds_per_voxel: float
    speedup: float
    # both timed paths covered exactly the same voxels
    identical_voxels: bool = True


@dataclass
class EvalReport:
    splits: list[SplitMetrics]
    timing: Timing | None = None
    # per split: {patient id: predicted map} for the test patients; not serialized
    predictions: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False, compare=False)
    weights: list[NetworkWeights] = field(default_factory=list, repr=False, compare=False)

    @property
    def mean_mse(self) -> float:
        return float(np.mean([s.mse for s in self.splits]))

    @property
    def std_mse(self) -> float:
        # population standard deviation over the splits
        return float(np.std([s.mse for s in self.splits]))

    @property
    def mean_rel_error(self) -> float:
        return float(np.mean([s.rel_error for s in self.splits]))

    def mse_line(self) -> str:
        return f"{self.mean_mse:.3f} ({self.std_mse:.3f})"


def sample_set(dataset: PhantomDataset, ids, targets: dict[str, np.ndarray]) -> SampleSet:
    return SampleSet.concat([build_samples(dataset[pid], targets=targets[pid]) for pid in ids])


def predict_maps(weights: NetworkWeights, patients: list[Patient]) -> dict[str, np.ndarray]:
    return {p.id: predict_map(weights, p) for p in patients}


def split_seed(seed: int, split: Split) -> int:
    # identical splits get identical seeds, distinct splits independent ones
    return derive_seed("train", seed, ",".join(split.train), ",".join(split.val))


def run_crossval(dataset: PhantomDataset, targets: dict[str, np.ndarray], plan: SplitPlan,
                 net_cfg: NetworkConfig | None = None, train_cfg: TrainConfig | None = None,
                 progress=None) -> EvalReport:
    """Train on each split's training patients, early-stop on validation, score on test."""
    net_cfg = net_cfg or NetworkConfig(n_times=dataset.patients[0].grid.n)
    train_cfg = train_cfg or TrainConfig()
    missing = [pid for pid in dataset.ids if pid not in targets]
    if missing:
        raise PreconditionError(f"no targets for patients {missing}")
    report = EvalReport([])
    for i, split in enumerate(plan, start=1):
        seed = split_seed(train_cfg.seed, split)
        s_net = NetworkConfig(**{**net_cfg.__dict__, "seed": seed})
        s_train = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
        tr = sample_set(dataset, split.train, targets)
        va = sample_set(dataset, split.val, targets)
        try:
            weights, hist = train(tr, va, s_net, s_train)
        except DivergenceError as exc:
            raise DivergenceError(f"split {i}: {exc}") from exc
        preds = predict_maps(weights, [dataset[pid] for pid in split.test])
        m = evaluate_values(
            np.concatenate([preds[pid][dataset[pid].mask] for pid in split.test]),
            np.concatenate([targets[pid][dataset[pid].mask] for pid in split.test]),
        )
        report.splits.append(SplitMetrics(
            i, split.train, split.val, split.test, m.mse, m.rel_error,
            m.pred_median, m.pred_p25, m.pred_p75, hist.best_epoch, hist.stopped_epoch,
        ))
        report.predictions.append(preds)
        report.weights.append(weights)
        if progress is not None:
            progress(f"split {i}/{len(plan)}: test {','.join(split.test)} mse {m.mse:.4f} "
                     f"rel {m.rel_error:.4f} (best epoch {hist.best_epoch})")
    return report


def _predict_chunk(args):
    weights, patient, voxels = args
    samples = build_samples(patient, voxels)
    predict(weights, samples)
    return [(x, y) for _, x, y in samples.coords]


def benchmark(patient: Patient, weights: NetworkWeights, prior: Prior | None = None,
              mcmc_cfg: McmcConfig | None = None, workers: int = 1, voxels=None) -> Timing:
    """Wall-clock MCMC labelling and surrogate prediction on the same voxels.

    Both paths run with ``workers`` processes. Compilation is warmed up
    before timing.
    """
    prior = prior or Prior()
    mcmc_cfg = mcmc_cfg or McmcConfig()
    voxels = patient.voxels() if voxels is None else list(voxels)
    if not voxels:
        raise PreconditionError("benchmark needs at least one voxel")
    # warm-up: compile kernels outside the timed regions
    x0, y0 = voxels[0]
    run_mcmc(patient.aif, patient.tissue_curve(x0, y0), prior,
             McmcConfig(n_iter=2000, burn_in=1000, seed=mcmc_cfg.seed))
    predict(weights, build_samples(patient, voxels[:1]))

    sub = Patient(patient.id, patient.aif, np.zeros_like(patient.mask), patient.tissue,
                  patient.truth, patient.spec)
    for x, y in voxels:
        sub.mask[y, x] = True
    if len(set(voxels)) != len(voxels) or set(sub.voxels()) != set(voxels):
        raise PreconditionError("benchmark voxels must be distinct masked voxels")

    start = time.perf_counter()
    labelled = label_patient(sub, prior, mcmc_cfg, workers)
    mcmc_s = time.perf_counter() - start
    mcmc_voxels = {(int(x), int(y)) for y, x in zip(*np.nonzero(np.isfinite(labelled)))}

    start = time.perf_counter()
    if workers > 1:
        chunks = [voxels[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = [v for c in pool.map(_predict_chunk, [(weights, patient, c) for c in chunks]) for v in c]
    else:
        done = _predict_chunk((weights, patient, voxels))
    sur_s = time.perf_counter() - start

    n = len(voxels)
    return Timing(n, workers, mcmc_s, sur_s, mcmc_s / n, sur_s / n,
                  mcmc_s / sur_s if sur_s > 0 else math.inf,
                  mcmc_voxels == set(done) == set(voxels))
