"""Adaptive component-wise Metropolis sampling of the 2CXM posterior.

The chain runs in transformed coordinates: log for ``fp``, ``ps`` and the
noise level, logit-to-bounds for ``vp``, ``ve`` and ``delay``. Proposal
scales adapt during burn-in only.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import PreconditionError
from .kinetics import Curve, KineticParams, _phi, residue_terms, shift_into, tissue_into
from .nlls import Bounds
from .phantom import PhantomDataset, Patient, derive_seed

PARAM_NAMES = ("fp", "ps", "vp", "ve", "delay", "log_sigma")
# coordinate transform per parameter: 0 = log, 1 = logit-to-bounds, 2 = identity
_LOG, _LOGIT, _IDENT = 0, 1, 2
_KINDS = np.array([_LOG, _LOG, _LOGIT, _LOGIT, _LOGIT, _IDENT])

_MODEL_2CXM = 0
_MODEL_GAUSS = 1


@dataclass(frozen=True)
class Prior:
    """Box prior: log-uniform ``fp``/``ps``, uniform ``vp``/``ve``/``delay``, log-uniform sigma."""

    bounds: Bounds = Bounds()
    log_sigma: tuple[float, float] = (math.log(1e-4), math.log(1.0))

    def __post_init__(self):
        lo, hi = self.log_sigma
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise PreconditionError("log_sigma prior interval must be nonempty")
        if self.bounds.fp[0] <= 0 or self.bounds.ps[0] <= 0:
            raise PreconditionError("log-uniform priors need strictly positive fp/ps bounds")

    @property
    def lo(self) -> np.ndarray:
        return np.append(self.bounds.lo, self.log_sigma[0])

    @property
    def hi(self) -> np.ndarray:
        return np.append(self.bounds.hi, self.log_sigma[1])

    def medians(self) -> np.ndarray:
        """Prior medians in natural coordinates (geometric mean for log-uniform)."""
        lo, hi = self.lo, self.hi
        med = 0.5 * (lo + hi)
        med[:2] = np.sqrt(lo[:2] * hi[:2])
        return med

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        lo, hi = self.lo, self.hi
        out = rng.uniform(lo, hi, size=(size, 6))
        out[:, :2] = np.exp(rng.uniform(np.log(lo[:2]), np.log(hi[:2]), size=(size, 2)))
        return out


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 20_000
    burn_in: int = 10_000
    thin: int = 10
    target_accept: float = 0.234
    adapt_window: int = 200
    seed: int = 0
    # initial proposal standard deviation in transformed coordinates
    init_scale: float = 0.1

    def __post_init__(self):
        if self.burn_in < 0 or self.burn_in >= self.n_iter:
            raise PreconditionError("burn_in must lie in [0, n_iter)")
        if self.thin < 1 or self.adapt_window < 1:
            raise PreconditionError("thin and adapt_window must be >= 1")
        if not 0 < self.target_accept < 1:
            raise PreconditionError("target_accept must lie in (0, 1)")

    @property
    def n_kept(self) -> int:
        return (self.n_iter - self.burn_in + self.thin - 1) // self.thin


@dataclass(eq=False)
class Posterior:
    samples: np.ndarray = field(repr=False)
    summary: dict[str, dict[str, float]]
    accept_rate: float

    def __eq__(self, other):
        if not isinstance(other, Posterior):
            return NotImplemented
        return (np.array_equal(self.samples, other.samples)
                and self.summary == other.summary
                and self.accept_rate == other.accept_rate)

    @property
    def mbf(self) -> float:
        """Posterior median of ``fp``, the training target."""
        return self.summary["fp"]["median"]


# ---------------------------------------------------------------------------
# compiled chain
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _to_natural(x, lo, hi, kinds, theta):
    for k in range(x.shape[0]):
        if kinds[k] == _LOG:
            theta[k] = math.exp(x[k])
        elif kinds[k] == _LOGIT:
            theta[k] = lo[k] + (hi[k] - lo[k]) / (1.0 + math.exp(-x[k]))
        else:
            theta[k] = x[k]


@numba.njit(cache=True)
def _fused_rss(shifted, target, dt, fp, ps, vp, ve, out):
    """Residual sum of squares of the 2CXM curve against ``target``."""
    a1, b1, l1, a2, b2, l2 = residue_terms(fp, ps, vp, ve)
    n = target.shape[0]
    if b1 != 0.0 or b2 != 0.0:
        tissue_into(shifted, dt, fp, ps, vp, ve, out)
        rss = 0.0
        for i in range(n):
            r = target[i] - out[i]
            rss += r * r
        return rss
    # both terms purely exponential: one pass, same recursion as tissue_into
    x1 = l1 * dt
    x2 = l2 * dt
    e1 = math.exp(-x1)
    e2 = math.exp(-x2)
    f1 = _phi(1, x1)
    f2 = _phi(1, x2)
    p01 = a1 * dt * (_phi(0, x1) - f1)
    p11 = a1 * dt * f1
    p02 = a2 * dt * (_phi(0, x2) - f2)
    p12 = a2 * dt * f2
    P1 = 0.0
    P2 = 0.0
    rss = target[0] * target[0]
    for i in range(n - 1):
        u0 = shifted[i]
        u1 = shifted[i + 1]
        P1 = e1 * P1 + p01 * u1 + p11 * u0
        P2 = e2 * P2 + p02 * u1 + p12 * u0
        r = target[i + 1] - (P1 + P2)
        rss += r * r
    return rss


@numba.njit(cache=True)
def _log_prior_jac(x, kinds, lo, hi, theta):
    """Log prior plus log |d theta / dx|, up to a constant; fills ``theta``."""
    _to_natural(x, lo, hi, kinds, theta)
    logjac = 0.0
    for k in range(x.shape[0]):
        if kinds[k] == _LOGIT:
            # uniform prior on theta; d theta / dx = (hi - lo) s (1 - s)
            ax = abs(x[k])
            if ax > 700.0:
                return -np.inf
            logjac += -ax - 2.0 * math.log1p(math.exp(-ax))
            if theta[k] <= lo[k] or theta[k] >= hi[k]:
                return -np.inf
        elif theta[k] < lo[k] or theta[k] > hi[k]:
            return -np.inf
    return logjac


@numba.njit(cache=True)
def _whitening_basis(history, lo_row, hi_row, nrot):
    """Scaled eigenvectors of the covariance of ``history[lo_row:hi_row, :nrot]``."""
    seg = history[lo_row:hi_row, :nrot]
    m = seg.shape[0]
    mean = np.zeros(nrot)
    for i in range(m):
        mean += seg[i]
    mean /= m
    cov = np.zeros((nrot, nrot))
    for i in range(m):
        d = seg[i] - mean
        cov += np.outer(d, d)
    cov /= max(m - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    top = vals.max()
    basis = np.eye(nrot)
    if not top > 0.0:
        return basis, False
    for k in range(nrot):
        lam = max(vals[k], 1e-8 * top)
        basis[:, k] = vecs[:, k] * math.sqrt(lam)
    return basis, True


@numba.njit(cache=True)
def _run_chain(model, x0, scale0, normals, logu, burn_in, thin, target_accept,
               adapt_window, kinds, lo, hi, aif, target, dt, log_sigma):
    """Component-wise adaptive random-walk Metropolis.

    ``model`` selects the 2CXM posterior or a 1-D Gaussian test density
    (mean ``aif[0]``, std ``aif[1]``). For the 2CXM, ``x`` holds the five
    kinetic coordinates, followed by log sigma unless ``log_sigma`` is finite
    (then sigma is fixed).

    Each iteration updates one direction at a time. Directions start as the
    coordinate axes; at 1/2 and 3/4 of burn-in the kinetic block is
    re-based on the scaled eigenvectors of the recent burn-in covariance.
    Proposal scales adapt every ``adapt_window`` iterations during burn-in and
    are frozen afterwards.
    """
    n_iter, ncomp = normals.shape
    n = target.shape[0]
    nrot = min(ncomp, 5)
    x = x0.copy()
    xp = x0.copy()
    scale = scale0.copy()
    basis = np.eye(nrot)
    theta = np.empty(ncomp)
    shifted = np.empty(aif.shape[0])
    shifted_prop = np.empty(aif.shape[0])
    out = np.empty(aif.shape[0])
    fixed_sigma = math.isfinite(log_sigma)
    history = np.empty((burn_in, ncomp))
    stage1 = burn_in // 2
    stage2 = (3 * burn_in) // 4

    rss = 0.0
    if model == _MODEL_GAUSS:
        z = (x[0] - aif[0]) / aif[1]
        lp = -0.5 * z * z
    else:
        lpj = _log_prior_jac(x, kinds, lo, hi, theta)
        ls = log_sigma if fixed_sigma else theta[5]
        shift_into(aif, dt, theta[4], shifted)
        rss = _fused_rss(shifted, target, dt, theta[0], theta[1], theta[2], theta[3], out)
        lp = -n * ls - 0.5 * rss * math.exp(-2.0 * ls) + lpj

    n_keep = (n_iter - burn_in + thin - 1) // thin
    kept = np.empty((n_keep, ncomp))
    window_acc = np.zeros(ncomp)
    post_acc = 0
    j = 0
    for i in range(n_iter):
        for k in range(ncomp):
            step = scale[k] * normals[i, k]
            if k < nrot:
                for c in range(nrot):
                    xp[c] = x[c] + step * basis[c, k]
            else:
                xp[k] = x[k] + step
            rss_new = rss
            if model == _MODEL_GAUSS:
                z = (xp[0] - aif[0]) / aif[1]
                lp_new = -0.5 * z * z
            else:
                lpj = _log_prior_jac(xp, kinds, lo, hi, theta)
                if lpj == -np.inf:
                    lp_new = -np.inf
                else:
                    ls = log_sigma if fixed_sigma else theta[5]
                    if k < nrot:
                        if xp[4] != x[4]:
                            shift_into(aif, dt, theta[4], shifted_prop)
                            rss_new = _fused_rss(shifted_prop, target, dt, theta[0], theta[1],
                                                 theta[2], theta[3], out)
                        else:
                            rss_new = _fused_rss(shifted, target, dt, theta[0], theta[1],
                                                 theta[2], theta[3], out)
                    lp_new = -n * ls - 0.5 * rss_new * math.exp(-2.0 * ls) + lpj
            if logu[i, k] < lp_new - lp:
                lp = lp_new
                rss = rss_new
                if model != _MODEL_GAUSS and k < nrot and xp[4] != x[4]:
                    tmp = shifted
                    shifted = shifted_prop
                    shifted_prop = tmp
                for c in range(ncomp):
                    x[c] = xp[c]
                if i < burn_in:
                    window_acc[k] += 1
                else:
                    post_acc += 1
            else:
                for c in range(ncomp):
                    xp[c] = x[c]
        if i < burn_in:
            history[i] = x
            if (i + 1) % adapt_window == 0:
                for k in range(ncomp):
                    rate = window_acc[k] / adapt_window
                    scale[k] *= math.exp(2.0 * (rate - target_accept))
                    window_acc[k] = 0.0
            if (i + 1 == stage1 or i + 1 == stage2) and stage1 >= 8:
                lo_row = stage1 // 2 if i + 1 == stage1 else stage1
                new_basis, ok = _whitening_basis(history, lo_row, i + 1, nrot)
                if ok:
                    basis = new_basis
                    for k in range(nrot):
                        scale[k] = 2.4
        elif (i - burn_in) % thin == 0:
            kept[j, :] = x
            j += 1
    return kept, post_acc, scale


def _summarize(samples: np.ndarray, names=PARAM_NAMES) -> dict[str, dict[str, float]]:
    p25, med, p75 = np.percentile(samples, [25, 50, 75], axis=0)
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    return {
        name: {"median": float(med[k]), "p25": float(p25[k]), "p75": float(p75[k]),
               "mean": float(mean[k]), "std": float(std[k])}
        for k, name in enumerate(names)
    }


def _draws(cfg: McmcConfig, ncomp: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    normals = rng.standard_normal((cfg.n_iter, ncomp))
    logu = np.log(rng.random((cfg.n_iter, ncomp)))
    return normals, logu


def _check_cfg(cfg: McmcConfig) -> None:
    if cfg.n_kept < 100:
        raise PreconditionError(
            f"chain keeps only {cfg.n_kept} samples after burn-in/thinning; need >= 100"
        )


def _to_unbounded(theta: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    x = np.empty_like(theta)
    for k, kind in enumerate(_KINDS[: theta.size]):
        if kind == _LOG:
            x[k] = math.log(theta[k])
        elif kind == _LOGIT:
            u = (theta[k] - lo[k]) / (hi[k] - lo[k])
            x[k] = math.log(u) - math.log1p(-u)
        else:
            x[k] = theta[k]
    return x


def initial_state(aif: Curve, tissue: Curve, prior: Prior) -> np.ndarray:
    """Chain start in natural coordinates: the bounded least-squares optimum.

    Noise-free or low-noise posteriors are narrow ridges that a component-wise
    random walk cannot find from the prior centre within a practical burn-in.
    Parameters are pulled 0.1% of the prior width inside the box and sigma is
    the rms residual of the fit.
    """
    from .nlls import FitConfig, fit_nlls

    fit = fit_nlls(aif, tissue, FitConfig(bounds=prior.bounds, max_iter=100))
    lo, hi = prior.lo, prior.hi
    margin = 1e-3 * (hi - lo)
    theta = np.empty(6)
    theta[:5] = np.clip(fit.params.as_tuple(), lo[:5] + margin[:5], hi[:5] - margin[:5])
    rms = math.sqrt(fit.rss / aif.grid.n)
    theta[5] = np.clip(math.log(max(rms, 1e-300)), lo[5] + margin[5], hi[5] - margin[5])
    return theta


def log_posterior(params: KineticParams, log_sigma: float, aif: Curve, tissue: Curve,
                  prior: Prior | None = None) -> float:
    """Unnormalized log posterior in natural coordinates.

    ``-n log(sigma) - RSS / (2 sigma^2)`` plus the log prior: ``-log(fp) -
    log(ps)`` for the log-uniform parameters, constant for the rest, and
    ``-inf`` outside the prior support.
    """
    prior = prior or Prior()
    theta = np.array(params.as_tuple() + (log_sigma,))
    if np.any(theta < prior.lo) or np.any(theta > prior.hi):
        return -math.inf
    shifted = np.empty(aif.grid.n)
    out = np.empty(aif.grid.n)
    shift_into(np.ascontiguousarray(aif.values), aif.grid.dt, params.delay, shifted)
    tissue_into(shifted, aif.grid.dt, params.fp, params.ps, params.vp, params.ve, out)
    rss = float(np.sum((tissue.values - out) ** 2))
    n = aif.grid.n
    return -n * log_sigma - 0.5 * rss * math.exp(-2 * log_sigma) - math.log(params.fp) - math.log(params.ps)


def run_mcmc(aif: Curve, tissue: Curve, prior: Prior | None = None,
             cfg: McmcConfig | None = None, fixed_sigma: float | None = None) -> Posterior:
    """Sample the posterior of one voxel; deterministic given ``cfg.seed``.

    With ``fixed_sigma`` the noise level is held at that value and the
    ``log_sigma`` column of the samples is constant.
    """
    prior = prior or Prior()
    cfg = cfg or McmcConfig()
    if aif.grid != tissue.grid:
        raise PreconditionError("aif and tissue must share a time grid")
    if prior.bounds.delay[1] >= aif.grid.duration:
        raise PreconditionError("delay exceeds acquisition window")
    _check_cfg(cfg)
    lo, hi = prior.lo, prior.hi
    ncomp = 6
    log_sigma = math.nan
    if fixed_sigma is not None:
        if not fixed_sigma > 0:
            raise PreconditionError("fixed_sigma must be > 0")
        ncomp = 5
        log_sigma = math.log(fixed_sigma)
    theta0 = initial_state(aif, tissue, prior)
    x0 = _to_unbounded(theta0[:ncomp], lo, hi)
    normals, logu = _draws(cfg, ncomp)
    kept, acc, _ = _run_chain(
        _MODEL_2CXM, x0, np.full(ncomp, cfg.init_scale), normals, logu, cfg.burn_in,
        cfg.thin, cfg.target_accept, cfg.adapt_window, _KINDS[:ncomp], lo[:ncomp],
        hi[:ncomp], np.ascontiguousarray(aif.values), np.ascontiguousarray(tissue.values),
        aif.grid.dt, log_sigma,
    )
    samples = np.empty((kept.shape[0], 6))
    samples[:, 5] = log_sigma
    for row in range(kept.shape[0]):
        _to_natural(kept[row], lo[:ncomp], hi[:ncomp], _KINDS[:ncomp], samples[row, :ncomp])
    rate = acc / (ncomp * (cfg.n_iter - cfg.burn_in))
    return Posterior(samples=samples, summary=_summarize(samples), accept_rate=rate)


def sample_gaussian_stub(mean: float, std: float, cfg: McmcConfig, x0: float = 0.0) -> np.ndarray:
    """Run the sampler on a 1-D Gaussian log density; used to smoke-test the chain."""
    _check_cfg(cfg)
    normals, logu = _draws(cfg, 1)
    kept, _, _ = _run_chain(
        _MODEL_GAUSS, np.array([x0]), np.array([cfg.init_scale]), normals, logu,
        cfg.burn_in, cfg.thin, cfg.target_accept, cfg.adapt_window,
        np.array([_IDENT]), np.array([-np.inf]), np.array([np.inf]),
        np.array([mean, std]), np.zeros(1), 1.0, math.nan,
    )
    return kept[:, 0]


# ---------------------------------------------------------------------------
# dataset labelling
# ---------------------------------------------------------------------------


@dataclass
class LabelResult:
    """Per-patient posterior-median MBF maps (NaN outside the mask)."""

    maps: dict[str, np.ndarray]
    pooled: dict[str, float]
    seconds: float = 0.0
    n_voxels: int = 0


def voxel_seed(seed: int, patient_id: str, x: int, y: int) -> int:
    return derive_seed("mcmc", seed, patient_id, x, y)


def _label_voxels(aif: Curve, patient: Patient, voxels, prior: Prior, cfg: McmcConfig):
    out = []
    for x, y in voxels:
        vcfg = McmcConfig(**{**cfg.__dict__, "seed": voxel_seed(cfg.seed, patient.id, x, y)})
        try:
            post = run_mcmc(aif, patient.tissue_curve(x, y), prior, vcfg)
        except Exception as exc:
            raise type(exc)(f"voxel ({x}, {y}) of {patient.id}: {exc}") from exc
        out.append(post.mbf)
    return out


def _label_chunk(args):
    patient, voxels, prior, cfg = args
    return _label_voxels(patient.aif, patient, voxels, prior, cfg)


def pooled_summary(maps: dict[str, np.ndarray], masks: dict[str, np.ndarray]) -> dict[str, float]:
    values = np.concatenate([maps[k][masks[k]] for k in maps])
    p25, med, p75 = np.percentile(values, [25, 50, 75])
    return {"median": float(med), "p25": float(p25), "p75": float(p75)}


def label_patient(patient: Patient, prior: Prior | None = None, cfg: McmcConfig | None = None,
                  workers: int = 1, progress=None) -> np.ndarray:
    prior = prior or Prior()
    cfg = cfg or McmcConfig()
    voxels = patient.voxels()
    target = np.full(patient.shape, np.nan)
    if workers > 1 and len(voxels) > 1:
        chunks = [voxels[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_label_chunk, [(patient, c, prior, cfg) for c in chunks]))
        for chunk, vals in zip(chunks, results):
            for (x, y), v in zip(chunk, vals):
                target[y, x] = v
    else:
        for (x, y), v in zip(voxels, _label_voxels(patient.aif, patient, voxels, prior, cfg)):
            target[y, x] = v
    if progress is not None:
        progress(f"labelled {patient.id}: {len(voxels)} voxels")
    return target


def label_dataset(dataset: PhantomDataset, prior: Prior | None = None,
                  cfg: McmcConfig | None = None, workers: int = 1, progress=None) -> LabelResult:
    """Posterior-median MBF for every masked voxel of every patient.

    Each voxel's chain is seeded from ``(cfg.seed, patient_id, x, y)``, so
    results do not depend on ``workers`` or on processing order.
    """
    import time

    start = time.perf_counter()
    maps = {p.id: label_patient(p, prior, cfg, workers, progress) for p in dataset.patients}
    masks = {p.id: p.mask for p in dataset.patients}
    return LabelResult(maps=maps, pooled=pooled_summary(maps, masks),
                       seconds=time.perf_counter() - start, n_voxels=dataset.voxel_count())
