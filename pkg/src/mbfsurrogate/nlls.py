"""Bounded Levenberg-Marquardt fitting of 2CXM parameters to one voxel."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .kinetics import Curve, KineticParams, shift_into, tissue_into


@dataclass(frozen=True)
class Bounds:
    """Closed per-parameter intervals, in :attr:`KineticParams.NAMES` order."""

    fp: tuple[float, float] = (0.1, 6.0)
    ps: tuple[float, float] = (0.01, 3.0)
    vp: tuple[float, float] = (0.005, 0.2)
    ve: tuple[float, float] = (0.01, 0.5)
    delay: tuple[float, float] = (0.0, 0.2)

    def __post_init__(self):
        for name in KineticParams.NAMES:
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise PreconditionError(f"bounds for {name} must be a nonempty interval")
        if self.fp[0] <= 0 or self.vp[0] <= 0 or self.ve[0] <= 0:
            raise PreconditionError("fp, vp and ve bounds must be strictly positive")
        if self.ps[0] < 0 or self.delay[0] < 0:
            raise PreconditionError("ps and delay bounds must be nonnegative")
        if self.vp[1] + self.ve[1] > 1:
            raise PreconditionError("vp and ve upper bounds allow vp + ve > 1")

    @property
    def lo(self) -> np.ndarray:
        return np.array([getattr(self, n)[0] for n in KineticParams.NAMES])

    @property
    def hi(self) -> np.ndarray:
        return np.array([getattr(self, n)[1] for n in KineticParams.NAMES])

    def midpoint(self) -> KineticParams:
        return KineticParams(*(0.5 * (self.lo + self.hi)))

    def contains(self, params: KineticParams) -> bool:
        v = np.array(params.as_tuple())
        return bool(np.all(v >= self.lo) and np.all(v <= self.hi))


@dataclass(frozen=True)
class FitConfig:
    bounds: Bounds = Bounds()
    init: KineticParams | None = None  # None: bounds midpoint
    max_iter: int = 200
    lambda0: float = 1e-3
    tol_step: float = 1e-10
    tol_grad: float = 1e-10
    # additional seeded random starts; the best final rss wins
    multistart: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise PreconditionError("max_iter must be >= 1")
        if self.tol_step <= 0 or self.tol_grad <= 0 or self.lambda0 <= 0:
            raise PreconditionError("tolerances and lambda0 must be > 0")
        if self.init is not None and not self.bounds.contains(self.init):
            raise PreconditionError(f"init {self.init} lies outside the bounds")

    @property
    def start(self) -> KineticParams:
        return self.init if self.init is not None else self.bounds.midpoint()


@dataclass
class FitResult:
    params: KineticParams
    rss: float
    n_iter: int
    converged: bool
    # rss after each accepted step, starting with the initial value
    trace: list[float] = field(default_factory=list, repr=False)
    # parameter vectors of every accepted iterate
    path: list[KineticParams] = field(default_factory=list, repr=False)


class _Transform:
    """Logistic map from unbounded coordinates onto the box ``[lo, hi]``."""

    def __init__(self, bounds: Bounds):
        self.lo = bounds.lo
        self.width = bounds.hi - bounds.lo

    def to_params(self, z: np.ndarray) -> np.ndarray:
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.clip(self.lo + self.width * s, self.lo, self.lo + self.width)

    def to_unbounded(self, theta: np.ndarray) -> np.ndarray:
        u = (theta - self.lo) / self.width
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        return np.log(u) - np.log1p(-u)


class _Model:
    def __init__(self, aif: Curve, tissue: Curve):
        self.aif = np.ascontiguousarray(aif.values)
        self.target = np.ascontiguousarray(tissue.values)
        self.dt = aif.grid.dt
        self._shifted = np.empty_like(self.aif)
        self._out = np.empty_like(self.aif)

    def residual(self, theta: np.ndarray) -> np.ndarray:
        fp, ps, vp, ve, delay = theta
        shift_into(self.aif, self.dt, delay, self._shifted)
        tissue_into(self._shifted, self.dt, fp, ps, vp, ve, self._out)
        return self.target - self._out


def _lm(model: _Model, tf: _Transform, z: np.ndarray, cfg: FitConfig) -> FitResult:
    def resid(zz):
        return model.residual(tf.to_params(zz))

    r = resid(z)
    rss = float(r @ r)
    if not math.isfinite(rss):
        raise PreconditionError("invalid initialization")
    lam = cfg.lambda0
    scale = None
    trace = [rss]
    path = [KineticParams(*tf.to_params(z))]
    converged = False
    n_iter = 0
    for n_iter in range(1, cfg.max_iter + 1):
        h = 1e-6 * np.maximum(np.abs(z), 1.0)
        jac = np.empty((r.size, z.size))
        for k in range(z.size):
            zp = z.copy()
            zm = z.copy()
            zp[k] += h[k]
            zm[k] -= h[k]
            # d(model)/dz = -d(residual)/dz
            jac[:, k] = (resid(zm) - resid(zp)) / (2 * h[k])
        grad = jac.T @ r
        if np.max(np.abs(grad)) <= cfg.tol_grad:
            converged = True
            break
        jtj = jac.T @ jac
        # More's scaling: the running maximum of diag(J^T J) keeps the damping
        # from collapsing when a coordinate saturates near a bound
        diag = np.maximum(np.diag(jtj), 1e-300)
        scale = diag if scale is None else np.maximum(scale, diag)
        accepted = False
        nu = 2.0
        while lam < 1e16:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(scale), grad)
            except np.linalg.LinAlgError:
                lam *= nu
                nu *= 2.0
                continue
            z_new = z + step
            r_new = resid(z_new)
            rss_new = float(r_new @ r_new)
            if math.isfinite(rss_new) and rss_new < rss:
                accepted = True
                break
            lam *= nu
            nu *= 2.0
        if not accepted:
            # no damping yields a decrease: a (numerically) stationary point
            converged = True
            break
        small_step = np.linalg.norm(step) <= cfg.tol_step * (np.linalg.norm(z) + cfg.tol_step)
        z, r, rss = z_new, r_new, rss_new
        # Nielsen's update from the gain ratio of actual to predicted decrease
        predicted = float(step @ (lam * scale * step + grad))
        rho = (trace[-1] - rss) / predicted if predicted > 0 else 0.0
        lam = max(lam * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3), 1e-12)
        trace.append(rss)
        path.append(KineticParams(*tf.to_params(z)))
        if small_step:
            converged = True
            break
    return FitResult(KineticParams(*tf.to_params(z)), rss, n_iter, converged, trace, path)


def fit_nlls(aif: Curve, tissue: Curve, cfg: FitConfig | None = None) -> FitResult:
    """Least-squares fit of :class:`KineticParams` to ``tissue``.

    Levenberg-Marquardt with More's diagonal scaling and Nielsen's damping
    update, run in logistic
    coordinates so every iterate stays inside ``cfg.bounds``. The Jacobian
    is taken by central differences in the unbounded coordinates.
    """
    cfg = cfg or FitConfig()
    if aif.grid != tissue.grid:
        raise PreconditionError("aif and tissue must share a time grid")
    if cfg.bounds.delay[1] >= aif.grid.duration:
        raise PreconditionError("delay exceeds acquisition window")
    model = _Model(aif, tissue)
    tf = _Transform(cfg.bounds)
    starts = [np.array(cfg.start.as_tuple())]
    if cfg.multistart:
        rng = np.random.default_rng(cfg.seed)
        lo, hi = cfg.bounds.lo, cfg.bounds.hi
        starts += [lo + (hi - lo) * rng.uniform(0.05, 0.95, size=5) for _ in range(cfg.multistart)]
    best = None
    for theta0 in starts:
        res = _lm(model, tf, tf.to_unbounded(theta0), cfg)
        if best is None or res.rss < best.rss:
            best = res
    return best


def fit_patient(patient, cfg: FitConfig | None = None, progress=None) -> np.ndarray:
    """NLLS ``fp`` map for every masked voxel of ``patient``; NaN elsewhere."""
    cfg = cfg or FitConfig()
    out = np.full(patient.shape, np.nan)
    for x, y in patient.voxels():
        try:
            res = fit_nlls(patient.aif, patient.tissue_curve(x, y), cfg)
        except PreconditionError as exc:
            raise PreconditionError(f"voxel ({x}, {y}) of {patient.id}: {exc}") from exc
        out[y, x] = res.params.fp
    if progress is not None:
        progress(f"fitted {patient.id}: {int(patient.mask.sum())} voxels")
    return out
