"""Two-compartment exchange model (2CXM) forward simulation.

State equations, with plasma concentration ``Cp`` and interstitial
concentration ``Ce`` driven by the arterial input ``Ca``::

    vp * dCp/dt = fp * (Ca - Cp) + ps * (Ce - Cp)
    ve * dCe/dt = ps * (Cp - Ce)
    Ct = vp * Cp + ve * Ce

Two independent routes compute ``Ct``:

* :func:`simulate_tissue` uses the closed-form biexponential residue and an
  exact recursive convolution with the piecewise-linear input.
* :func:`solve_ode_oracle` integrates the state equations with classical RK4.

Units throughout: minutes, mM, mL/min/mL.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import PreconditionError

# relative gap below which the two eigenvalues are treated as equal
CONFLUENT_RTOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sampling ``t0 + i * dt`` for ``i in range(n)``."""

    t0: float
    dt: float
    n: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.dt)):
            raise PreconditionError("time grid must be finite")
        if self.dt <= 0:
            raise PreconditionError(f"dt must be positive, got {self.dt}")
        if int(self.n) != self.n or self.n < 2:
            raise PreconditionError(f"n must be an integer >= 2, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    @property
    def duration(self) -> float:
        return self.dt * (self.n - 1)


@dataclass(frozen=True, eq=False)
class Curve:
    """Concentration samples on a :class:`TimeGrid`. Values are stored read-only."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.grid.n:
            raise PreconditionError(
                f"curve length {v.shape} does not match grid n={self.grid.n}"
            )
        if not np.all(np.isfinite(v)):
            raise PreconditionError("curve values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        if not isinstance(other, Curve):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def scaled(self, c: float) -> "Curve":
        return Curve(self.grid, self.values * c)

    def require_nonnegative(self, what: str = "AIF") -> None:
        if np.any(self.values < 0):
            raise PreconditionError(f"{what} curve must be nonnegative")


@dataclass(frozen=True)
class KineticParams:
    """Per-voxel 2CXM parameters. ``fp`` is the myocardial blood flow."""

    fp: float
    ps: float
    vp: float
    ve: float
    delay: float = 0.0

    NAMES = ("fp", "ps", "vp", "ve", "delay")

    def __post_init__(self):
        for name in self.NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        vals = self.as_tuple()
        if not all(math.isfinite(v) for v in vals):
            raise PreconditionError(f"non-finite kinetic parameter in {vals}")
        if self.fp <= 0:
            raise PreconditionError(f"fp must be > 0, got {self.fp}")
        if self.ps < 0:
            raise PreconditionError(f"ps must be >= 0, got {self.ps}")
        if self.vp <= 0 or self.ve <= 0:
            raise PreconditionError("vp and ve must be > 0")
        if self.vp + self.ve > 1:
            raise PreconditionError(f"vp + ve must be <= 1, got {self.vp + self.ve}")
        if self.delay < 0:
            raise PreconditionError(f"delay must be >= 0, got {self.delay}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.fp, self.ps, self.vp, self.ve, self.delay)

    def replace(self, **changes) -> "KineticParams":
        d = dict(zip(self.NAMES, self.as_tuple()))
        d.update(changes)
        return KineticParams(**d)


# ---------------------------------------------------------------------------
# compiled kernels (shared with the MCMC sampler)
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def residue_terms(fp, ps, vp, ve):
    """Impulse response ``fp * R(t)`` as two terms ``(a + b t) exp(-lam t)``.

    Returns ``(a1, b1, lam1, a2, b2, lam2)``.
    """
    tr = (fp + ps) / vp + ps / ve
    det = fp * ps / (vp * ve)
    disc = tr * tr - 4.0 * det
    if disc < 0.0:
        disc = 0.0
    alpha = 0.5 * (tr + math.sqrt(disc))
    # product form avoids cancellation when ps is small
    beta = det / alpha if alpha > 0.0 else 0.0
    if alpha - beta < CONFLUENT_RTOL * alpha:
        lam = 0.5 * (alpha + beta)
        return fp, fp * (lam - fp / vp), lam, 0.0, 0.0, lam
    amp = (fp / vp - beta) / (alpha - beta)
    return fp * amp, 0.0, alpha, fp * (1.0 - amp), 0.0, beta


@numba.njit(cache=True)
def _phi(k, x):
    # integral_0^1 v^k exp(-x v) dv
    if x < 0.5:
        total = 0.0
        term = 1.0
        for m in range(25):
            total += term / (k + m + 1)
            term *= -x / (m + 1)
        return total
    e = math.exp(-x)
    if k == 0:
        return -math.expm1(-x) / x
    if k == 1:
        return (1.0 - e * (1.0 + x)) / (x * x)
    return (2.0 - e * (2.0 + 2.0 * x + x * x)) / (x * x * x)


@numba.njit(cache=True)
def _accumulate_term(u, dt, a, b, lam, out):
    # exact convolution of the piecewise-linear interpolant of u with
    # (a + b t) exp(-lam t), added into out
    n = u.shape[0]
    x = lam * dt
    e = math.exp(-x)
    p0 = dt * (_phi(0, x) - _phi(1, x))
    p1 = dt * _phi(1, x)
    q0 = dt * dt * (_phi(1, x) - _phi(2, x))
    q1 = dt * dt * _phi(2, x)
    P = 0.0
    Q = 0.0
    for i in range(n - 1):
        Pn = e * P + p0 * u[i + 1] + p1 * u[i]
        if b != 0.0:
            Q = e * (Q + dt * P) + q0 * u[i + 1] + q1 * u[i]
        P = Pn
        out[i + 1] += a * P + b * Q


@numba.njit(cache=True)
def shift_into(values, dt, delay, out):
    """Delay ``values`` by ``delay`` via linear interpolation, zero before the start."""
    n = values.shape[0]
    # sample i reads position i + j0 + f with a constant offset
    j0 = math.floor(-delay / dt)
    f = -delay / dt - j0
    g = 1.0 - f
    for i in range(n):
        j = i + j0
        lo = values[j] if 0 <= j < n else 0.0
        if f == 0.0:
            out[i] = lo
        else:
            hi = values[j + 1] if 0 <= j + 1 < n else 0.0
            out[i] = g * lo + f * hi


@numba.njit(cache=True)
def tissue_into(shifted, dt, fp, ps, vp, ve, out):
    """Tissue curve for an already-delayed input; overwrites ``out``."""
    a1, b1, l1, a2, b2, l2 = residue_terms(fp, ps, vp, ve)
    out[:] = 0.0
    _accumulate_term(shifted, dt, a1, b1, l1, out)
    if a2 != 0.0 or b2 != 0.0:
        _accumulate_term(shifted, dt, a2, b2, l2, out)


@numba.njit(cache=True)
def _rk4_states(u, dt, substeps, fp, ps, vp, ve):
    n = u.shape[0]
    cp_out = np.zeros(n)
    ce_out = np.zeros(n)
    h = dt / substeps
    cp = 0.0
    ce = 0.0
    for i in range(n - 1):
        u0 = u[i]
        du = u[i + 1] - u[i]
        for k in range(substeps):
            ua = u0 + du * (k / substeps)
            um = u0 + du * ((k + 0.5) / substeps)
            ub = u0 + du * ((k + 1.0) / substeps)

            k1p = (fp * (ua - cp) + ps * (ce - cp)) / vp
            k1e = ps * (cp - ce) / ve
            cp2 = cp + 0.5 * h * k1p
            ce2 = ce + 0.5 * h * k1e
            k2p = (fp * (um - cp2) + ps * (ce2 - cp2)) / vp
            k2e = ps * (cp2 - ce2) / ve
            cp3 = cp + 0.5 * h * k2p
            ce3 = ce + 0.5 * h * k2e
            k3p = (fp * (um - cp3) + ps * (ce3 - cp3)) / vp
            k3e = ps * (cp3 - ce3) / ve
            cp4 = cp + h * k3p
            ce4 = ce + h * k3e
            k4p = (fp * (ub - cp4) + ps * (ce4 - cp4)) / vp
            k4e = ps * (cp4 - ce4) / ve

            cp += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
            ce += h / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e)
        cp_out[i + 1] = cp
        ce_out[i + 1] = ce
    return cp_out, ce_out


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _check_delay(params: KineticParams, grid: TimeGrid) -> None:
    if params.delay >= grid.duration:
        raise PreconditionError("delay exceeds acquisition window")


def residue_function(params: KineticParams, t: np.ndarray) -> np.ndarray:
    """Evaluate the residue ``R(t)`` (``R(0) == 1``) at arbitrary elapsed times."""
    a1, b1, l1, a2, b2, l2 = residue_terms(params.fp, params.ps, params.vp, params.ve)
    t = np.asarray(t, dtype=np.float64)
    h = (a1 + b1 * t) * np.exp(-l1 * t) + (a2 + b2 * t) * np.exp(-l2 * t)
    return h / params.fp


def impulse_response(params: KineticParams, grid: TimeGrid) -> Curve:
    """``h(t) = fp * R(t)`` sampled at elapsed times ``i * dt``.

    The delay is not applied here; see :func:`simulate_tissue`.
    """
    t = grid.dt * np.arange(grid.n)
    h = params.fp * residue_function(params, t)
    h[0] = params.fp
    return Curve(grid, h)


def shift_curve(curve: Curve, delay: float) -> Curve:
    """Delay a curve by ``delay`` minutes (linear interpolation, zero-filled start)."""
    if delay < 0 or not math.isfinite(delay):
        raise PreconditionError(f"delay must be finite and >= 0, got {delay}")
    out = np.empty(curve.grid.n)
    shift_into(np.ascontiguousarray(curve.values), curve.grid.dt, float(delay), out)
    return Curve(curve.grid, out)


def simulate_tissue(params: KineticParams, aif: Curve) -> Curve:
    """Myocardial tissue curve produced by ``aif`` under ``params``.

    The AIF is delayed by ``params.delay`` and treated as piecewise linear
    between samples; its convolution with the biexponential impulse response
    is evaluated exactly by a first-order recursion per exponential term, so
    the only discretisation is the linear interpolation of the input.
    Output sample 0 is always zero (no elapsed time since acquisition start).
    """
    _check_delay(params, aif.grid)
    shifted = np.empty(aif.grid.n)
    shift_into(np.ascontiguousarray(aif.values), aif.grid.dt, params.delay, shifted)
    out = np.empty(aif.grid.n)
    tissue_into(shifted, aif.grid.dt, params.fp, params.ps, params.vp, params.ve, out)
    return Curve(aif.grid, out)


def solve_ode_oracle(params: KineticParams, aif: Curve, substeps: int = 100) -> Curve:
    """Reference tissue curve by RK4 integration of the state equations.

    The forcing is the delayed AIF (same shift as :func:`simulate_tissue`),
    linearly interpolated inside each sampling interval, integrated with
    ``substeps`` RK4 steps per interval.
    """
    if int(substeps) != substeps or substeps < 1:
        raise PreconditionError(f"substeps must be an integer >= 1, got {substeps}")
    _check_delay(params, aif.grid)
    shifted = shift_curve(aif, params.delay).values
    cp, ce = _rk4_states(
        np.ascontiguousarray(shifted), aif.grid.dt, int(substeps),
        params.fp, params.ps, params.vp, params.ve,
    )
    return Curve(aif.grid, params.vp * cp + params.ve * ce)


def oracle_impulse_response(params: KineticParams, grid: TimeGrid, substeps: int = 100) -> Curve:
    """Impulse response as the time derivative of the RK4 unit-step response.

    ``d Ct/dt = fp * (Ca - Cp)``, so with ``Ca == 1`` the derivative is exact
    given the integrated plasma state.
    """
    if int(substeps) != substeps or substeps < 1:
        raise PreconditionError(f"substeps must be an integer >= 1, got {substeps}")
    cp, _ = _rk4_states(
        np.ones(grid.n), grid.dt, int(substeps),
        params.fp, params.ps, params.vp, params.ve,
    )
    return Curve(grid, params.fp * (1.0 - cp))


def relative_l2(a, b) -> float:
    """``||a - b|| / ||b||`` for curves or arrays."""
    a = a.values if isinstance(a, Curve) else np.asarray(a)
    b = b.values if isinstance(b, Curve) else np.asarray(b)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))
