"""Synthetic perfusion phantoms standing in for patient data."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .kinetics import Curve, KineticParams, TimeGrid, simulate_tissue

MBF_CLIP = (0.3, 6.0)

DEFAULT_GRID = TimeGrid(t0=0.0, dt=1.0 / 60.0, n=240)


@dataclass(frozen=True)
class AifSpec:
    """Gamma-variate AIF with one recirculation echo."""

    amplitude: float = 5.0
    shape: float = 3.0
    timescale: float = 0.04
    onset: float = 0.2
    recirc_fraction: float = 0.15
    recirc_lag: float = 0.35

    def __post_init__(self):
        if self.amplitude <= 0 or self.shape <= 0 or self.timescale <= 0:
            raise PreconditionError("AIF amplitude, shape and timescale must be > 0")
        if self.onset < 0:
            raise PreconditionError("AIF onset must be >= 0")
        if not 0 <= self.recirc_fraction < 1:
            raise PreconditionError("recirculation fraction must be in [0, 1)")
        if self.recirc_lag < 0:
            raise PreconditionError("recirculation lag must be >= 0")


@dataclass(frozen=True)
class Defect:
    cx: float
    cy: float
    radius: float
    severity: float

    def __post_init__(self):
        if not 0 < self.severity <= 1:
            raise PreconditionError(f"defect severity must be in (0, 1], got {self.severity}")
        if self.radius <= 0:
            raise PreconditionError("defect radius must be > 0")


@dataclass(frozen=True)
class PhantomSpec:
    patient_id: str
    width: int = 63
    height: int = 63
    grid: TimeGrid = DEFAULT_GRID
    aif: AifSpec = AifSpec()
    base_mbf: float = 2.35
    mbf_smoothness: float = 8.0
    # fractional amplitude of the smooth MBF modulation
    mbf_variation: float = 0.3
    defect: Defect | None = None
    ps_range: tuple[float, float] = (0.5, 1.5)
    vp_range: tuple[float, float] = (0.05, 0.12)
    ve_range: tuple[float, float] = (0.15, 0.35)
    delay_jitter: tuple[float, float] = (0.0, 0.05)
    noise_sigma: float = 0.002
    seed: int = 0
    # inner radius of the myocardial annulus as a fraction of the outer ellipse; 0 = full ellipse
    annulus: float = 0.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise PreconditionError("phantom grid must contain at least one voxel")
        if self.noise_sigma < 0:
            raise PreconditionError("noise_sigma must be >= 0")
        if self.base_mbf <= 0 or self.mbf_smoothness <= 0:
            raise PreconditionError("base_mbf and mbf_smoothness must be > 0")
        if not 0 <= self.annulus < 1:
            raise PreconditionError("annulus fraction must be in [0, 1)")
        for name, lo_ok in (("ps_range", 0.0), ("vp_range", None), ("ve_range", None),
                            ("delay_jitter", 0.0)):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise PreconditionError(f"{name} must be a finite interval, got {(lo, hi)}")
            if lo_ok is not None and lo < lo_ok:
                raise PreconditionError(f"{name} lower bound must be >= {lo_ok}")
            if lo_ok is None and lo <= 0:
                raise PreconditionError(f"{name} lower bound must be > 0")
        if self.vp_range[1] + self.ve_range[1] > 1:
            raise PreconditionError("vp_range and ve_range allow vp + ve > 1")
        if self.delay_jitter[1] >= self.grid.duration:
            raise PreconditionError("delay exceeds acquisition window")


@dataclass(eq=False)
class Patient:
    """One synthetic patient.

    Arrays are indexed ``[y, x]``. ``tissue`` has shape ``(height, width, n)``
    and ``truth`` shape ``(height, width, 5)`` in :attr:`KineticParams.NAMES`
    order; both are NaN outside the mask.
    """

    id: str
    aif: Curve
    mask: np.ndarray
    tissue: np.ndarray = field(repr=False)
    truth: np.ndarray = field(repr=False)
    spec: PhantomSpec | None = None

    @property
    def grid(self) -> TimeGrid:
        return self.aif.grid

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def voxels(self) -> list[tuple[int, int]]:
        """Masked ``(x, y)`` coordinates in row-major order."""
        ys, xs = np.nonzero(self.mask)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def tissue_curve(self, x: int, y: int) -> Curve:
        if not self.mask[y, x]:
            raise PreconditionError(f"voxel ({x}, {y}) is outside the mask of {self.id}")
        return Curve(self.grid, self.tissue[y, x])

    def truth_params(self, x: int, y: int) -> KineticParams:
        if not self.mask[y, x]:
            raise PreconditionError(f"voxel ({x}, {y}) is outside the mask of {self.id}")
        return KineticParams(*self.truth[y, x])

    def truth_mbf(self) -> np.ndarray:
        return self.truth[..., 0]

    def __eq__(self, other):
        if not isinstance(other, Patient):
            return NotImplemented
        return (
            self.id == other.id
            and self.aif == other.aif
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.tissue, other.tissue, equal_nan=True)
            and np.array_equal(self.truth, other.truth, equal_nan=True)
        )


@dataclass(eq=True)
class PhantomDataset:
    patients: list[Patient]

    def __post_init__(self):
        ids = [p.id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise PreconditionError(f"duplicate patient ids in {ids}")

    def __getitem__(self, patient_id: str) -> Patient:
        for p in self.patients:
            if p.id == patient_id:
                return p
        raise KeyError(patient_id)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.patients]

    def voxel_count(self) -> int:
        return int(sum(p.mask.sum() for p in self.patients))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def gamma_variate_aif(spec: AifSpec, grid: TimeGrid) -> Curve:
    """``A * s**alpha * exp(-s)`` with ``s = (t - onset) / timescale``, plus a scaled echo."""

    def bolus(t0):
        s = (grid.times - t0) / spec.timescale
        out = np.zeros(grid.n)
        on = s > 0
        out[on] = spec.amplitude * s[on] ** spec.shape * np.exp(-s[on])
        return out

    values = bolus(spec.onset)
    if spec.recirc_fraction > 0:
        values = values + spec.recirc_fraction * bolus(spec.onset + spec.recirc_lag)
    return Curve(grid, values)


def myocardial_mask(width: int, height: int, annulus: float = 0.0) -> np.ndarray:
    """Centered ellipse inscribed in the grid, optionally hollowed to an annulus."""
    yy, xx = np.mgrid[0:height, 0:width]
    cx, cy = (width - 1) / 2, (height - 1) / 2
    rx, ry = max(width / 2, 0.5), max(height / 2, 0.5)
    r2 = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    mask = r2 <= 1.0
    if annulus > 0:
        mask &= r2 >= annulus**2
    return mask


def smooth_field(rng: np.random.Generator, width: int, height: int, length: float) -> np.ndarray:
    """Value noise in [-1, 1]: bilinear interpolation of a coarse uniform lattice."""
    nx = int(math.ceil((width - 1) / length)) + 2
    ny = int(math.ceil((height - 1) / length)) + 2
    lattice = rng.uniform(-1.0, 1.0, size=(ny, nx))
    gx = np.arange(width) / length
    gy = np.arange(height) / length
    ix = np.floor(gx).astype(int)
    iy = np.floor(gy).astype(int)
    fx = gx - ix
    fy = gy - iy
    v00 = lattice[np.ix_(iy, ix)]
    v01 = lattice[np.ix_(iy, ix + 1)]
    v10 = lattice[np.ix_(iy + 1, ix)]
    v11 = lattice[np.ix_(iy + 1, ix + 1)]
    fx = fx[None, :]
    fy = fy[:, None]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def defect_disc(defect: Defect, width: int, height: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (xx - defect.cx) ** 2 + (yy - defect.cy) ** 2 <= defect.radius**2


def mbf_field(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth MBF map and the unclipped, defect-free field it came from."""
    noise = smooth_field(rng, spec.width, spec.height, spec.mbf_smoothness)
    healthy = spec.base_mbf * (1.0 + spec.mbf_variation * noise)
    mbf = healthy.copy()
    if spec.defect is not None:
        disc = defect_disc(spec.defect, spec.width, spec.height)
        mbf[disc] *= 1.0 - spec.defect.severity
    return np.clip(mbf, *MBF_CLIP), healthy


def generate_phantom(spec: PhantomSpec) -> Patient:
    """Deterministically build one synthetic patient from ``spec``."""
    if spec.defect is not None:
        d = spec.defect
        if not (0 <= d.cx <= spec.width - 1 and 0 <= d.cy <= spec.height - 1):
            raise PreconditionError(
                f"defect centre ({d.cx}, {d.cy}) lies outside the {spec.width}x{spec.height} grid"
            )
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    aif = gamma_variate_aif(spec.aif, grid)
    mask = myocardial_mask(spec.width, spec.height, spec.annulus)
    mbf, _ = mbf_field(spec, rng)

    ys, xs = np.nonzero(mask)
    nvox = len(ys)
    ps = rng.uniform(*spec.ps_range, size=nvox)
    vp = rng.uniform(*spec.vp_range, size=nvox)
    ve = rng.uniform(*spec.ve_range, size=nvox)
    delay = rng.uniform(*spec.delay_jitter, size=nvox)
    noise = rng.normal(0.0, 1.0, size=(nvox, grid.n)) * spec.noise_sigma

    tissue = np.full((spec.height, spec.width, grid.n), np.nan)
    truth = np.full((spec.height, spec.width, 5), np.nan)
    for k, (y, x) in enumerate(zip(ys, xs)):
        params = KineticParams(mbf[y, x], ps[k], vp[k], ve[k], delay[k])
        truth[y, x] = params.as_tuple()
        tissue[y, x] = simulate_tissue(params, aif).values + noise[k]
    return Patient(id=spec.patient_id, aif=aif, mask=mask, tissue=tissue, truth=truth, spec=spec)


def suite_specs(
    master_seed: int = 0,
    n_patients: int = 9,
    n_diseased: int = 4,
    size: int = 63,
    defect_radius: tuple[float, float] = (6, 12),
    noise_sigma: float = 0.002,
    shared_aif: bool = False,
) -> list[PhantomSpec]:
    """Phantom specs for a cohort with ``n_diseased`` defect patients.

    With ``shared_aif`` every patient gets the first patient's arterial input.
    """
    if not 0 <= n_diseased <= n_patients:
        raise PreconditionError("n_diseased must lie in [0, n_patients]")
    rng = np.random.default_rng(derive_seed("suite", master_seed))
    diseased = set(rng.choice(n_patients, size=n_diseased, replace=False).tolist())
    yy, xx = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2
    r2 = (xx - centre) ** 2 + (yy - centre) ** 2
    specs = []
    first_aif = None
    for i in range(n_patients):
        aif = AifSpec(
            amplitude=rng.uniform(4.0, 6.0),
            timescale=rng.uniform(0.035, 0.05),
            onset=rng.uniform(0.1, 0.3),
        )
        first_aif = first_aif or aif
        if shared_aif:
            aif = first_aif
        base = rng.uniform(1.8, 3.0)
        defect = None
        if i in diseased:
            radius = float(rng.integers(defect_radius[0], defect_radius[1] + 1))
            # keep the disc inside the myocardial ellipse
            reach = max(size / 2 - radius - 1, 0.0)
            ys, xs = np.nonzero(r2 <= reach**2)
            k = rng.integers(len(ys))
            defect = Defect(cx=float(xs[k]), cy=float(ys[k]), radius=radius,
                            severity=rng.uniform(0.4, 0.7))
        specs.append(PhantomSpec(
            patient_id=f"P{i + 1:02d}", width=size, height=size, aif=aif,
            base_mbf=base, defect=defect, noise_sigma=noise_sigma,
            seed=derive_seed(master_seed, i),
        ))
    return specs


def default_suite(master_seed: int = 0, **kwargs) -> PhantomDataset:
    """Nine-patient cohort: five healthy and four with perfusion defects."""
    return PhantomDataset([generate_phantom(s) for s in suite_specs(master_seed, **kwargs)])


def reduced_suite(master_seed: int = 0) -> PhantomDataset:
    """Three 24x24 patients, one of them diseased; the fast CI cohort."""
    return default_suite(master_seed, n_patients=3, n_diseased=1, size=24, defect_radius=(3, 5))
