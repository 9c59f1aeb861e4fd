import itertools

import numpy as np
import pytest

from mbfsurrogate.errors import PreconditionError
from mbfsurrogate.kinetics import Curve, KineticParams, TimeGrid, simulate_tissue
from mbfsurrogate.nlls import Bounds, FitConfig, fit_nlls, fit_patient
from mbfsurrogate.phantom import DEFAULT_GRID, AifSpec, PhantomSpec, gamma_variate_aif, generate_phantom

THETA = KineticParams(2.35, 1.0, 0.08, 0.25, 0.02)


@pytest.fixture(scope="module")
def aif():
    return gamma_variate_aif(AifSpec(), DEFAULT_GRID)


@pytest.fixture(scope="module")
def clean(aif):
    return simulate_tissue(THETA, aif)


def test_fixed_point(aif, clean):
    res = fit_nlls(aif, clean, FitConfig(init=THETA))
    assert res.converged and res.n_iter <= 2
    assert res.rss < 1e-16
    assert np.allclose(res.params.as_tuple(), THETA.as_tuple(), rtol=1e-10, atol=0)


def _grid_search_oracle(aif, tissue, bounds):
    """Coarse 5-D grid search followed by a compass-search refinement."""
    lo, hi = bounds.lo, bounds.hi

    def rss(v):
        r = tissue.values - simulate_tissue(KineticParams(*v), aif).values
        return float(r @ r)

    axes = [np.linspace(l + 0.05 * (h - l), h - 0.05 * (h - l), 6) for l, h in zip(lo, hi)]
    best = min(itertools.product(*axes), key=rss)
    x = np.array(best)
    f = rss(x)
    step = (hi - lo) / 10
    while np.max(step / (hi - lo)) > 1e-7:
        improved = False
        for k in range(5):
            for sgn in (1, -1):
                y = x.copy()
                y[k] = np.clip(y[k] + sgn * step[k], lo[k], hi[k])
                fy = rss(y)
                if fy < f:
                    x, f, improved = y, fy, True
        if not improved:
            step /= 2
    return x


def test_recovery_from_midpoint_matches_grid_search(aif, clean):
    res = fit_nlls(aif, clean)
    assert res.params.fp == pytest.approx(2.35, rel=0.01)
    oracle = _grid_search_oracle(aif, clean, Bounds())
    assert oracle[0] == pytest.approx(2.35, rel=0.01)
    assert res.rss <= 1e-10


def test_zero_tissue_drives_fp_to_lower_bound(aif):
    res = fit_nlls(aif, Curve(aif.grid, np.zeros(aif.grid.n)))
    assert res.converged
    assert res.params.fp == pytest.approx(Bounds().fp[0], rel=1e-6)
    # the smallest curve the bounded model can produce sets the attainable rss
    floor = simulate_tissue(KineticParams(*Bounds().lo), aif).values
    assert res.rss <= float(floor @ floor)


def test_monotone_trace_and_bounds(aif, clean):
    rng = np.random.default_rng(0)
    noisy = Curve(aif.grid, clean.values + rng.normal(0, 0.01, aif.grid.n))
    res = fit_nlls(aif, noisy)
    assert all(b < a for a, b in zip(res.trace, res.trace[1:]))
    b = Bounds()
    for p in res.path + [res.params]:
        p.validate()
        assert b.contains(p)


def test_invalid_initialization(aif, clean):
    bad = Curve(aif.grid, np.full(aif.grid.n, 1e300))
    with pytest.raises(PreconditionError, match="invalid initialization"):
        fit_nlls(aif, bad)


def test_grid_mismatch(aif):
    other = Curve(TimeGrid(0, 1 / 60, 100), np.zeros(100))
    with pytest.raises(PreconditionError):
        fit_nlls(aif, other)


def test_config_invariants():
    with pytest.raises(PreconditionError):
        FitConfig(max_iter=0)
    with pytest.raises(PreconditionError):
        FitConfig(tol_step=0)
    with pytest.raises(PreconditionError):
        FitConfig(init=KineticParams(10.0, 1.0, 0.08, 0.25))
    with pytest.raises(PreconditionError):
        Bounds(fp=(1.0, 0.5))


def test_multistart_never_worse(aif, clean):
    rng = np.random.default_rng(1)
    noisy = Curve(aif.grid, clean.values + rng.normal(0, 0.02, aif.grid.n))
    single = fit_nlls(aif, noisy)
    multi = fit_nlls(aif, noisy, FitConfig(multistart=3, seed=4))
    assert multi.rss <= single.rss


def test_fit_patient_map():
    p = generate_phantom(PhantomSpec("A", width=4, height=4, noise_sigma=0.0, seed=2))
    m = fit_patient(p)
    assert np.array_equal(np.isfinite(m), p.mask)
    assert np.allclose(m[p.mask], p.truth_mbf()[p.mask], rtol=0.05)
