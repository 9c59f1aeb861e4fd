import math

import numpy as np
import pytest

from mbfsurrogate.errors import PreconditionError
from mbfsurrogate.kinetics import Curve, KineticParams, simulate_tissue
from mbfsurrogate.mcmc import (
    McmcConfig,
    Prior,
    label_dataset,
    label_patient,
    log_posterior,
    run_mcmc,
    sample_gaussian_stub,
    voxel_seed,
)
from mbfsurrogate.phantom import (
    DEFAULT_GRID,
    AifSpec,
    PhantomDataset,
    PhantomSpec,
    gamma_variate_aif,
    generate_phantom,
)

THETA = KineticParams(2.35, 1.0, 0.08, 0.25, 0.02)
SHORT = McmcConfig(n_iter=4000, burn_in=2000, thin=10, seed=3)


@pytest.fixture(scope="module")
def aif():
    return gamma_variate_aif(AifSpec(), DEFAULT_GRID)


@pytest.fixture(scope="module")
def clean(aif):
    return simulate_tissue(THETA, aif)


def _density_oracle(theta, log_sigma, aif, tissue, prior):
    """Independent restatement of the posterior density (not its logarithm)."""
    lo, hi = prior.lo, prior.hi
    full = np.append(theta.as_tuple(), log_sigma)
    if np.any(full < lo) or np.any(full > hi):
        return 0.0
    sigma = math.exp(log_sigma)
    r = tissue.values - simulate_tissue(theta, aif).values
    like = np.prod(np.exp(-0.5 * (r / sigma) ** 2) / sigma)
    return like / (theta.fp * theta.ps)


def test_outside_support_is_minus_inf(aif, clean):
    assert log_posterior(THETA.replace(fp=7.0), 0.0, aif, clean) == -math.inf
    assert log_posterior(THETA, math.log(2.0), aif, clean) == -math.inf


def test_zero_residual_likelihood(aif, clean):
    n = aif.grid.n
    for ls in (math.log(0.01), math.log(0.1)):
        lp = log_posterior(THETA, ls, aif, clean)
        assert lp == pytest.approx(-n * ls - math.log(THETA.fp) - math.log(THETA.ps), rel=1e-12)


def test_density_ratio_matches_oracle(aif, clean):
    rng = np.random.default_rng(0)
    prior = Prior()
    tissue = Curve(aif.grid, clean.values + rng.normal(0, 0.05, aif.grid.n))
    a, b = THETA, THETA.replace(fp=2.1, ve=0.3)
    ls = math.log(0.05)
    got = log_posterior(a, ls, aif, tissue, prior) - log_posterior(b, ls, aif, tissue, prior)
    want = math.log(_density_oracle(a, ls, aif, tissue, prior) / _density_oracle(b, ls, aif, tissue, prior))
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_too_few_kept_samples(aif, clean):
    with pytest.raises(PreconditionError):
        run_mcmc(aif, clean, cfg=McmcConfig(n_iter=1500, burn_in=1000, thin=10))


def test_config_invariants():
    with pytest.raises(PreconditionError):
        McmcConfig(n_iter=100, burn_in=100)
    with pytest.raises(PreconditionError):
        McmcConfig(thin=0)
    with pytest.raises(PreconditionError):
        McmcConfig(target_accept=1.0)


def test_determinism(aif, clean):
    assert run_mcmc(aif, clean, cfg=SHORT) == run_mcmc(aif, clean, cfg=SHORT)


def test_support_confinement_and_accept_rate(aif, clean):
    rng = np.random.default_rng(1)
    tissue = Curve(aif.grid, clean.values + rng.normal(0, 0.01, aif.grid.n))
    post = run_mcmc(aif, tissue, cfg=SHORT)
    prior = Prior()
    assert np.all(post.samples >= prior.lo) and np.all(post.samples <= prior.hi)
    assert 0 < post.accept_rate < 1
    s = post.summary["fp"]
    assert s["p25"] <= s["median"] <= s["p75"]


def test_gaussian_stub_detailed_balance():
    cfg = McmcConfig(n_iter=60_000, burn_in=10_000, thin=5, seed=11)
    kept = sample_gaussian_stub(1.5, 0.7, cfg, x0=-3.0)
    # effective sample size from the lag-1 autocorrelation of the thinned chain
    x = kept - kept.mean()
    rho = float(x[1:] @ x[:-1] / (x @ x))
    ess = kept.size * (1 - rho) / (1 + rho)
    assert abs(kept.mean() - 1.5) < 3 * 0.7 / math.sqrt(ess)
    # std of the sample std for a Gaussian: sigma / sqrt(2 n)
    assert abs(kept.std() - 0.7) < 3 * 0.7 / math.sqrt(2 * ess)


def test_prior_recovery_under_huge_noise(aif, clean):
    prior = Prior()
    cfg = McmcConfig(n_iter=40_000, burn_in=10_000, thin=30, seed=5)
    post = run_mcmc(aif, clean, prior, cfg, fixed_sigma=1e3 * clean.values.max())
    # oracle: spread of the sample median for i.i.d. prior draws of the same size
    rng = np.random.default_rng(0)
    n = post.samples.shape[0]
    meds = np.array([np.median(prior.sample(rng, n), axis=0) for _ in range(400)])
    centre, spread = np.median(meds, axis=0), meds.std(axis=0)
    got = np.median(post.samples, axis=0)
    for k in range(5):
        assert abs(got[k] - centre[k]) < 3 * spread[k], (k, got[k], centre[k], spread[k])


def test_noiseless_posterior_median_long_chain(aif, clean):
    post = run_mcmc(aif, clean, cfg=McmcConfig(n_iter=50_000, burn_in=25_000, seed=2))
    assert post.mbf == pytest.approx(2.35, rel=0.05)


def test_interval_contains_truth_for_most_voxels():
    rng = np.random.default_rng(7)
    cfg = McmcConfig(n_iter=6000, burn_in=3000, thin=10)
    hits = 0
    for i in range(100):
        spec = AifSpec(amplitude=rng.uniform(4, 6), timescale=rng.uniform(0.035, 0.05))
        aif = gamma_variate_aif(spec, DEFAULT_GRID)
        theta = KineticParams(rng.uniform(1.0, 4.0), rng.uniform(0.5, 1.5), rng.uniform(0.05, 0.12),
                              rng.uniform(0.15, 0.35), rng.uniform(0, 0.05))
        post = run_mcmc(aif, simulate_tissue(theta, aif),
                        cfg=McmcConfig(**{**cfg.__dict__, "seed": i}))
        s = post.summary["fp"]
        hits += s["p25"] <= theta.fp <= s["p75"]
    assert hits >= 80


def _tiny_patient(pid="T", seed=1):
    return generate_phantom(PhantomSpec(pid, width=3, height=3, noise_sigma=0.002, seed=seed))


def test_one_voxel_dataset_matches_run_mcmc():
    p = generate_phantom(PhantomSpec("V", width=1, height=1, seed=4))
    res = label_dataset(PhantomDataset([p]), cfg=SHORT)
    cfg = McmcConfig(**{**SHORT.__dict__, "seed": voxel_seed(SHORT.seed, "V", 0, 0)})
    assert res.maps["V"][0, 0] == run_mcmc(p.aif, p.tissue_curve(0, 0), cfg=cfg).mbf
    assert res.n_voxels == 1


def test_relabel_is_identical_and_worker_independent():
    p = _tiny_patient()
    a = label_patient(p, cfg=SHORT)
    b = label_patient(p, cfg=SHORT)
    c = label_patient(p, cfg=SHORT, workers=2)
    assert np.array_equal(a, b, equal_nan=True)
    assert np.array_equal(a, c, equal_nan=True)
    assert np.array_equal(np.isfinite(a), p.mask)


def test_seed_isolation():
    p = _tiny_patient()
    base = label_patient(p, cfg=SHORT)
    # perturb one voxel's data: only that voxel's chain may change
    q = _tiny_patient()
    x, y = q.voxels()[0]
    q.tissue[y, x] += 0.001
    moved = label_patient(q, cfg=SHORT)
    diff = ~np.isclose(base, moved, rtol=0, atol=0, equal_nan=True)
    assert diff[y, x] and diff.sum() == 1
    assert voxel_seed(0, "T", 0, 1) != voxel_seed(0, "T", 1, 0)
