"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
under output capture. Criterion 5 and its dependants (6, 7, 8) use the
reduced CI suite: three 24x24 patients with three 1/1/1 splits.
"""
import time
from collections import OrderedDict

import numpy as np
import pytest

from mbfsurrogate import formats
from mbfsurrogate.cnn import (
    NetworkConfig,
    NetworkWeights,
    backward,
    build_samples,
    forward,
    mse,
    predict,
    shift_samples,
    weight_shapes,
)
from mbfsurrogate.kinetics import (
    Curve,
    KineticParams,
    TimeGrid,
    impulse_response,
    oracle_impulse_response,
    relative_l2,
    residue_terms,
    simulate_tissue,
    solve_ode_oracle,
)
from mbfsurrogate.mcmc import McmcConfig, Prior, label_dataset, run_mcmc
from mbfsurrogate.nlls import fit_nlls
from mbfsurrogate.phantom import (
    DEFAULT_GRID,
    AifSpec,
    PhantomSpec,
    defect_disc,
    gamma_variate_aif,
    generate_phantom,
    reduced_suite,
)
from mbfsurrogate.pipeline import benchmark, make_splits, run_crossval


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, seconds=None):
        took = "" if seconds is None else f" [{seconds:.1f} s]"
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}{took}")
        assert ok, detail
    return emit


def _random_params(rng, delay=0.0):
    return KineticParams(rng.uniform(0.3, 5.0), rng.uniform(0.05, 3.0), rng.uniform(0.02, 0.2),
                         rng.uniform(0.05, 0.5), delay)


# -- 1 ----------------------------------------------------------------------------


def test_criterion_1_forward_model(report):
    start = time.perf_counter()
    theta = KineticParams(2.35, 1.0, 0.08, 0.25)
    fine = TimeGrid(0.0, 1.0 / 300.0, 18000)
    e_imp = relative_l2(impulse_response(theta, fine).values,
                        oracle_impulse_response(theta, fine, substeps=100).values)
    aif = gamma_variate_aif(AifSpec(), DEFAULT_GRID)
    e_sim = max(relative_l2(simulate_tissue(theta.replace(delay=d), aif).values,
                            solve_ode_oracle(theta.replace(delay=d), aif).values)
                for d in (0.0, 0.0234, 0.1))
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        p = _random_params(rng)
        a1, b1, l1, a2, b2, l2 = residue_terms(p.fp, p.ps, p.vp, p.ve)
        rates = [lam for a, b, lam in ((a1, b1, l1), (a2, b2, l2)) if (a or b) and lam > 0]
        dt = 0.05 / max(rates)
        horizon = max(50 * (p.vp + p.ve) / p.fp, 40.0 / min(rates))
        grid = TimeGrid(0.0, dt, int(horizon / dt) + 2)
        area = np.trapezoid(impulse_response(p, grid).values, dx=dt)
        worst = max(worst, abs(area / (p.vp + p.ve) - 1))
    took = time.perf_counter() - start
    ok = e_imp < 1e-6 and e_sim < 1e-4 and worst <= 5e-3 and took < 10
    report(1, ok, f"impulse L2 {e_imp:.1e} (<1e-6), tissue L2 {e_sim:.1e} (<1e-4), "
                  f"worst volume error {worst:.2%} (<=0.5%)", took)


# -- 2 ----------------------------------------------------------------------------


def test_criterion_2_gradient(report):
    start = time.perf_counter()
    cfg = NetworkConfig(convs=((3, 3), (5, 4)), pool=2, dense=(6, 5), n_times=24, seed=0)
    rng = np.random.default_rng(11)
    w = NetworkWeights(cfg, OrderedDict((k, rng.normal(0, 0.5, s)) for k, s in weight_shapes(cfg).items()))
    aif, tissue, target = rng.normal(size=(4, 1, 24)), rng.normal(size=(4, 9, 24)), rng.normal(2, 0.5, 4)
    pred, cache = forward(w, aif, tissue)
    grads = backward(w, pred, target, cache)
    h, total, passed = 1e-5, 0, 0
    for name, arr in w.tensors.items():
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            up = mse(forward(w, aif, tissue)[0], target)
            arr[i] = old - h
            down = mse(forward(w, aif, tissue)[0], target)
            arr[i] = old
            fd, g = (up - down) / (2 * h), grads[name][i]
            total += 1
            passed += abs(fd - g) <= (1e-7 if abs(g) < 1e-3 else 1e-4 * abs(g))
    took = time.perf_counter() - start
    report(2, passed == total and took < 30, f"{passed}/{total} weights pass the finite-difference check", took)


# -- 3 ----------------------------------------------------------------------------


def test_criterion_3_nlls(report):
    start = time.perf_counter()
    aif = gamma_variate_aif(AifSpec(), DEFAULT_GRID)
    theta = KineticParams(2.35, 1.0, 0.08, 0.25, 0.02)
    noiseless = abs(fit_nlls(aif, simulate_tissue(theta, aif)).params.fp / theta.fp - 1)
    rng = np.random.default_rng(21)
    errs = []
    for _ in range(200):
        spec = AifSpec(amplitude=rng.uniform(4, 6), timescale=rng.uniform(0.035, 0.05),
                       onset=rng.uniform(0.1, 0.3))
        a = gamma_variate_aif(spec, DEFAULT_GRID)
        p = KineticParams(rng.uniform(1.0, 4.0), rng.uniform(0.5, 1.5), rng.uniform(0.05, 0.12),
                          rng.uniform(0.15, 0.35), rng.uniform(0, 0.05))
        clean = simulate_tissue(p, a).values
        noisy = Curve(a.grid, clean + rng.normal(0, 0.02 * clean.max(), clean.size))
        errs.append(abs(fit_nlls(a, noisy).params.fp / p.fp - 1))
    med = float(np.median(errs))
    took = time.perf_counter() - start
    report(3, noiseless <= 0.01 and med < 0.10 and took < 120,
           f"noiseless fp error {noiseless:.2%} (<=1%), median fp error at 2% noise {med:.1%} (<10%)", took)


# -- 4 ----------------------------------------------------------------------------


def test_criterion_4_mcmc(report):
    start = time.perf_counter()
    aif = gamma_variate_aif(AifSpec(), DEFAULT_GRID)
    theta = KineticParams(2.35, 1.0, 0.08, 0.25, 0.02)
    clean = simulate_tissue(theta, aif)
    prior = Prior()
    post = run_mcmc(aif, clean, prior, McmcConfig(n_iter=40_000, burn_in=10_000, thin=30, seed=5),
                    fixed_sigma=1e3 * clean.values.max())
    rng = np.random.default_rng(0)
    n = post.samples.shape[0]
    meds = np.array([np.median(prior.sample(rng, n), axis=0) for _ in range(400)])
    z = np.abs(np.median(post.samples, axis=0) - np.median(meds, axis=0)) / meds.std(axis=0)
    prior_ok = bool(np.all(z[:5] < 3))
    long = run_mcmc(aif, clean, cfg=McmcConfig(n_iter=50_000, burn_in=25_000, seed=2))
    fp_err = abs(long.mbf / theta.fp - 1)
    short = McmcConfig(n_iter=4000, burn_in=2000, seed=3)
    same = run_mcmc(aif, clean, cfg=short) == run_mcmc(aif, clean, cfg=short)
    took = time.perf_counter() - start
    report(4, prior_ok and fp_err <= 0.05 and same and took < 300,
           f"prior recovery max z {z[:5].max():.2f} (<3), noiseless fp error {fp_err:.2%} (<=5%), "
           f"deterministic {same}", took)


# -- 5 to 8: reduced suite --------------------------------------------------------


@pytest.fixture(scope="module")
def ci_run():
    start = time.perf_counter()
    ds = reduced_suite(0)
    labels = label_dataset(ds, cfg=McmcConfig(seed=0))
    plan = make_splits(ds.ids, 0, sizes=(1, 1, 1), n_splits=3)
    rep = run_crossval(ds, labels.maps, plan)
    return ds, labels.maps, rep, time.perf_counter() - start


def test_criterion_5_surrogate_accuracy(report, ci_run):
    _, _, rep, took = ci_run
    per = ", ".join(f"{s.rel_error:.1%}" for s in rep.splits)
    report(5, rep.mean_rel_error <= 0.10 and took <= 20 * 60,
           f"reduced suite mean relative error {rep.mean_rel_error:.1%} (<=10%; splits {per}), "
           f"MSE mean (std) {rep.mse_line()}", took)


def test_criterion_6_speedup(report, ci_run):
    ds, _, rep, _ = ci_run
    weights = rep.weights[0]
    timing = benchmark(ds.patients[0], weights, mcmc_cfg=McmcConfig(seed=0), workers=1)
    # a default-size 63x63 slice for the absolute surrogate budget
    big = generate_phantom(PhantomSpec("S", width=63, height=63, seed=1))
    samples = build_samples(big)
    t0 = time.perf_counter()
    predict(weights, samples)
    big_s = time.perf_counter() - t0
    ok = timing.identical_voxels and timing.speedup >= 100 and big_s <= 2.0
    report(6, ok, f"speedup {timing.speedup:.0f}x on {timing.n_voxels} voxels (>=100x), "
                  f"63x63 slice ({len(samples)} voxels) predicted in {big_s:.2f} s (<=2 s)")


def test_criterion_7_delay_invariance(report, ci_run):
    ds, _, rep, _ = ci_run
    changes = []
    for split, weights in zip(rep.splits, rep.weights):
        for pid in split.test:
            s = build_samples(ds[pid])
            base = predict(weights, s)
            for d in (-2, 2):
                shifts = np.full(len(s), d)
                moved, _ = forward(weights, shift_samples(s.aif, shifts), shift_samples(s.tissue, shifts))
                changes.append(np.abs(moved - base) / np.abs(base))
    mean = float(np.mean(np.concatenate(changes)))
    report(7, mean <= 0.10, f"mean relative change under +-2 sample shift {mean:.1%} (<=10%)")


def test_criterion_8_defect_detectability(report, ci_run):
    ds, _, rep, _ = ci_run
    ratios = {}
    for split, preds in zip(rep.splits, rep.predictions):
        for pid in split.test:
            p = ds[pid]
            if p.spec.defect is None or pid in ratios:
                continue
            disc = defect_disc(p.spec.defect, *reversed(p.shape)) & p.mask
            remote = p.mask & ~disc
            ratios[pid] = float(np.mean(preds[pid][disc]) / np.mean(preds[pid][remote]))
    diseased = [p.id for p in ds.patients if p.spec.defect is not None]
    ok = sorted(ratios) == sorted(diseased) and all(r < 0.70 for r in ratios.values())
    detail = ", ".join(f"{k} {v:.2f}" for k, v in sorted(ratios.items()))
    report(8, ok, f"defect/remote predicted MBF ratio {detail} (<0.70 for all {len(diseased)} diseased)")


# -- 9 ----------------------------------------------------------------------------


def test_criterion_9_split_plans(report):
    ids = [f"P{i:02d}" for i in range(1, 10)]
    bad = 0
    for seed in range(1000):
        plan = make_splits(ids, seed)
        sizes_ok = all((len(s.train), len(s.val), len(s.test)) == (5, 2, 2)
                       and sorted(s.train + s.val + s.test) == ids for s in plan)
        covered = set().union(*(s.test for s in plan)) == set(ids)
        bad += not (sizes_ok and covered and len(plan) == 10)
    report(9, bad == 0, f"{1000 - bad}/1000 plans valid")


# -- 10 ---------------------------------------------------------------------------


def test_criterion_10_persistence(report, tmp_path):
    ds = reduced_suite(1)
    formats.write_dataset(ds, tmp_path / "ds")
    ds_ok = formats.read_dataset(tmp_path / "ds") == ds
    m = ds.patients[0].truth_mbf()
    formats.write_map(tmp_path / "m.map", m, ds.patients[0].id)
    map_ok = np.array_equal(formats.read_map(tmp_path / "m.map")[2], m, equal_nan=True)
    cfg = NetworkConfig(n_times=ds.patients[0].grid.n, seed=4)
    rng = np.random.default_rng(0)
    w = NetworkWeights(cfg, OrderedDict((k, rng.normal(0, 0.3, s)) for k, s in weight_shapes(cfg).items()))
    formats.write_weights(tmp_path / "w.txt", w)
    back = formats.read_weights(tmp_path / "w.txt")
    s = build_samples(ds.patients[0])
    preds_ok = back == w and np.array_equal(predict(w, s), predict(back, s))
    report(10, ds_ok and map_ok and preds_ok,
           f"dataset {ds_ok}, map {map_ok}, weights and predictions bit-exact {preds_ok}")
