"""Acceptance gates, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line; the lines are repeated
in a summary section at the end of the pytest run.  Criteria 8 and 9 train
dozens of models and take tens of minutes (``-m "not slow"`` skips them).
"""

import math
import os
import time

import numpy as np
import pytest

from abckit import attribution as att
from abckit._util import counting
from abckit.codebook import assign_codewords, estimate_costs, min_ensemble_size, verify_theorem1
from abckit.config import validate_config
from abckit.dataset import MNIST_STYLE, generate_synthetic, normalize
from abckit.diffabl import approx_counterfactual, approx_landscape, fidelity_report, jacobian
from abckit.diffusion import TrainConfig, draw_exogenous, make_schedule, sample
from abckit.ensemble import (EnsembleModel, ensemble_predictor, mask_to_coefficients, predict_mean,
                             predict_weighted, train_ensemble)
from abckit.experiment import run_experiment
from abckit.landscape import (UNATTRIBUTABLE, certificate_check, classify_attributability,
                              counterfactual_radius, enumerate_landscape)
from abckit.retrain import compare_paradigms, rbc_attribution, rbc_landscape, train_rbc_suite
from abckit import ensemble as ensemble_mod, retrain as retrain_mod

from conftest import gate


def desk_data(count=32, side=16, seed=0, blobs=(2, 4)):
    return normalize(generate_synthetic(count, side=side, seed=seed, blobs=blobs), MNIST_STYLE)


# -- 1 ---------------------------------------------------------------------------


def test_c01_theorem_exhaustive():
    t0 = time.time()
    checked = 0
    ok = True
    for n in range(2, 11):
        w = n // 2
        cap = math.comb(n, w)
        for seed in range(10):
            cb = assign_codewords(cap, n, w, seed)
            # independent pairwise oracle over Python sets
            sets = [frozenset(np.flatnonzero(row).tolist()) for row in cb.words]
            pair_ok = all(sets[a] - sets[b] for a in range(cap) for b in range(cap) if a != b)
            ok &= pair_ok and verify_theorem1(cb).ok
            checked += 1
    dt = time.time() - t0
    gate(1, "every ordered pair of distinct codewords leaves a member", ok and dt < 10,
         f"{checked} codebooks, n=2..10, {dt:.1f}s")


# -- 2 ---------------------------------------------------------------------------


def _oracle_size(N):
    n = 2
    while math.comb(n, n // 2) < N:
        n += 1
    return n


def test_c02_sizing_bound():
    exact = min_ensemble_size(50000) == 19 and min_ensemble_size(20) == 6
    agree = all(min_ensemble_size(N) == _oracle_size(N) for N in list(range(1, 300)) + [10 ** e for e in range(1, 7)])
    bound = all(min_ensemble_size(10 ** e) <= 2 * math.log2(10 ** e) + 4 for e in range(1, 7))
    gate(2, "min ensemble size 19 / 6, oracle agreement, n <= 2 log2 N + 4", exact and agree and bound,
         f"sizes {[min_ensemble_size(10 ** e) for e in range(1, 7)]}")


# -- 3 ---------------------------------------------------------------------------


def test_c03_random_baseline():
    t0 = time.time()
    mean, sd = att.intersection_baseline(384, 8, 1024)
    table = abs(mean - 158.73) <= 0.01 and abs(sd - 11.58) <= 0.01
    draws = 100_000
    hits = att.simulate_intersections(384, 8, draws, seed=7)
    p = att.intersection_probability(384, 8)
    se = math.sqrt(p * (1 - p) / draws)
    mc = abs(hits / draws - p) <= 3 * se
    dt = time.time() - t0
    gate(3, "random baseline 158.73 / 11.58 and Monte Carlo agreement", table and mc and dt < 30,
         f"mean {mean:.3f} sd {sd:.3f}; MC p {hits / draws:.5f} vs {p:.5f} (3 se {3 * se:.5f}); {dt:.1f}s")


# -- 4 ---------------------------------------------------------------------------

DESK_RUN = """
[dataset]
count = 32
side = 16
seed = 0

[codebook]
n = 8
w = 4

[schedule]
K = 20

[train]
steps = 40

[sampling]
samples = 2

[attribution]
k = 4
"""


def _with_threads(n, fn, *args, **kw):
    old = os.environ.get("ABCKIT_THREADS")
    os.environ["ABCKIT_THREADS"] = str(n)
    try:
        return fn(*args, **kw)
    finally:
        if old is None:
            del os.environ["ABCKIT_THREADS"]
        else:
            os.environ["ABCKIT_THREADS"] = old


def _bytes_of(e):
    return b"".join(m.flat.tobytes() for m in e.members)


def test_c04_determinism(tmp_path):
    t0 = time.time()
    d = desk_data()
    cb = assign_codewords(32, 8, 4, seed=0)
    sched = make_schedule(K=20)
    cfg = TrainConfig(steps=40, seed=0)
    runs = [(1, "a"), (1, "b"), (4, "c")]
    trained = [_with_threads(t, train_ensemble, d, cb, cfg, sched) for t, _ in runs]
    train_ok = len({_bytes_of(e) for e in trained}) == 1
    fact, land = set(), set()
    e = trained[0]
    for t, _ in runs:
        for seed in (0, 1):
            for mode in ("deterministic", "ancestral"):
                noise = draw_exogenous(seed, sched, mode, (1, 16, 16))
                l = _with_threads(t, enumerate_landscape, e, noise)
                fact.add((seed, mode, l.factual.tobytes()))
                land.add((seed, mode, l.distances.tobytes()))
    gen_ok = len(fact) == 4 and len(land) == 4
    cfg_run = validate_config(DESK_RUN)
    for t, tag in runs:
        _with_threads(t, run_experiment, cfg_run, str(tmp_path / tag))
    names = sorted(f for f in os.listdir(tmp_path / "a") if f.endswith(".csv"))
    csv_ok = len(names) >= 4 and all(
        len({(tmp_path / tag / nm).read_bytes() for _, tag in runs}) == 1 for nm in names)
    dt = time.time() - t0
    gate(4, "byte-identical training, factuals, landscapes and run CSVs across repeats and 1/4 threads",
         train_ok and gen_ok and csv_ok and dt < 600,
         f"training {train_ok}, generation {gen_ok}, csv {csv_ok} ({len(names)} files); {dt:.0f}s")


# -- 5 ---------------------------------------------------------------------------


def test_c05_mask_weight_equivalence():
    d = desk_data(count=16, side=8, seed=1)
    sched = make_schedule(50, 5)
    e = train_ensemble(d, assign_codewords(16, 8, 4, seed=2), TrainConfig(steps=30, width=4, hidden=16), sched)
    rng = np.random.default_rng(5)
    same, masks = 0, 0
    while masks < 100:
        mask = rng.random(8) < 0.5
        if not mask.any():
            continue
        masks += 1
        x = rng.standard_normal((1, 8, 8))
        t = int(rng.integers(1, 51))
        a = predict_weighted(e, mask_to_coefficients(mask), x, t)
        b = predict_mean(e, mask, x, t)
        same += a.tobytes() == b.tobytes()
    gate(5, "weighted prediction with mask coefficients equals masked mean bit for bit", same == 100,
         f"{same}/100 masks")


# -- 6 ---------------------------------------------------------------------------


def _sample_at(e, c, noise):
    return sample(ensemble_predictor(e, np.asarray(c, dtype=np.float64)[None]), e.schedule, noise, batch=1)[0]


def test_c06_jacobian_correctness():
    t0 = time.time()
    d = desk_data(count=6, side=16, seed=2)
    cb = assign_codewords(6, 4, 2, seed=0)
    e = train_ensemble(d, cb, TrainConfig(steps=150, seed=1), make_schedule(K=10))
    worst = 0.0
    h = 1e-3
    for seed, mode in ((0, "deterministic"), (1, "deterministic"), (2, "ancestral")):
        noise = draw_exogenous(seed, e.schedule, mode, (1, 16, 16))
        jac = jacobian(e, noise)
        for j in range(e.n):
            step = np.zeros(e.n)
            step[j] = h
            fd = (_sample_at(e, 1 + step, noise) - _sample_at(e, 1 - step, noise)).ravel() / (2 * h)
            worst = max(worst, float(np.linalg.norm(jac.J[:, j] - fd) / np.linalg.norm(fd)))
    one = EnsembleModel(e.members, make_schedule(K=1), cb)
    affine = 0.0
    for seed in range(3):
        noise = draw_exogenous(seed, one.schedule, "deterministic", (1, 16, 16))
        jac = jacobian(one, noise)
        for s in range(cb.N):
            c = mask_to_coefficients(cb.words[s] == 0)
            affine = max(affine, float(np.max(np.abs(approx_counterfactual(jac, c) - _sample_at(one, c, noise)))))
    dt = time.time() - t0
    gate(6, "Jacobian columns match central differences; K=1 approximation is exact",
         worst <= 1e-3 and affine <= 1e-8 and dt < 300,
         f"worst column rel. error {worst:.2e}, K=1 max abs error {affine:.2e}; {dt:.0f}s")


# -- 7 ---------------------------------------------------------------------------

FIDELITY_STEPS = 1500
FIDELITY_LANDSCAPES = 20


def test_c07_differential_fidelity():
    t0 = time.time()
    d = desk_data()
    cb = assign_codewords(32, 8, 4, seed=0)
    e = train_ensemble(d, cb, TrainConfig(steps=FIDELITY_STEPS, seed=0), make_schedule(K=20))
    rhos, pears = [], []
    for m in range(FIDELITY_LANDSCAPES):
        noise = draw_exogenous(100 + m, e.schedule, "deterministic", (1, 16, 16))
        exact = enumerate_landscape(e, noise, keep_images=True)
        approx = approx_landscape(jacobian(e, noise), cb, keep_images=True)
        fr = fidelity_report(exact, approx)
        rhos.append(fr.spearman)
        pears.append(fr.median_pearson)
    rho, pear = float(np.nanmedian(rhos)), float(np.nanmedian(pears))
    dt = time.time() - t0
    gate(7, "median Spearman >= 0.7 and median per-pixel Pearson >= 0.5 (exact vs first-order landscapes)",
         rho >= 0.7 and pear >= 0.5, f"{FIDELITY_LANDSCAPES} landscapes: Spearman {rho:.3f}, Pearson {pear:.3f}; {dt:.0f}s")


# -- 8 ---------------------------------------------------------------------------

TREND_RUN = """
[dataset]
side = 16
groups = 64
seed = 0

[codebook]
n = 8
w = 4

[schedule]
K = 20

[train]
steps = {steps}

[sampling]
samples = {samples}

[attribution]
k = 8

[trend]
sizes = [64, 256, 1024]
permutations = 2000
"""
TREND_STEPS = 3000
TREND_SAMPLES = 40


@pytest.mark.slow
def test_c08_radius_trend(tmp_path):
    t0 = time.time()
    cfg = validate_config(TREND_RUN.format(steps=TREND_STEPS, samples=TREND_SAMPLES))
    bundle = run_experiment(cfg, str(tmp_path / "trend"))
    sizes = sorted(bundle.radii)
    means = [float(np.mean(np.log10(bundle.radii[s]))) for s in sizes]
    decreasing = all(a > b for a, b in zip(means, means[1:]))
    fit = bundle.trend
    dt = time.time() - t0
    gate(8, "mean log10 radius strictly decreasing in training-set size; OLS slope < 0 with p < 0.05",
         decreasing and fit.slope < 0 and fit.p_perm < 0.05 and dt < 5400,
         f"sizes {sizes}, mean log10 radius {[round(v, 3) for v in means]}, slope {fit.slope:.3f}, "
         f"p {fit.p_perm:.4f}; {dt / 60:.1f} min")


# -- 9 ---------------------------------------------------------------------------

MICRO_STEPS = 3000
MICRO_SAMPLES = 64


@pytest.mark.slow
def test_c09_abc_vs_rbc():
    t0 = time.time()
    d = desk_data(count=32, side=8, seed=5, blobs=(1, 4))
    sched = make_schedule(K=10)
    cfg = TrainConfig(steps=MICRO_STEPS, seed=0)
    e = train_ensemble(d, assign_codewords(32, 8, 4, seed=0), cfg, sched)
    suite = train_rbc_suite(d, cfg, sched)
    abc, va, rbc, vr = [], [], [], []
    for m in range(MICRO_SAMPLES):
        noise = draw_exogenous(1000 + m, sched, "deterministic", (1, 8, 8))
        la = enumerate_landscape(e, noise)
        abc.append(att.counterfactual_attribution(la))
        va.append(att.visual_attribution(la.factual, d))
        lr = rbc_landscape(suite, noise)
        rbc.append(rbc_attribution(lr))
        vr.append(att.visual_attribution(lr.factual, d))
    res = compare_paradigms(abc, rbc, va, 4, rbc_visual=vr)
    mean, sd = res["baseline"]
    need = mean + 2 * sd
    dt = time.time() - t0
    gate(9, "ABC and RBC top-4 intersections both exceed baseline mean + 2 sd",
         res["abc_hits"] >= need and res["rbc_hits"] >= need and dt < 3600,
         f"ABC {res['abc_hits']}, RBC {res['rbc_hits']}, threshold {need:.2f} (mean {mean:.2f}, sd {sd:.2f}); "
         f"{dt / 60:.1f} min")


# -- 10 --------------------------------------------------------------------------


def test_c10_unattributability():
    t0 = time.time()
    d = desk_data(count=12, side=8, seed=4)
    cb = assign_codewords(12, 6, 3, seed=0)
    sched = make_schedule(K=10)
    e = train_ensemble(d, cb, TrainConfig(steps=300, width=8, hidden=32), sched)
    same = EnsembleModel((e.members[0],) * e.n, sched, cb)
    shape = (1, 8, 8)
    a_ok = True
    for seed in range(10):
        for mode in ("deterministic", "ancestral"):
            l = enumerate_landscape(same, draw_exogenous(seed, sched, mode, shape), "exact", keep_images=True,
                                    binarize_threshold=0.0)
            a_ok &= counterfactual_radius(l).radius == 0 and certificate_check(l)
    mid = sum(d.value_range) / 2
    b_ok, verdicts = True, {True: 0, False: 0}
    # a mix of real, identical and partly identical ensembles gives both outcomes
    partly = EnsembleModel((e.members[0],) * 3 + e.members[3:], sched, cb)
    for model in (e, partly, same):
        for seed in range(20):
            l = enumerate_landscape(model, draw_exogenous(seed, sched, "deterministic", shape), "exact",
                                    keep_images=True, binarize_threshold=mid)
            r = counterfactual_radius(l, tau=0.5)
            all_equal = bool(np.all(l.counterfactuals == l.factual[None]))
            unattr = classify_attributability(r, 0.5, discrete=True) == UNATTRIBUTABLE
            b_ok &= unattr == all_equal == certificate_check(l) == (r.radius == 0) == (r.verdict == UNATTRIBUTABLE)
            verdicts[unattr] += 1
    dt = time.time() - t0
    gate(10, "identical members certify non-attributability; binarized verdicts match bit-equality and exact radius",
         a_ok and b_ok and verdicts[True] > 0 and verdicts[False] > 0 and dt < 300,
         f"(a) {a_ok}; (b) {b_ok} with {verdicts[True]} unattributable / {verdicts[False]} attributable; {dt:.0f}s")


# -- 11 --------------------------------------------------------------------------


def test_c11_costs(monkeypatch):
    c = estimate_costs(100, 10, 5, 20, 1)
    hand = ((c["rbc"].trainings, c["rbc"].denoiser_calls) == (101, 2020)
            and (c["abc"].trainings, c["abc"].denoiser_calls) == (10, 10200)
            and (c["diffabl"].trainings, c["diffabl"].denoiser_calls, c["diffabl"].matvecs) == (10, 2200, 100))
    trainings = []
    for mod in (ensemble_mod, retrain_mod):
        real = mod.train_denoiser

        def counted(*a, _real=real, **kw):
            trainings.append(1)
            return _real(*a, **kw)

        monkeypatch.setattr(mod, "train_denoiser", counted)
    # C(4, 2) = 6 codewords cannot host 8 sources; measure both neighbours
    runs = {}
    for N, n, w in ((6, 4, 2), (8, 5, 2)):
        got, want = _measure_costs(N, n, w, 5, 3, trainings)
        runs[(N, n, w)] = got == want
    gate(11, "cost formulas match hand counts and instrumented runs", hand and all(runs.values()),
         f"hand {hand}; instrumented {runs}")


def _measure_costs(N, n, w, K, M, trainings):
    d = desk_data(count=N, side=8, seed=6)
    sched = make_schedule(50, K)
    cfg = TrainConfig(steps=5, width=4, hidden=8)
    cb = assign_codewords(N, n, w, seed=0)
    got = {}
    trainings.clear()
    e = train_ensemble(d, cb, cfg, sched)
    t_abc = len(trainings)
    noises = [draw_exogenous(m, sched, shape=(1, 8, 8)) for m in range(M)]
    with counting() as ctr:
        for noise in noises:
            enumerate_landscape(e, noise)
    got["abc"] = (t_abc, ctr.denoiser_calls, ctr.matvecs)
    with counting() as ctr:
        for noise in noises:
            approx_landscape(jacobian(e, noise), cb)
    got["diffabl"] = (t_abc, ctr.denoiser_calls, ctr.matvecs)
    trainings.clear()
    suite = train_rbc_suite(d, cfg, sched)
    t_rbc = len(trainings)
    with counting() as ctr:
        for noise in noises:
            rbc_landscape(suite, noise)
    got["rbc"] = (t_rbc, ctr.denoiser_calls, ctr.matvecs)
    want = {k: (v.trainings, v.denoiser_calls, v.matvecs) for k, v in estimate_costs(N, n, w, K, M).items()}
    return got, want
