"""End-to-end validation suite against independent oracles.

Each criterion pins its own instances, solver configuration, and tolerances,
runs deterministically for a given master seed, and reports a pass/fail row.
The same runners back both the test suite and the command-line `validate`
subcommand; reports contain no timestamps or timings, so identical seeds give
byte-identical reports.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import calculus as calc
from . import lot
from . import oracles as orc
from . import solver as sol
from . import stats as st
from .volume import DensityVolume, GridSpec, normalize_density


@dataclass
class CriterionResult:
    cid: str
    name: str
    passed: bool
    measured: str
    requirement: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.cid:>3} {self.name}: {self.measured} (require {self.requirement})"


def _fmt(x: float) -> str:
    return f"{x:.4g}"


# --- 1: gradient against central finite differences ------------------------

def criterion_gradient(seed: int = 0, gradient_fn=None) -> CriterionResult:
    grid = GridSpec((8, 8, 8))
    cfg = sol.SolverConfig()
    start = time.time()
    worst = 0.0
    for pair_idx in range(4):
        i0 = orc.random_smooth_density(grid, seed * 1000 + 2 * pair_idx,
                                       n_blobs=3, sigma=1.6)
        i1 = orc.random_smooth_density(grid, seed * 1000 + 2 * pair_idx + 1,
                                       n_blobs=3, sigma=1.6)
        base = calc.identity_map(grid)
        worst = max(worst, orc.fd_objective_check(
            base, i0, i1, cfg, trials=5, eps=1e-5,
            seed=seed * 77 + pair_idx, gradient_fn=gradient_fn))
    within_budget = (time.time() - start) <= 60.0
    passed = worst <= 1e-3 and within_budget
    measured = f"max rel err {_fmt(worst)}; runtime budget {'met' if within_budget else 'exceeded'}"
    return CriterionResult("1", "gradient-vs-finite-difference", passed,
                           measured, "err <= 1e-3 over 20 draws; <= 60 s")


# --- 2: 2D termination and curl targets ------------------------------------

def criterion_termination_2d(seed: int = 0, pairs: int = 10) -> CriterionResult:
    grid = GridSpec((128, 128))
    cfg = sol.SolverConfig(mse_termination=1e-6, max_iters=1300,
                           stagnation_window=10 ** 9, stagnation_tol=0.0)
    worst_mse = 0.0
    worst_curl = 0.0
    budget_ok = True
    for k in range(pairs):
        i0, i1 = orc.random_smooth_pair(grid, seed * 500 + k, n_blobs=6,
                                        sigma=9.0, jitter=3.0)
        start = time.time()
        res = sol.solve(i0, i1, cfg)
        budget_ok = budget_ok and (time.time() - start) <= 60.0
        worst_mse = max(worst_mse, res.rel_mse)
        worst_curl = max(worst_curl, res.mean_curl)
    passed = worst_mse <= 0.0055 and worst_curl <= 1e-3 and budget_ok
    measured = (f"worst rel MSE {_fmt(worst_mse)}; worst mean curl "
                f"{_fmt(worst_curl)}; per-pair budget {'met' if budget_ok else 'exceeded'}")
    return CriterionResult("2", "2d-termination-targets", passed, measured,
                           "MSE <= 0.55%; curl <= 1e-3; <= 60 s/pair")


# --- 3: LP optimality bracket -----------------------------------------------

def criterion_lp_bracket(seed: int = 0, pairs: int = 10) -> CriterionResult:
    grid = GridSpec((16, 16))
    X = calc.identity_map(grid).components
    cfg = sol.SolverConfig(lam=1000.0, mse_termination=1e-6, max_iters=4000,
                           scales=2, stagnation_window=600,
                           stagnation_tol=1e-13)
    ratios = []
    for k in range(pairs):
        rng = np.random.default_rng(seed * 300 + k)
        sigma = rng.uniform(2.7, 3.0)
        ang = rng.uniform(0, 2 * np.pi)
        t = rng.uniform(1.8, 2.1) * np.array([np.cos(ang), np.sin(ang)])
        c0 = np.array([8.0, 8.0]) + rng.uniform(-0.3, 0.3, 2)
        def bump(c):
            v = np.exp(-(((X[0] - c[0]) ** 2 + (X[1] - c[1]) ** 2)
                         / (2 * sigma * sigma)))
            return normalize_density(DensityVolume(grid, v), 1e6, 0.1)
        i0, i1 = bump(c0 - t / 2), bump(c0 + t / 2)
        lp = orc.kantorovich_lp(i0, i1)
        res = sol.solve(i0, i1, cfg)
        ratios.append(res.cost / lp)
    lo, hi = min(ratios), max(ratios)
    passed = lo >= 1.0 and hi <= 1.05
    measured = f"cost/LP in [{_fmt(lo)}, {_fmt(hi)}] over {pairs} pairs"
    return CriterionResult("3", "lp-optimality-bracket", passed, measured,
                           "all ratios in [1.0, 1.05]")


# --- 4: 1D and separable equivalence ----------------------------------------

def criterion_separable(seed: int = 0) -> CriterionResult:
    # embedded-1D: product density, transport along the first axis only
    g1 = GridSpec((80, 24))
    X1 = calc.identity_map(g1).components
    def prof(cx):
        v = (np.exp(-((X1[0] - cx) ** 2) / (2 * 6.5 ** 2))
             * np.exp(-((X1[1] - 12.0) ** 2) / 32.0))
        return normalize_density(DensityVolume(g1, v), 1e6, 0.1)
    cfg = sol.SolverConfig(lam=1000.0, mse_termination=1e-7, max_iters=4000,
                           scales=2, stagnation_window=500,
                           stagnation_tol=1e-13)
    i0, i1 = prof(38.8), prof(41.2)
    res1 = sol.solve(i0, i1, cfg)
    p, q = i0.values.sum(axis=1), i1.values.sum(axis=1)
    _, c1d = orc.omt_1d(p, q * (p.sum() / q.sum()))
    err_1d = abs(res1.cost - c1d) / c1d

    # separable 2D product with per-axis shifts
    g2 = GridSpec((48, 48))
    X2 = calc.identity_map(g2).components
    def prod(cx, cy):
        v = (np.exp(-((X2[0] - cx) ** 2) / (2 * 25.0))
             * np.exp(-((X2[1] - cy) ** 2) / (2 * 36.0)))
        return normalize_density(DensityVolume(g2, v), 1e6, 0.1)
    a, b = prod(22.0, 23.0), prod(24.0, 24.5)
    res2 = sol.solve(a, b, cfg)
    px, qx = a.values.sum(axis=1), b.values.sum(axis=1)
    py, qy = a.values.sum(axis=0), b.values.sum(axis=0)
    _, cx_ = orc.omt_1d(px, qx * (px.sum() / qx.sum()))
    _, cy_ = orc.omt_1d(py, qy * (py.sum() / qy.sum()))
    err_sep = abs(res2.cost - (cx_ + cy_)) / (cx_ + cy_)

    passed = err_1d <= 0.01 and err_sep <= 0.02
    measured = f"1D-embedded err {_fmt(err_1d)}; separable err {_fmt(err_sep)}"
    return CriterionResult("4", "1d-and-separable-equivalence", passed,
                           measured, "1D within 1%; separable within 2%")


# --- 5: translation recovery -------------------------------------------------

def criterion_translation(seed: int = 0) -> CriterionResult:
    grid = GridSpec((64, 64))
    c = np.array([30.5, 32.0])
    t = np.array([3.0, 0.0])
    i0 = orc.gaussian_bump(grid, c, 6.0)
    i1 = orc.gaussian_bump(grid, c + t, 6.0)
    cfg = sol.SolverConfig(mse_termination=1e-7, max_iters=5000,
                           stagnation_window=500, stagnation_tol=1e-13)
    res = sol.solve(i0, i1, cfg)
    disp = res.map.components - calc.identity_map(grid).components
    mask = i0.values > 0.01 * i0.values.max()
    err = float(np.sqrt((disp[0] - t[0]) ** 2 + (disp[1] - t[1]) ** 2)[mask].mean())
    cost_err = abs(res.cost - 9.0 * i0.mass) / (9.0 * i0.mass)
    passed = err <= 0.1 and cost_err <= 0.05
    measured = f"mean displacement err {_fmt(err)} vox; cost off by {_fmt(cost_err)}"
    return CriterionResult("5", "translation-recovery", passed, measured,
                           "err <= 0.1 vox; cost within 5%")


# --- 6: transform round trip -------------------------------------------------

def criterion_roundtrip(seed: int = 0, phantoms: int = 5) -> CriterionResult:
    grid = GridSpec((96, 96))
    cfg = sol.SolverConfig(mse_termination=2e-6, max_iters=2500,
                           stagnation_window=400, stagnation_tol=1e-12)
    worst = 0.0
    for k in range(phantoms):
        tmpl_vol, subj = orc.random_smooth_pair(
            grid, seed * 40 + k, n_blobs=4, sigma=11.0, jitter=2.0,
            margin_frac=0.30)
        template = lot.Template(tmpl_vol)
        emb = lot.analyze(template, subj, cfg)
        recon = lot.synthesize(template, emb)
        rel = float(np.linalg.norm(recon.values - subj.values)
                    / np.linalg.norm(subj.values))
        worst = max(worst, rel)
    passed = worst <= 0.01
    measured = f"worst round-trip rel L2 {_fmt(worst)} over {phantoms} phantoms"
    return CriterionResult("6", "transform-round-trip", passed, measured,
                           "<= 1%")


# --- 7: regression pipeline ---------------------------------------------------

def criterion_regression(seed: int = 0) -> CriterionResult:
    spec = orc.Phantom(family="aging", count=40, dims=(64, 64),
                       seed=seed + 11, noise=0.02)
    vols, covs, _ = orc.make_phantom_cohort(spec)
    template = lot.build_template(vols)
    cfg = sol.SolverConfig(mse_termination=1e-4, max_iters=700, scales=3,
                           stagnation_window=150, stagnation_tol=1e-10)
    embs = [lot.analyze(template, v, cfg) for v in vols]
    cohort = st.cohort_from_embeddings(embs, covariate=covs)
    res = st.correlation_direction(cohort)
    p = st.permutation_test(
        cohort, lambda c: st.correlation_direction(c).statistic,
        trials=1000, seed=seed + 5)
    mean_emb = lot.LotEmbedding(cohort.grid,
                                np.mean([e.payload for e in embs], axis=0))
    direction = lot.LotEmbedding.from_vector(cohort.grid, res.direction)
    lo, hi = np.quantile(res.scores, [0.1, 0.9])
    radii = [orc.cavity_mean_radius(
        lot.synthesize(template, mean_emb + float(nu) * direction))
        for nu in np.linspace(lo, hi, 5)]
    monotone = bool(np.all(np.diff(radii) > 0))
    passed = res.statistic >= 0.95 and p <= 0.001 + 1 / 1001 and monotone
    measured = (f"r {_fmt(res.statistic)}; p {_fmt(p)}; cavity growth "
                f"{'monotone' if monotone else 'not monotone'}")
    return CriterionResult("7", "aging-regression-pipeline", passed, measured,
                           "r >= 0.95; p <= 0.002; monotone series")


# --- 8: discrimination pipeline -----------------------------------------------

def _plda_ridge(cohort: st.Cohort) -> float:
    red = st.reduce(cohort)
    z = red.coords
    total = 0.0
    for label in sorted(set(cohort.labels.tolist())):
        zc = z[:, cohort.labels == label]
        zc = zc - zc.mean(axis=1, keepdims=True)
        total += float(np.sum(zc * zc))
    return 1e-6 * total + 1e-12


def criterion_discrimination(seed: int = 0) -> CriterionResult:
    spec = orc.Phantom(family="two_class", count=20, dims=(64, 64),
                       seed=seed + 13, class_offset=4.0, jitter=0.75,
                       sigma=5.0)
    vols, _, labels = orc.make_phantom_cohort(spec)
    template = lot.build_template(vols)
    cfg = sol.SolverConfig(mse_termination=1e-4, max_iters=700, scales=3,
                           stagnation_window=150, stagnation_tol=1e-10)
    embs = [lot.analyze(template, v, cfg) for v in vols]
    cohort = st.cohort_from_embeddings(embs, labels=labels)
    res = st.plda(cohort, alpha=_plda_ridge(cohort))
    s0 = res.scores[cohort.labels == 0]
    s1 = res.scores[cohort.labels == 1]
    separated = bool(s0.max() < s1.min() or s1.max() < s0.min())
    p = st.permutation_test(
        cohort, lambda c: st.plda(c, alpha=_plda_ridge(c)).statistic,
        trials=1000, seed=seed + 7, permute="labels")
    passed = separated and p <= 0.01
    measured = (f"training projections {'separated' if separated else 'overlap'}; "
                f"label-permutation p {_fmt(p)}")
    return CriterionResult("8", "two-class-discrimination", passed, measured,
                           "zero overlap; p <= 0.01")


# --- 9: transport-space compaction ---------------------------------------------

def criterion_compaction(seed: int = 0) -> CriterionResult:
    grid = GridSpec((64, 64))
    count, step, sigma = 10, 1.5, 4.0
    center = np.array([32.0, 32.0])
    vols = []
    for k in range(count):
        c = center.copy()
        c[0] += (k - 0.5 * (count - 1)) * step
        vols.append(orc.gaussian_bump(grid, c, sigma))
    img_matrix = np.stack([v.values.ravel() for v in vols], axis=1)
    image_share = st.pca(st.Cohort(img_matrix)).variance_share(0)
    template = lot.Template(orc.gaussian_bump(grid, center, sigma))
    cfg = sol.SolverConfig(mse_termination=1e-5, max_iters=1200, scales=2,
                           stagnation_window=300, stagnation_tol=1e-12)
    embs = [lot.analyze(template, v, cfg) for v in vols]
    transport_share = st.pca(st.cohort_from_embeddings(embs)).variance_share(0)
    passed = transport_share >= 0.99 and image_share <= 0.80
    measured = (f"transport PC1 share {_fmt(transport_share)}; "
                f"image-domain PC1 share {_fmt(image_share)}")
    return CriterionResult("9", "pca-compaction", passed, measured,
                           "transport >= 99%; image <= 80%")


# --- 10: 3D smoke ---------------------------------------------------------------

def criterion_smoke_3d(seed: int = 0) -> CriterionResult:
    grid = GridSpec((32, 32, 32))
    i0, i1 = orc.random_smooth_pair(grid, seed * 70 + 3, n_blobs=4,
                                    sigma=3.5, jitter=1.5)
    cfg = sol.SolverConfig(mse_termination=1e-5, max_iters=1200,
                           stagnation_window=200, stagnation_tol=1e-11)
    start = time.time()
    res = sol.solve(i0, i1, cfg)
    within_budget = (time.time() - start) <= 600.0
    passed = res.rel_mse <= 0.0055 and res.min_det > 0 and within_budget
    measured = (f"rel MSE {_fmt(res.rel_mse)}; min det {_fmt(res.min_det)}; "
                f"runtime budget {'met' if within_budget else 'exceeded'}")
    return CriterionResult("10", "3d-smoke", passed, measured,
                           "MSE <= 0.55%; det > 0; <= 10 min")


# --- 11: determinism -------------------------------------------------------------

def criterion_determinism(seed: int = 0) -> CriterionResult:
    first = format_report([criterion_gradient(seed), criterion_compaction(seed)],
                          seed)
    second = format_report([criterion_gradient(seed), criterion_compaction(seed)],
                           seed)
    passed = first == second
    measured = "repeated runs byte-identical" if passed else "reports differ"
    return CriterionResult("11", "determinism", passed, measured,
                           "byte-identical reports")


CRITERIA = {
    "1": criterion_gradient,
    "2": criterion_termination_2d,
    "3": criterion_lp_bracket,
    "4": criterion_separable,
    "5": criterion_translation,
    "6": criterion_roundtrip,
    "7": criterion_regression,
    "8": criterion_discrimination,
    "9": criterion_compaction,
    "10": criterion_smoke_3d,
    "11": criterion_determinism,
}


def run_criteria(ids=None, seed: int = 0, tamper_gradient: bool = False):
    """Run the selected criteria (all by default), coarsest-stable order."""
    ids = [str(i) for i in (ids or CRITERIA.keys())]
    results = []
    for cid in ids:
        if cid not in CRITERIA:
            raise KeyError(f"unknown criterion {cid!r}")
        if cid == "1" and tamper_gradient:
            def bad_gradient(f, a, b, c):
                grad, _ = sol.el_gradient(f, a, b, c, gamma_active=True)
                grad.components = grad.components * 1.02  # deliberate 2% skew
                return grad
            results.append(criterion_gradient(seed, gradient_fn=bad_gradient))
        else:
            results.append(CRITERIA[cid](seed))
    return results


def format_report(results, seed: int) -> str:
    lines = [f"validation report (seed {seed})"]
    for r in results:
        lines.append(r.line())
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} criteria passed")
    return "\n".join(lines) + "\n"
