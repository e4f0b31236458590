"""Acceptance suite: one test per criterion, one verdict line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the measured
values; each criterion prints a single PASS line with its margins or
fails its assertion.
"""
import time

import numpy as np
import pytest

from carnot_kit.algebra import list_groups, load_group
from carnot_kit.decompose import batch_decompose, empirical_c0, evaluate_word
from carnot_kit.density import (david_fraction, density_estimates,
                                segment_cloud, uniform_ball_cloud)
from carnot_kit.fragments import (Cone, separated_cones,
                                  synthetic_drift_fragment, verify_drift)
from carnot_kit import group as grp
from carnot_kit import pansu
from carnot_kit.tilings import (conjugation_constant, constant_ledger,
                                diam_estimate, load_tile, overlap_curve,
                                reachability_check, verify_tile)

H1 = load_group("heisenberg1")
ENGEL = load_group("engel")


def _verdict(num, detail):
    print(f"\ncriterion {num}: PASS ({detail})")


def test_criterion_01_group_axioms():
    worst = {}
    for name in list_groups():
        spec = load_group(name)
        rng = np.random.default_rng(1)
        start = time.perf_counter()
        p = grp.sample_box_coords(spec, rng, 10_000)
        q = grp.sample_box_coords(spec, rng, 10_000)
        r = grp.sample_box_coords(spec, rng, 10_000)
        assoc = float(np.abs(
            grp.bch_coords(spec, grp.bch_coords(spec, p, q), r)
            - grp.bch_coords(spec, p, grp.bch_coords(spec, q, r))).max())
        inv = float(np.abs(grp.bch_coords(
            spec, p, grp.inverse_coords(spec, p))).max())
        ident = float(np.abs(
            grp.bch_coords(spec, p, grp.identity_coords(spec)) - p).max())
        elapsed = time.perf_counter() - start
        assert assoc < 1e-9, f"{name}: associativity defect {assoc}"
        assert inv == 0.0, f"{name}: inverse not exact"
        assert ident == 0.0, f"{name}: identity not exact"
        assert elapsed < 5.0, f"{name}: took {elapsed:.2f}s"
        worst[name] = assoc
    _verdict(1, f"max associativity defect {max(worst.values()):.3g}, "
                f"all groups < 5s")


def test_criterion_02_q_polynomial_properties():
    worst = 0.0
    for name in ("heisenberg1", "engel", "free-step2-rank3"):
        spec = load_group(name)
        rng = np.random.default_rng(2)
        p = grp.sample_box_coords(spec, rng, 10_000)
        q = grp.sample_box_coords(spec, rng, 10_000)
        quad = grp.q_polynomial_coords(spec, p, q)
        opgr = float(np.abs(grp.bch_coords(spec, p, q) - (p + q + quad)
                            ).max())
        first = float(np.abs(quad[:, spec.stratum_slice(1)]).max())
        lam = 1.7
        scale = np.concatenate([np.full(d, lam ** j) for j, d in
                                enumerate(spec.strata_dims, 1)])
        homog = float(np.abs(
            grp.q_polynomial_coords(spec, grp.dilate_coords(spec, p, lam),
                                    grp.dilate_coords(spec, q, lam))
            - quad * scale).max())
        sym = float(np.abs(
            grp.q_polynomial_coords(spec, -q, -p) + quad).max())
        for val, label in ((opgr, "opgr"), (first, "first stratum"),
                           (homog, "homogeneity"), (sym, "symmetry")):
            assert val < 1e-10, f"{name}: {label} defect {val}"
            worst = max(worst, val)
    _verdict(2, f"worst defect {worst:.3g} over 1e4 pairs x 3 groups")


def test_criterion_03_norm_calibration():
    details = []
    for spec in (H1, ENGEL):
        norm = grp.calibrate_box_norm(spec, seed=0, certify_pairs=1_000_000)
        cert = norm.certificate
        assert cert["pairs"] == 1_000_000
        assert cert["max_margin"] <= 0.0, f"{spec.name}: violation"
        rng = np.random.default_rng(3)
        x = grp.sample_box_coords(spec, rng, 4096)
        hom = float(np.abs(
            grp.box_norm_coords(norm, grp.dilate_coords(spec, x, 2.0))
            - 2.0 * grp.box_norm_coords(norm, x)).max())
        sym = float(np.abs(
            grp.box_norm_coords(norm, grp.inverse_coords(spec, x))
            - grp.box_norm_coords(norm, x)).max())
        assert hom == 0.0, f"{spec.name}: homogeneity defect {hom}"
        assert sym == 0.0, f"{spec.name}: symmetry defect {sym}"
        details.append(f"{spec.name} margin {cert['max_margin']:.3g}")
    _verdict(3, "; ".join(details))


def _dyadic(rng, shape, scale=16):
    return rng.integers(-2 * scale, 2 * scale + 1, size=shape) / scale


def test_criterion_04_pansu_recovery():
    e2 = load_group("euclidean2")
    rng = np.random.default_rng(4)
    block_err = 0.0
    resid_max = 0.0
    for trial in range(20):
        target = e2 if trial % 2 else H1
        a1 = _dyadic(rng, (2, 2))
        while abs(np.linalg.det(a1)) < 1e-9:
            a1 = _dyadic(rng, (2, 2))
        hom = grp.hom_from_horizontal(H1, target, a1)
        f = pansu.sampler_from_hom(hom, translation=_dyadic(rng, target.n))
        fitted, curve = pansu.estimate_pansu_derivative(
            f, _dyadic(rng, H1.n))
        block_err = max(block_err, max(
            float(np.abs(got - want).max())
            for got, want in zip(fitted.blocks, hom.blocks)))
        resid_max = max(resid_max, float(curve.residuals.max()))
    assert block_err < 1e-6, f"block error {block_err}"
    assert resid_max < 1e-8, f"residual {resid_max}"

    def bent(p):
        out = p.copy()
        out[..., 0] = np.sin(p[..., 0])
        return out

    f_bent = pansu.MapSampler(H1, H1, bent, name="sin-bend")
    _, curve = pansu.estimate_pansu_derivative(f_bent, np.zeros(3))
    slope = curve.finest_decade_slope()
    assert 0.9 <= slope <= 1.5, f"slope {slope}"
    _verdict(4, f"blocks {block_err:.2g}, residuals {resid_max:.2g}, "
                f"non-morphism slope {slope:.3f}")


def test_criterion_05_decomposition_roundtrip():
    drift_worst = 0.0
    resid_worst = 0.0
    for name in list_groups():
        spec = load_group(name)
        rng = np.random.default_rng(5)
        targets = grp.sample_box_coords(spec, rng, 1000, radius=2.0)
        words = batch_decompose(spec, targets, seed=5)
        norm = grp.unit_norm(spec)
        scale = np.maximum(1.0, grp.box_norm_coords(norm, targets))
        errs = np.array([
            np.abs(evaluate_word(spec, w) - v).max()
            for w, v in zip(words, targets)]) / scale
        assert float(errs.max()) < 1e-8, f"{name}: residual {errs.max()}"
        assert all(len(w.indices) == 2 * spec.n for w in words), name
        c0a = empirical_c0(spec, count=500, seed=11)
        c0b = empirical_c0(spec, count=500, seed=12)
        assert np.isfinite(c0a["c0_max"])
        drift = abs(c0a["c0_max"] - c0b["c0_max"]) / c0a["c0_max"]
        assert drift < 0.10, f"{name}: c0 varies {drift:.3f}"
        drift_worst = max(drift_worst, drift)
        resid_worst = max(resid_worst, float(errs.max()))
    e1 = np.array([1.0, 0.0, 0.0])
    e2c = np.array([0.0, 1.0, 0.0])
    comm = grp.bch_coords(H1, grp.bch_coords(
        H1, grp.bch_coords(H1, e1, e2c), -e1), -e2c)
    defect = float(np.abs(comm - np.array([0.0, 0.0, 1.0])).max())
    assert defect < 1e-12, f"commutator defect {defect}"
    _verdict(5, f"worst residual {resid_worst:.2g}, worst c0 drift "
                f"{drift_worst:.3f}, commutator defect {defect:.2g}")


def test_criterion_06_drift_lemma():
    start = time.perf_counter()
    e1 = np.array([1.0, 0.0])
    ratios = {}
    lhs_by_rho = {}
    for sigma in (0.1, 0.05, 0.01):
        frag = synthetic_drift_fragment(H1, sigma, seed=11)
        rep = verify_drift(frag, e1, sigma, 0.0, 0.5)
        ratios[sigma] = rep["max_ratio"]
        lhs_by_rho[sigma] = {round(r[0], 9): r[1] for r in rep["rows"]}
    spread = max(ratios.values()) / min(ratios.values())
    assert spread < 3.0, f"ratio spread {spread:.2f}"
    shared = set.intersection(*(set(d) for d in lhs_by_rho.values()))
    assert shared
    for rho in shared:
        assert lhs_by_rho[0.1][rho] > lhs_by_rho[0.05][rho] \
            > lhs_by_rho[0.01][rho], f"not monotone at rho {rho}"
    pure = synthetic_drift_fragment(H1, 0.1, pure_flow=True)
    pure_rep = verify_drift(pure, e1, 0.1, 0.0, 0.5)
    pure_max = max(r[1] for r in pure_rep["rows"])
    assert pure_max < 1e-10, f"pure flow lhs {pure_max}"
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    _verdict(6, f"spread {spread:.2f}, pure flow {pure_max:.2g}, "
                f"{elapsed:.1f}s")


def test_criterion_07_tiling_verification():
    details = []
    for name, lam_ref in (("tile_euclidean1", 1 / 3),
                          ("tile_euclidean2", 1 / 3)):
        tile = load_tile(name)
        rep = verify_tile(tile, depth=5, seed=0)
        assert rep["self_similarity_defect"] == 0.0, name
        assert rep["overlap_fraction"] < 2.0 ** (-5 + 2), name
        rel = abs(rep["lambda_emp"] - lam_ref) / lam_ref
        assert rel < 0.10, f"{name}: lambda off by {rel:.3f}"
        details.append(f"{name} lam {rep['lambda_emp']:.4f}")
    h1_tile = load_tile("tile_heisenberg1")
    rep = verify_tile(h1_tile, depth=5, seed=0)
    assert rep["self_similarity_defect"] == 0.0
    assert rep["lambda_emp"] > 0.0
    curve = overlap_curve(h1_tile, (4, 5, 6))
    fracs = [row["fraction"] for row in curve]
    assert fracs[0] > fracs[1] > fracs[2], f"overlap not decreasing {fracs}"
    details.append("tile_heisenberg1 overlap "
                   + "->".join(f"{f:.4f}" for f in fracs))
    _verdict(7, "; ".join(details))


def _h1_cone_basis():
    u1 = np.array([np.cos(0.08), np.sin(0.08)])
    u2 = np.array([-np.sin(0.05), np.cos(0.05)])
    return np.array([u1, u2])


def _h1_ledger():
    tile = load_tile("tile_heisenberg1")
    diam = diam_estimate(tile, seed=0)
    conj = conjugation_constant(H1, seed=0)
    lam = 0.1
    return tile, constant_ledger(
        diam_t=diam, c0=H1.n * 12.0 / diam, M=6, lam=lam, lip_phi=1.0,
        s=H1.step, conj_c=conj, drift_c1=1.0, xi=0.1)


def test_criterion_08_reachability():
    e1_tile = load_tile("tile_euclidean1")
    ok = reachability_check(e1_tile, xi=0.1, lam=1.0, samples=1, seed=0)
    assert ok["pass_fraction"] == 1.0
    bad = reachability_check(e1_tile, xi=0.4, lam=1.0, samples=1, seed=0)
    assert bad["pass_fraction"] < 1.0
    flagged = {r["center"] for r in bad["rows"] if not r["passed"]}
    assert 1 in flagged  # centers[1] = [1/3], the letter 1/3 < 0.4
    basis = _h1_cone_basis()
    cones = [Cone(v, 0.05) for v in basis]
    assert separated_cones(cones, 0.02)
    tile, led = _h1_ledger()
    rep = reachability_check(tile, basis=basis, xi=led.eps1, rho=0.1,
                             lam=12.0, samples=8, seed=0, retries=4)
    assert rep["pass_fraction"] >= 0.95, rep["pass_fraction"]
    _verdict(8, f"interval xi=0.1 full pass, xi=0.4 fails center 1/3; "
                f"H1 pass fraction {rep['pass_fraction']:.3f} at "
                f"xi={led.eps1}")


def test_criterion_09_constant_ledger():
    _, led = _h1_ledger()
    assert led.shrink_events, "no automated shrink recorded"
    names = {c.name for c in led.checks}
    assert names == {"k1_upper", "c6_upper", "c11_unit", "c2_small",
                     "n_lower"}
    for check in led.checks:
        assert check.passed, f"{check.name}: {check.detail}"
    assert led.all_pass()
    _verdict(9, f"all {len(led.checks)} inequalities pass after "
                f"{len(led.shrink_events)} shrink(s); "
                f"log10 C11 = {led.c11.log10:.1f}")


def test_criterion_10_density_david():
    start = time.perf_counter()
    cloud = uniform_ball_cloud(H1, 250_000, 0.7, seed=1)
    x0 = np.zeros(3)
    est = density_estimates(cloud, x0, np.geomspace(7e-4, 0.7, 40), 4.0)
    ratio = est.theta_upper / est.theta_lower
    assert ratio < 2.0, f"theta ratio {ratio:.3f}"
    ball_rep = david_fraction(cloud, None, 0.5, [0.5], [0.5],
                              sample=100, seed=2)
    assert ball_rep["fraction"] > 0.9, ball_rep["fraction"]
    axis = segment_cloud(H1, 20_000, axis=2, extent=1.0, seed=3)
    axis_rep = david_fraction(axis, None, 0.5, [0.5], [0.5],
                              sample=100, seed=2)
    assert axis_rep["fraction"] < 0.05, axis_rep["fraction"]
    fine = density_estimates(axis, x0, np.geomspace(5e-4, 0.5, 40), 4.0)
    r0 = fine.radii[-1] * 1.05
    coarse = density_estimates(axis, x0, np.geomspace(r0, r0 * 1e3, 40),
                               4.0)
    divergence = fine.theta_upper / coarse.theta_upper
    assert divergence > 5.0, f"divergence ratio {divergence:.2f}"
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    _verdict(10, f"theta ratio {ratio:.3f}, david {ball_rep['fraction']:.2f}"
                 f"/{axis_rep['fraction']:.2f}, divergence "
                 f"{divergence:.1f}, {elapsed:.1f}s")
