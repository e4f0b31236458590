"""Experiment harness: verification suites over the catalog, with
deterministic JSON/CSV reports and SVG figures."""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algebra import (StructureError, homogeneous_dimension, list_groups,
                      load_group, load_spec_file)
from . import decompose as dec
from . import density as dens
from . import fragments as frag
from . import group as grp
from . import pansu
from . import plotting
from . import tilings


class UsageError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    suite: str
    group: str = "heisenberg1"
    spec_path: str | None = None
    seed: int = 0
    out: str = "carnot-out"
    depth: int | None = None
    samples: int | None = None
    params: dict = field(default_factory=dict)


def _resolve_spec(cfg: ExperimentConfig):
    if cfg.spec_path is not None:
        try:
            return load_spec_file(cfg.spec_path)
        except (OSError, StructureError, KeyError, ValueError) as e:
            raise UsageError(f"cannot load spec file {cfg.spec_path}: {e}")
    try:
        return load_group(cfg.group)
    except KeyError as e:
        raise UsageError(str(e.args[0]))


def _param(cfg, key, default):
    val = cfg.params.get(key, default)
    if isinstance(default, float) and isinstance(val, str):
        return float(val)
    return val


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return str(path)


def _check(name, passed, value, bound):
    return {"name": name, "passed": bool(passed), "value": value,
            "bound": bound}


# ---------------------------------------------------------------- suites


def suite_group_axioms(spec, cfg, out):
    n = cfg.samples or 10_000
    rng = np.random.default_rng(cfg.seed)
    p = grp.sample_box_coords(spec, rng, n)
    q = grp.sample_box_coords(spec, rng, n)
    r = grp.sample_box_coords(spec, rng, n)
    assoc = float(np.abs(
        grp.bch_coords(spec, grp.bch_coords(spec, p, q), r)
        - grp.bch_coords(spec, p, grp.bch_coords(spec, q, r))).max())
    inv = float(np.abs(grp.bch_coords(
        spec, p, grp.inverse_coords(spec, p))).max())
    ident = float(np.abs(
        grp.bch_coords(spec, p, grp.identity_coords(spec)) - p).max())
    checks = [
        _check("associativity", assoc < 1e-9, assoc, 1e-9),
        _check("inverse_exact", inv == 0.0, inv, 0.0),
        _check("identity_exact", ident == 0.0, ident, 0.0),
    ]
    _write_csv(out / "axioms.csv", ["check", "value", "bound", "passed"],
               [(c["name"], c["value"], c["bound"], c["passed"])
                for c in checks])
    return {"triples": n, "checks": checks}


def suite_norm_calibration(spec, cfg, out):
    pairs = cfg.samples or 1_000_000
    norm = grp.calibrate_box_norm(spec, seed=cfg.seed, certify_pairs=pairs)
    cert = norm.certificate
    rng = np.random.default_rng(cfg.seed + 1)
    x = grp.sample_box_coords(spec, rng, 4096)
    lam = 2.0
    hom_defect = float(np.abs(
        grp.box_norm_coords(norm, grp.dilate_coords(spec, x, lam))
        - lam * grp.box_norm_coords(norm, x)).max())
    sym_defect = float(np.abs(
        grp.box_norm_coords(norm, grp.inverse_coords(spec, x))
        - grp.box_norm_coords(norm, x)).max())
    checks = [
        _check("triangle_certified", cert["max_margin"] <= 0.0,
               cert["max_margin"], 0.0),
        _check("homogeneity_exact", hom_defect == 0.0, hom_defect, 0.0),
        _check("symmetry_exact", sym_defect == 0.0, sym_defect, 0.0),
    ]
    _write_csv(out / "calibration.csv", ["stratum", "epsilon"],
               list(enumerate(norm.epsilons, start=1)))
    return {"pairs": cert["pairs"], "epsilons": list(norm.epsilons),
            "pi1_lipschitz": cert["pi1_lipschitz"], "checks": checks}


def _dyadic(rng, shape, scale=16):
    return rng.integers(-2 * scale, 2 * scale + 1, size=shape) / scale


def suite_pansu_estimate(spec, cfg, out):
    if spec.name != "heisenberg1":
        raise UsageError("pansu-estimate runs on heisenberg1")
    count = cfg.samples or 20
    e2 = load_group("euclidean2")
    rng = np.random.default_rng(cfg.seed)
    block_err = 0.0
    resid_max = 0.0
    last_curve = None
    for trial in range(count):
        target = e2 if trial % 2 else spec
        a1 = _dyadic(rng, (2, 2))
        while abs(np.linalg.det(a1)) < 1e-9:
            a1 = _dyadic(rng, (2, 2))
        hom = grp.hom_from_horizontal(spec, target, a1)
        f = pansu.sampler_from_hom(hom, translation=_dyadic(rng, target.n))
        fitted, curve = pansu.estimate_pansu_derivative(
            f, _dyadic(rng, spec.n))
        block_err = max(block_err, max(
            float(np.abs(got - want).max())
            for got, want in zip(fitted.blocks, hom.blocks)))
        resid_max = max(resid_max, float(curve.residuals.max()))
        last_curve = curve

    def bent(p):
        out_p = p.copy()
        out_p[..., 0] = np.sin(p[..., 0])
        return out_p

    f_bent = pansu.MapSampler(spec, spec, bent, name="sin-bend")
    _, bent_curve = pansu.estimate_pansu_derivative(f_bent, np.zeros(spec.n))
    slope = bent_curve.finest_decade_slope()
    checks = [
        _check("block_recovery", block_err < 1e-6, block_err, 1e-6),
        _check("residual_curves", resid_max < 1e-8, resid_max, 1e-8),
        _check("nonmorphism_slope", 0.9 <= slope <= 1.5, slope,
               [0.9, 1.5]),
    ]
    _write_csv(out / "residuals.csv", ["scale", "hom_residual",
                                       "bent_residual"],
               [(float(t), float(r), float(b)) for (t, r), (_, b) in
                zip(last_curve.rows(), bent_curve.rows())])
    plotting.residual_curve_svg(
        {"morphism": (last_curve.scales, last_curve.residuals),
         "sin-bend": (bent_curve.scales, bent_curve.residuals)},
        out / "residuals.svg")
    return {"homs": count, "checks": checks}


def suite_decompose_roundtrip(spec, cfg, out):
    count = cfg.samples or 1000
    rng = np.random.default_rng(cfg.seed)
    targets = grp.sample_box_coords(spec, rng, count, radius=2.0)
    words = dec.batch_decompose(spec, targets, seed=cfg.seed)
    norm = grp.unit_norm(spec)
    scale = np.maximum(1.0, grp.box_norm_coords(norm, targets))
    errs = np.array([
        np.abs(dec.evaluate_word(spec, w) - v).max()
        for w, v in zip(words, targets)]) / scale
    lengths = {len(w.indices) for w in words}
    c0a = dec.empirical_c0(spec, count=300, seed=cfg.seed)
    c0b = dec.empirical_c0(spec, count=300, seed=cfg.seed + 1)
    drifted = abs(c0a["c0_max"] - c0b["c0_max"]) / c0a["c0_max"]
    checks = [
        _check("roundtrip_residual", float(errs.max()) < 1e-8,
               float(errs.max()), 1e-8),
        _check("word_length", lengths == {2 * spec.n},
               sorted(lengths), 2 * spec.n),
        _check("c0_stability", drifted < 0.10, drifted, 0.10),
    ]
    if spec.name == "heisenberg1":
        e1 = np.array([1.0, 0.0, 0.0])
        e2c = np.array([0.0, 1.0, 0.0])
        comm = grp.bch_coords(spec, grp.bch_coords(
            spec, grp.bch_coords(spec, e1, e2c), -e1), -e2c)
        defect = float(np.abs(comm - np.array([0.0, 0.0, 1.0])).max())
        checks.append(_check("commutator_identity", defect < 1e-12,
                             defect, 1e-12))
    _write_csv(out / "roundtrip.csv", ["target", "residual"],
               list(enumerate(errs)))
    return {"targets": count, "c0_max": c0a["c0_max"], "checks": checks}


def suite_drift(spec, cfg, out):
    if spec.strata_dims[0] < 2:
        raise UsageError("drift suite needs two horizontal directions")
    sigmas = _param(cfg, "sigmas", None)
    if sigmas is None:
        sigmas = (0.1, 0.05, 0.01)
    elif isinstance(sigmas, str):
        sigmas = tuple(float(s) for s in sigmas.split(","))
    e1 = np.zeros(spec.strata_dims[0])
    e1[0] = 1.0
    rows = []
    ratios = {}
    lhs_by_rho = {}
    fragment = None
    for sigma in sigmas:
        fragment = frag.synthetic_drift_fragment(spec, sigma, seed=cfg.seed)
        rep = frag.verify_drift(fragment, e1, sigma, 0.0, 0.5)
        ratios[sigma] = rep["max_ratio"]
        lhs_by_rho[sigma] = {round(r[0], 9): r[1] for r in rep["rows"]}
        rows += [(sigma, *r) for r in rep["rows"]]
    spread = max(ratios.values()) / min(ratios.values())
    shared = set.intersection(*(set(d) for d in lhs_by_rho.values()))
    ordered = sorted(sigmas, reverse=True)
    monotone = all(
        lhs_by_rho[a][rho] > lhs_by_rho[b][rho]
        for rho in shared for a, b in zip(ordered, ordered[1:]))
    pure = frag.synthetic_drift_fragment(spec, sigmas[0], pure_flow=True)
    pure_rep = frag.verify_drift(pure, e1, sigmas[0], 0.0, 0.5)
    pure_max = max(r[1] for r in pure_rep["rows"])
    checks = [
        _check("ratio_spread", spread < 3.0, spread, 3.0),
        _check("lhs_monotone_in_sigma", monotone, monotone, True),
        _check("pure_flow_zero", pure_max < 1e-10, pure_max, 1e-10),
    ]
    _write_csv(out / "drift.csv", ["sigma", "rho", "lhs", "bound", "ratio"],
               rows)
    plotting.fragment_svg(fragment, out / "fragment.svg")
    return {"sigmas": list(sigmas), "ratios": {str(k): v for k, v in
                                               ratios.items()},
            "checks": checks}


def _load_tile_for(cfg):
    name = cfg.params.get("tile", f"tile_{cfg.group}")
    try:
        return tilings.load_tile(name)
    except (FileNotFoundError, KeyError) as e:
        raise UsageError(f"unknown tile {name!r}: {e}")


def suite_tiling_verify(spec, cfg, out):
    tile = _load_tile_for(cfg)
    depth = cfg.depth or 5
    report = tilings.verify_tile(tile, depth=depth, seed=cfg.seed)
    depths = range(4, max(depth, 6) + 1)
    curve = tilings.overlap_curve(tile, depths)
    fracs = [row["fraction"] for row in curve]
    # exact tilings sit at zero everywhere; positive overlap must decay
    if any(f > 0 for f in fracs):
        decreasing = all(a > b for a, b in zip(fracs, fracs[1:]))
    else:
        decreasing = True
    checks = [
        _check("self_similarity_defect",
               report["self_similarity_defect"] == 0.0,
               report["self_similarity_defect"], 0.0),
        _check("overlap_bound",
               report["overlap_fraction"] < 2.0 ** (-depth + 2),
               report["overlap_fraction"], 2.0 ** (-depth + 2)),
        _check("lambda_positive", report["lambda_emp"] > 0.0,
               report["lambda_emp"], 0.0),
        _check("overlap_decreasing", decreasing, fracs, "strict"),
    ]
    lam_ref = _param(cfg, "lambda_ref", None)
    if lam_ref is not None:
        lam_ref = float(lam_ref)
        rel = abs(report["lambda_emp"] - lam_ref) / lam_ref
        checks.append(_check("lambda_reference", rel < 0.10, rel, 0.10))
    _write_csv(out / "overlap.csv", ["depth", "fraction"],
               [(row["depth"], row["fraction"]) for row in curve])
    plotting.tile_projection_svg(tile, min(depth, 5), out / "tile.svg")
    plotting.overlap_curve_svg(
        [(row["depth"], row["fraction"]) for row in curve],
        out / "overlap.svg")
    return {"tile": tile.name, "depth": depth,
            "lambda_emp": report["lambda_emp"],
            "diam_emp": report["diam_emp"], "checks": checks}


def _default_basis(spec):
    if spec.name == "heisenberg1":
        return np.array([[np.cos(0.08), np.sin(0.08)],
                         [-np.sin(0.05), np.cos(0.05)]])
    return None


def suite_reachability(spec, cfg, out):
    tile = _load_tile_for(cfg)
    xi = float(_param(cfg, "xi", 0.1))
    rho = float(_param(cfg, "rho", 0.1))
    lam = float(_param(cfg, "lam", 12.0))
    threshold = float(_param(cfg, "threshold", 0.95))
    samples = cfg.samples or 8
    rep = tilings.reachability_check(
        tile, basis=_default_basis(spec), xi=xi, rho=rho, lam=lam,
        samples=samples, seed=cfg.seed, retries=4)
    checks = [
        _check("pass_fraction", rep["pass_fraction"] >= threshold,
               rep["pass_fraction"], threshold),
    ]
    _write_csv(out / "reachability.csv",
               ["center", "sample", "word_length", "min_letter",
                "max_letter", "passed"],
               [(r["center"], r["sample"], r["word_length"],
                 r["min_letter"], r["max_letter"], r["passed"])
                for r in rep["rows"]])
    return {"tile": tile.name, "xi": xi, "c0": rep["c0"],
            "pass_fraction": rep["pass_fraction"],
            "failures": rep["failures"], "checks": checks}


def suite_ledger(spec, cfg, out):
    tile = _load_tile_for(cfg)
    diam = tilings.diam_estimate(tile, seed=cfg.seed)
    lam = float(_param(cfg, "lam", 0.1))
    conj = tilings.conjugation_constant(spec, seed=cfg.seed)
    led = tilings.constant_ledger(
        diam_t=diam, c0=spec.n * float(_param(cfg, "Lam", 12.0)) / diam,
        M=int(_param(cfg, "M", 6)), lam=lam,
        lip_phi=float(_param(cfg, "lip", 1.0)), s=spec.step,
        conj_c=conj, drift_c1=float(_param(cfg, "C1", 1.0)),
        xi=float(_param(cfg, "xi", 0.1)))
    checks = [_check(c.name, c.passed, c.detail, "pass")
              for c in led.checks]
    _write_csv(out / "ledger.csv", ["constant", "log10", "value"],
               [("K1", led.k1.log10, led.k1.value),
                ("C6", led.c6.log10, led.c6.value),
                ("C11", led.c11.log10, led.c11.value),
                ("C4", led.c4.log10, led.c4.value),
                ("C2", led.c2.log10, led.c2.value),
                ("C5", np.log10(led.c5), led.c5),
                ("C7", np.log10(led.c7), led.c7),
                ("N", np.log10(led.n_big), led.n_big)])
    return {"tile": tile.name, "diam": diam, "conjugation_c": conj,
            "eps1": led.eps1, "shrink_events": list(led.shrink_events),
            "checks": checks}


def suite_density_david(spec, cfg, out):
    if spec.name != "heisenberg1":
        raise UsageError("density-david runs on heisenberg1")
    n_pts = cfg.samples or 120_000
    cloud = dens.uniform_ball_cloud(spec, n_pts, 0.7, seed=cfg.seed)
    axis = dens.segment_cloud(spec, max(n_pts // 12, 2000), axis=2,
                              extent=1.0, seed=cfg.seed + 1)
    x0 = np.zeros(spec.n)
    est = dens.density_estimates(cloud, x0, np.geomspace(7e-4, 0.7, 40), 4.0)
    ratio = est.theta_upper / est.theta_lower
    beta = float(_param(cfg, "beta", 0.5))
    eps = float(_param(cfg, "eps", 0.5))
    R = float(_param(cfg, "R", 0.5))
    sample = int(_param(cfg, "sample", 100))
    ball_rep = dens.david_fraction(cloud, None, eps, [beta], [R],
                                   sample=sample, seed=cfg.seed)
    axis_rep = dens.david_fraction(axis, None, eps, [beta], [R],
                                   sample=sample, seed=cfg.seed)
    fine = dens.density_estimates(axis, x0, np.geomspace(5e-4, 0.5, 40), 4.0)
    r0 = fine.radii[-1] * 1.05
    coarse = dens.density_estimates(axis, x0,
                                    np.geomspace(r0, r0 * 1e3, 40), 4.0)
    divergence = fine.theta_upper / coarse.theta_upper
    checks = [
        _check("theta_ratio", ratio < 2.0, ratio, 2.0),
        _check("david_identity", ball_rep["fraction"] > 0.9,
               ball_rep["fraction"], 0.9),
        _check("david_axis", axis_rep["fraction"] < 0.05,
               axis_rep["fraction"], 0.05),
        _check("axis_divergence", divergence > 5.0, divergence, 5.0),
    ]
    rball, tball = dens.density_profile(cloud, x0,
                                        np.geomspace(7e-4, 0.7, 40), 4.0)
    raxis, taxis = dens.density_profile(axis, x0,
                                        np.geomspace(5e-4, 0.5, 40), 4.0)
    _write_csv(out / "density.csv", ["cloud", "radius", "theta"],
               [("ball", r, t) for r, t in zip(rball, tball)]
               + [("axis", r, t) for r, t in zip(raxis, taxis)])
    _write_csv(out / "david.csv", ["cloud", "index", "passed"],
               [("ball", r["index"], r["passed"])
                for r in ball_rep["rows"]]
               + [("axis", r["index"], r["passed"])
                  for r in axis_rep["rows"]])
    plotting.density_profile_svg(
        {"ball": (rball, tball), "axis": (raxis, taxis)},
        out / "density.svg", Q=4.0)
    return {"points": n_pts, "theta_ratio": ratio,
            "david_identity": ball_rep["fraction"],
            "david_axis": axis_rep["fraction"],
            "axis_divergence": divergence, "checks": checks}


SUITES = {
    "group-axioms": suite_group_axioms,
    "norm-calibration": suite_norm_calibration,
    "pansu-estimate": suite_pansu_estimate,
    "decompose-roundtrip": suite_decompose_roundtrip,
    "drift": suite_drift,
    "tiling-verify": suite_tiling_verify,
    "reachability": suite_reachability,
    "ledger": suite_ledger,
    "density-david": suite_density_david,
}


# ----------------------------------------------------------------- runner


def run(cfg: ExperimentConfig) -> int:
    threads = os.environ.get("CARNOT_KIT_THREADS")
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    try:
        if cfg.suite not in SUITES:
            raise UsageError(
                f"unknown suite {cfg.suite!r}; available: "
                f"{', '.join(sorted(SUITES))}")
        spec = _resolve_spec(cfg)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        report = SUITES[cfg.suite](spec, cfg, out)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    elapsed = time.time() - started
    report = {"suite": cfg.suite, "group": spec.name, "seed": cfg.seed,
              **report}
    failing = [c["name"] for c in report["checks"] if not c["passed"]]
    report["passed"] = not failing
    with open(out / "summary.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_jsonify)
        fh.write("\n")
    meta = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "runtime_seconds": elapsed,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": threads,
        "seed": cfg.seed,
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if failing:
        for name in failing:
            print(f"FAIL: {name}", file=sys.stderr)
        return 1
    print(f"ok: {cfg.suite} on {spec.name} ({len(report['checks'])} checks)")
    return 0


def _jsonify(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def list_catalog(file=None) -> list[str]:
    lines = []
    for name in list_groups():
        q = homogeneous_dimension(load_group(name))
        lines.append(f"{name} Q={q}")
    for line in lines:
        print(line, file=file)
    return lines


def _parse_params(items):
    params = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--params expects k=v, got {item!r}")
        key, _, val = item.partition("=")
        try:
            params[key] = float(val)
        except ValueError:
            params[key] = val
    return params


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carnot-kit",
        description="verification suites for stratified group computations")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run one suite and write reports")
    runp.add_argument("--group", default="heisenberg1")
    runp.add_argument("--spec", dest="spec_path", default=None,
                      help="path to a stratification spec JSON")
    runp.add_argument("--suite", required=True)
    runp.add_argument("--seed", type=int, default=0)
    runp.add_argument("--out", default="carnot-out")
    runp.add_argument("--depth", type=int, default=None)
    runp.add_argument("--samples", type=int, default=None)
    runp.add_argument("--params", nargs="*", default=[], metavar="k=v")
    sub.add_parser("list-catalog", help="print group names and Q values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-catalog":
        list_catalog()
        return 0
    try:
        params = _parse_params(args.params)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    cfg = ExperimentConfig(
        suite=args.suite, group=args.group, spec_path=args.spec_path,
        seed=args.seed, out=args.out, depth=args.depth,
        samples=args.samples, params=params)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
