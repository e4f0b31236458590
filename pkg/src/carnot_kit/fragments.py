"""Fragments (partial bi-Lipschitz curves), cones, drift, and point witnesses.

A fragment is a finite strictly increasing time sample with one target
point per time; "almost every t" statements from the continuous theory
become checks at every interior sample, and domain measure is carried
by the union of consecutive-sample cells whose gap stays below a cap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .algebra import StratificationSpec, StructureError
from .group import (
    HomogeneousNorm,
    bch_coords,
    box_norm_coords,
    dilate_coords,
    unit_norm,
)


class FragmentError(ValueError):
    """Sample set is not a valid fragment."""


class DriftHypothesisError(ValueError):
    """A drift-lemma hypothesis failed; .item names the violated clause."""

    def __init__(self, item: str, detail: str = ""):
        super().__init__(f"hypothesis {item} violated" + (f": {detail}" if detail else ""))
        self.item = item


# ----------------------------------------------------------------- cones


@dataclass(frozen=True)
class Cone:
    """One-sided closed convex cone around a unit axis with opening sigma."""

    axis: np.ndarray
    sigma: float

    def __post_init__(self):
        e = np.asarray(self.axis, dtype=float)
        if e.ndim != 1 or abs(np.linalg.norm(e) - 1.0) > 1e-9:
            raise StructureError("cone axis must be a unit vector")
        if not 0.0 < self.sigma <= 1.0:
            raise StructureError("cone opening must lie in (0, 1]")
        e = e.copy()
        e.setflags(write=False)
        object.__setattr__(self, "axis", e)

    @classmethod
    def along(cls, direction, sigma: float) -> "Cone":
        d = np.asarray(direction, dtype=float)
        r = np.linalg.norm(d)
        if r == 0:
            raise StructureError("cone direction must be nonzero")
        return cls(d / r, float(sigma))


def in_cone(x, cone: Cone, exclude_zero: bool = False):
    """<x, e> >= (1 - sigma^2) |x|, elementwise over rows of x."""
    x = np.asarray(x, dtype=float)
    dots = x @ cone.axis
    mags = np.linalg.norm(x, axis=-1)
    ok = dots >= (1.0 - cone.sigma ** 2) * mags
    if exclude_zero:
        ok = ok & (mags > 0)
    else:
        ok = ok | (mags == 0)
    return bool(ok) if np.isscalar(ok) or ok.ndim == 0 else ok


# -------------------------------------------------------------- fragments


@dataclass(frozen=True)
class Fragment:
    """Discretized 2-bi-Lipschitz curve over a compact, possibly gapped domain.

    Group-valued fragments carry their StratificationSpec (and an
    optional HomogeneousNorm, unit weights by default); abstract metric
    targets supply a broadcastable distance callback instead.
    """

    times: np.ndarray
    points: np.ndarray
    spec: StratificationSpec | None = None
    norm: HomogeneousNorm | None = None
    distance: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        p = np.asarray(self.points, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise FragmentError("need at least two sample times")
        if np.any(np.diff(t) <= 0):
            raise FragmentError("times must be strictly increasing")
        if p.shape != (len(t), p.shape[-1]) or p.ndim != 2:
            raise FragmentError("points must be one row per time")
        if self.spec is not None:
            if p.shape[1] != self.spec.n:
                raise FragmentError(f"points have dim {p.shape[1]} != {self.spec.n}")
            if self.norm is None:
                object.__setattr__(self, "norm", unit_norm(self.spec))
        elif self.distance is None:
            raise FragmentError("abstract fragments need a distance callback")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "points", p)
        self._validate_bilipschitz()

    def pair_distance(self, a, b) -> np.ndarray:
        """d(gamma(times[a]), gamma(times[b])) with broadcasting indices."""
        pa, pb = self.points[a], self.points[b]
        if self.spec is not None:
            return box_norm_coords(self.norm, bch_coords(self.spec, -pa, pb))
        return np.asarray(self.distance(pa, pb), dtype=float)

    def _validate_bilipschitz(self, chunk: int = 256):
        n = len(self.times)
        for lo in range(0, n, chunk):
            rows = np.arange(lo, min(lo + chunk, n))
            dt = np.abs(self.times[rows, None] - self.times[None, :])
            d = self.pair_distance(rows[:, None], np.arange(n)[None, :])
            off = dt > 0
            bad_hi = d[off] > 2.0 * dt[off]
            bad_lo = d[off] < 0.5 * dt[off]
            if bad_hi.any() or bad_lo.any():
                raise FragmentError("sample pairs violate 2-bi-Lipschitz bounds")

    @property
    def mesh(self) -> float:
        return float(np.median(np.diff(self.times)))

    def index_of(self, t0: float, tol: float | None = None) -> int:
        i = int(np.argmin(np.abs(self.times - t0)))
        slack = 0.51 * self.mesh if tol is None else tol
        if abs(self.times[i] - t0) > slack:
            raise FragmentError(f"no sample within {slack:.3g} of t = {t0}")
        return i

    def horizontal(self) -> np.ndarray:
        if self.spec is None:
            raise FragmentError("horizontal projection needs a group target")
        return self.points[:, self.spec.stratum_slice(1)]


def fragment_from_curve(spec: StratificationSpec, fn, times,
                        norm: HomogeneousNorm | None = None) -> Fragment:
    times = np.asarray(times, dtype=float)
    pts = np.stack([np.asarray(fn(t), dtype=float) for t in times])
    return Fragment(times, pts, spec=spec, norm=norm)


def exp_flow_fragment(spec: StratificationSpec, x0, v_horizontal, times,
                      norm: HomogeneousNorm | None = None) -> Fragment:
    """Samples of t -> x0 * delta_t(v); exact coordinates for x0 = 0."""
    times = np.asarray(times, dtype=float)
    full = np.zeros(spec.n)
    full[spec.stratum_slice(1)] = np.asarray(v_horizontal, dtype=float)
    steps = times[:, None] * full[None, :]
    x0 = np.asarray(x0, dtype=float)
    pts = steps if not x0.any() else bch_coords(spec, x0, steps)
    return Fragment(times, pts, spec=spec, norm=norm)


def is_C_curve(fragment: Fragment, cone: Cone):
    """Strict cone condition on every ordered pair of horizontal increments.

    Returns (True, None) or (False, (t_earlier, t_later)) for the first
    violating pair in time order.
    """
    horiz = fragment.horizontal()
    n = len(horiz)
    slope = 1.0 - cone.sigma ** 2
    for i in range(n - 1):
        delta = horiz[i + 1:] - horiz[i]
        mags = np.linalg.norm(delta, axis=1)
        ok = (delta @ cone.axis >= slope * mags) & (mags > 0)
        if not ok.all():
            j = i + 1 + int(np.argmin(ok))
            return False, (float(fragment.times[i]), float(fragment.times[j]))
    return True, None


# ------------------------------------------------------------- separation


def _pair_ratio(u: np.ndarray, v: np.ndarray) -> float:
    # exact min over sup-normalized combinations of two nonzero vectors
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    c = min(1.0, max(-1.0, c))
    return float(np.sqrt(1.0 - c * c))


def xi_separation_ratio(vectors, samples: int = 4096, seed: int = 0,
                        refine_rounds: int = 4) -> float:
    """min over the unit sup-sphere of |sum lambda_i v_i| / max|lambda_i v_i|.

    Exact for one or two vectors; sampled with local refinement beyond.
    """
    vs = np.asarray(vectors, dtype=float)
    if vs.ndim != 2:
        raise StructureError("vectors must be a 2-d array, one per row")
    mags = np.linalg.norm(vs, axis=1)
    if np.any(mags == 0):
        return 0.0
    m = len(vs)
    if m == 1:
        return 1.0
    if m == 2:
        return _pair_ratio(vs[0], vs[1])
    rng = np.random.default_rng(seed)

    def ratios(lam):
        scaled = np.abs(lam) * mags[None, :]
        denom = scaled.max(axis=1)
        num = np.linalg.norm(lam @ vs, axis=1)
        return num / denom

    lam = rng.uniform(-1, 1, size=(samples, m))
    lam[np.abs(lam).max(axis=1) == 0] = 1.0
    best_r = ratios(lam)
    keep = np.argsort(best_r)[:16]
    pool = lam[keep]
    step = 0.25
    for _ in range(refine_rounds):
        jitter = pool[:, None, :] + step * rng.uniform(-1, 1, size=(len(pool), 64, m))
        jitter = jitter.reshape(-1, m)
        jitter = jitter[np.abs(jitter).max(axis=1) > 0]
        cand = np.concatenate([pool, jitter])
        r = ratios(cand)
        order = np.argsort(r)[:16]
        pool = cand[order]
        step *= 0.35
    return float(ratios(pool).min())


def xi_separated(vectors, xi: float, **kwargs) -> bool:
    if xi <= 0:
        raise StructureError("xi must be positive")
    return xi_separation_ratio(vectors, **kwargs) > xi


def _cone_boundary_samples(cone: Cone, count: int, rng) -> np.ndarray:
    """Axis plus vectors on the cone boundary (worst-case representatives)."""
    d = len(cone.axis)
    cos_t = 1.0 - cone.sigma ** 2
    sin_t = float(np.sqrt(max(0.0, 1.0 - cos_t ** 2)))
    out = [cone.axis]
    if d == 1 or sin_t == 0.0:
        return np.asarray(out)
    raw = rng.normal(size=(count, d))
    raw -= np.outer(raw @ cone.axis, cone.axis)
    norms = np.linalg.norm(raw, axis=1)
    raw = raw[norms > 1e-12] / norms[norms > 1e-12, None]
    for u in raw:
        out.append(cos_t * cone.axis + sin_t * u)
    return np.asarray(out)


def separated_cones(cones, xi: float, boundary_samples: int = 48,
                    seed: int = 0) -> bool:
    """Every cross-selection of one vector per cone is xi-separated.

    Selections range over axis and boundary representatives; pairwise
    ratios use the exact two-vector formula, so the verdict is the
    sampled minimum over representative pairs and full selections.
    """
    rng = np.random.default_rng(seed)
    reps = [_cone_boundary_samples(c, boundary_samples, rng) for c in cones]
    if len(cones) == 1:
        return 1.0 > xi
    worst = np.inf
    for a in range(len(reps)):
        for b in range(a + 1, len(reps)):
            ua = reps[a] / np.linalg.norm(reps[a], axis=1, keepdims=True)
            ub = reps[b] / np.linalg.norm(reps[b], axis=1, keepdims=True)
            cos = np.abs(ua @ ub.T).max()
            worst = min(worst, float(np.sqrt(max(0.0, 1.0 - min(1.0, cos) ** 2))))
    if len(reps) > 2:
        idx = [rng.integers(0, len(r), size=256) for r in reps]
        for k in range(256):
            sel = np.stack([reps[i][idx[i][k]] for i in range(len(reps))])
            worst = min(worst, xi_separation_ratio(sel, samples=512, seed=seed + k))
    return worst > xi


# ------------------------------------------------------ domain measure


def domain_cells(times, gap_cap: float | None = None) -> np.ndarray:
    """Consecutive-sample intervals with gap below the cap, as (k, 2) rows."""
    t = np.asarray(times, dtype=float)
    gaps = np.diff(t)
    cap = 3.0 * float(np.median(gaps)) if gap_cap is None else float(gap_cap)
    keep = gaps <= cap
    return np.stack([t[:-1][keep], t[1:][keep]], axis=1)


def domain_runs(times, gap_cap: float | None = None) -> np.ndarray:
    """Maximal unions of adjacent cells; widths telescope exactly."""
    cells = domain_cells(times, gap_cap)
    runs = []
    lo, hi = cells[0]
    for a, b in cells[1:]:
        if a == hi:
            hi = b
        else:
            runs.append((lo, hi))
            lo, hi = a, b
    runs.append((lo, hi))
    return np.asarray(runs)


def density_fraction(times, t0: float, r: float,
                     gap_cap: float | None = None) -> float:
    """Measure of the domain inside (t0 - r, t0 + r), over 2r."""
    if r <= 0:
        raise StructureError("radius must be positive")
    runs = domain_runs(times, gap_cap)
    lo = np.maximum(runs[:, 0], t0 - r)
    hi = np.minimum(runs[:, 1], t0 + r)
    return float(np.clip(hi - lo, 0.0, None).sum() / (2.0 * r))


# -------------------------------------------------------- speed check


def horizontal_speed_check(fragment: Fragment, phi, delta: float,
                           window_mult: float = 3.0) -> dict:
    """Fraction of interior samples with ||D(phi.gamma)|| above the local bar.

    The bar is delta * Lip(pi_1 phi, gamma(t)) * Lip(gamma, t), both
    factors estimated over sample neighborhoods of radius window_mult
    mesh widths; an undefined (non-horizontal) derivative scores zero.
    """
    from .pansu import _composed_derivative  # local import to avoid a cycle

    if delta < 0:
        raise StructureError("delta must be nonnegative")
    times = fragment.times
    mesh = fragment.mesh
    window = window_mult * mesh
    n = len(times)
    composed = phi.evaluate(fragment.points)
    horiz_img = composed[:, phi.target.stratum_slice(1)]
    rows = []
    passing = 0
    interior = range(1, n - 1)
    for i in interior:
        nbr = np.nonzero((np.abs(times - times[i]) <= window) & (np.arange(n) != i))[0]
        if len(nbr) < 3:
            raise FragmentError(
                f"sample {i} has {len(nbr)} neighbors in its window; too sparse")
        d_src = fragment.pair_distance(np.full(len(nbr), i), nbr)
        good = d_src > 0
        lip_phi = float((np.linalg.norm(horiz_img[nbr] - horiz_img[i], axis=1)[good]
                         / d_src[good]).max())
        lip_gamma = float((d_src / np.abs(times[nbr] - times[i])).max())
        vel = _composed_derivative(phi, fragment, float(times[i]))
        speed = 0.0 if vel is None else float(np.linalg.norm(vel))
        ok = speed >= delta * lip_phi * lip_gamma
        passing += ok
        rows.append({"t": float(times[i]), "speed": speed,
                     "bar": delta * lip_phi * lip_gamma, "pass": bool(ok)})
    total = len(rows)
    return {"fraction": passing / total if total else 0.0,
            "checked": total, "rows": rows}


# ------------------------------------------------------------- drift


def verify_drift(fragment: Fragment, e, sigma: float, t0: float, R: float,
                 rhos=None, radii_per_decade: int = 16) -> dict:
    """Endpoint drift against the cone-flow prediction, per radius rho.

    Checks the two hypotheses first: (i) domain density above 1 - sigma
    at geometrically sampled radii below R around t0, (ii) the strict
    cone condition for C(e, sigma).  Then for each rho tabulates
    lhs = d(gamma(t0 + rho), gamma(t0) * (I e)) with I the trapezoid
    integral of |D gamma| over the domain cells in [t0, t0 + rho].
    """
    spec, norm = fragment.spec, fragment.norm
    if spec is None:
        raise FragmentError("drift verification needs a group fragment")
    if not 0 < sigma <= 1:
        raise StructureError("sigma must lie in (0, 1]")
    e = np.asarray(e, dtype=float)
    s = spec.step
    times = fragment.times
    mesh = fragment.mesh

    r_lo = 4.0 * mesh
    count = max(2, int(np.ceil(np.log10(R / r_lo) * radii_per_decade)))
    radii = np.geomspace(r_lo, R * (1 - 1e-9), count)
    for r in radii:
        frac = density_fraction(times, t0, float(r))
        if frac <= 1.0 - sigma:
            raise DriftHypothesisError(
                "(i) density", f"fraction {frac:.4f} at r = {r:.4g}")
    cone = Cone(e / np.linalg.norm(e), min(sigma, 1.0 - 1e-12))
    ok, pair = is_C_curve(fragment, cone)
    if not ok:
        raise DriftHypothesisError("(ii) cone", f"violated at pair {pair}")

    i0 = fragment.index_of(t0)
    t_anchor = float(times[i0])
    if rhos is None:
        raw = np.geomspace(max(8 * mesh, R / 32.0), 0.9 * R, 12)
        cands = sorted({float(times[fragment.index_of(t_anchor + rr, tol=R)]) - t_anchor
                        for rr in raw})
        rhos = [c for c in cands if c > 0]
    cells = domain_cells(times)
    left = np.searchsorted(times, cells[:, 0])
    right = np.searchsorted(times, cells[:, 1])
    horiz = fragment.horizontal()
    widths = cells[:, 1] - cells[:, 0]
    rates = np.linalg.norm(horiz[right] - horiz[left], axis=1) / widths

    axis = cone.axis
    rows = []
    for rho in rhos:
        j = fragment.index_of(t_anchor + rho)
        lo = np.maximum(cells[:, 0], t_anchor)
        hi = np.minimum(cells[:, 1], t_anchor + rho)
        integral = float((rates * np.clip(hi - lo, 0.0, None)).sum())
        flow = np.zeros(spec.n)
        flow[spec.stratum_slice(1)] = integral * axis
        target = bch_coords(spec, fragment.points[i0], flow)
        lhs = float(box_norm_coords(norm, bch_coords(spec, -target, fragment.points[j])))
        bound = sigma ** (1.0 / s) * rho
        rows.append((float(rho), lhs, bound, lhs / bound))
    return {
        "sigma": sigma,
        "t0": t_anchor,
        "R": R,
        "rows": rows,
        "max_ratio": max(r[3] for r in rows),
        "mesh": mesh,
    }


# ------------------------------------------------------------ witness


@dataclass(frozen=True)
class GoodPointParams:
    """Inputs of the good-point predicate; thresholds handled in log space.

    The density/cone threshold (K1 v)^(s^(2M)) underflows float64 for
    realistic M, so clause (ii) compares log gap fractions and clause
    (iii) uses the exact-direction degeneration of the cone test.
    """

    v: float
    R: float
    K1: float
    M: int
    axis: np.ndarray
    c0: float = 1.0
    diam_t: float = 1.0
    phi: object | None = None
    y: np.ndarray | None = None

    def threshold_log(self, s: int) -> float:
        if self.v <= 0 or self.K1 <= 0 or self.K1 * self.v >= 1:
            raise StructureError("need v > 0 and 0 < K1 v < 1")
        return float(s ** (2 * self.M)) * np.log(self.K1 * self.v)


def good_point_witness(fragment: Fragment, t: float,
                       params: GoodPointParams) -> dict:
    """Evaluate the witness clauses at time t; first failure is reported."""
    spec, norm = fragment.spec, fragment.norm
    if spec is None:
        raise FragmentError("witness evaluation needs a group fragment")
    s = spec.step
    thr_log = params.threshold_log(s)
    i = fragment.index_of(t)
    details: dict = {"t": float(fragment.times[i]), "threshold_log": thr_log}

    if params.y is not None:
        gap = float(box_norm_coords(norm, bch_coords(spec, -np.asarray(params.y, float),
                                                     fragment.points[i])))
        details["anchor_gap"] = gap
        if gap > 1e-9:
            return {"passed": False, "failed_clause": "(i) anchor", "details": details}

    mesh = fragment.mesh
    r_hi = 40.0 * (params.diam_t + 1.0) * params.c0 * params.R
    r_lo = 4.0 * mesh
    count = max(2, int(np.ceil(np.log10(max(r_hi / r_lo, 1.01)) * 16)))
    radii = np.geomspace(r_lo, r_hi, count)
    t_i = float(fragment.times[i])
    runs = domain_runs(fragment.times)
    hull = (float(fragment.times[0]), float(fragment.times[-1]))
    for r in radii:
        # gap is measured inside the window clipped to the fragment's hull,
        # so radii beyond the span of a gapless fragment report zero gap
        lo, hi = max(hull[0], t_i - r), min(hull[1], t_i + r)
        covered = float(np.clip(np.minimum(runs[:, 1], hi)
                                - np.maximum(runs[:, 0], lo), 0.0, None).sum())
        gap_rel = ((hi - lo) - covered) / (2.0 * r)
        if gap_rel > 0.0 and np.log(gap_rel) >= thr_log:
            details["radius"] = float(r)
            details["gap_fraction"] = gap_rel
            return {"passed": False, "failed_clause": "(ii) density", "details": details}

    if params.phi is not None:
        imgs = params.phi.evaluate(fragment.points)
        tgt = params.phi.target
        horiz = imgs[:, tgt.stratum_slice(1)]
    else:
        horiz = fragment.horizontal()
    axis = np.asarray(params.axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    n = len(fragment.times)
    iu, ju = np.triu_indices(n, k=1)
    delta = horiz[ju] - horiz[iu]
    mags = np.linalg.norm(delta, axis=1)
    sigma_sq = np.exp(2.0 * thr_log)  # (K1 v)^(2 s^(2M)), usually underflows to 0
    cone_ok = (delta @ axis >= (1.0 - sigma_sq) * mags * (1.0 - 1e-12)) & (mags > 0)
    if not cone_ok.all():
        k = int(np.argmin(cone_ok))
        details["pair"] = (float(fragment.times[iu[k]]), float(fragment.times[ju[k]]))
        return {"passed": False, "failed_clause": "(iii) cone", "details": details}
    d_src = fragment.pair_distance(iu, ju)
    speed_ok = mags > params.v * d_src
    if not speed_ok.all():
        k = int(np.argmin(speed_ok))
        details["pair"] = (float(fragment.times[iu[k]]), float(fragment.times[ju[k]]))
        details["increment"] = float(mags[k])
        details["required"] = float(params.v * d_src[k])
        return {"passed": False, "failed_clause": "(iii) speed", "details": details}
    return {"passed": True, "failed_clause": None, "details": details}


# ----------------------------------------------- synthetic drift family


def synthetic_drift_fragment(spec: StratificationSpec, sigma: float,
                             seed: int = 0, pure_flow: bool = False,
                             mesh: float = 2.0 ** -10,
                             span=(-0.5625, 0.9375),
                             gap=(0.25, None)) -> Fragment:
    """Horizontal e_1-flow with sigma-sized e_2 wiggle and a sigma-sized gap.

    pure_flow drops wiggle and gap and builds coordinates directly, so
    the flow identity holds bitwise.  The wiggle direction is
    u(t) = (1, sigma sin(2 pi t + phase)), integrated multiplicatively
    cell by cell; the gap removes (gap[0], gap[0] + 0.4 sigma).
    """
    n1 = spec.strata_dims[0]
    if n1 < 2 and not pure_flow:
        raise StructureError("wiggle family needs at least two horizontal axes")
    k_lo = int(round(span[0] / mesh))
    k_hi = int(round(span[1] / mesh))
    times = np.arange(k_lo, k_hi + 1) * mesh
    e1 = np.zeros(n1)
    e1[0] = 1.0
    if pure_flow:
        return exp_flow_fragment(spec, np.zeros(spec.n), e1, times)

    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)
    u = np.zeros((len(times), spec.n))
    u[:, 0] = 1.0
    u[:, 1] = sigma * np.sin(2 * np.pi * times + phase)
    pts = np.zeros((len(times), spec.n))
    for k in range(1, len(times)):
        step = dilate_coords(spec, u[k - 1], mesh)
        pts[k] = bch_coords(spec, pts[k - 1], step)
    gap_hi = gap[0] + 0.4 * sigma if gap[1] is None else gap[1]
    keep = (times <= gap[0] + 1e-12) | (times >= gap_hi - 1e-12)
    return Fragment(times[keep], pts[keep], spec=spec)
