"""Self-similar dyadic tiles: attractors, verification, translation,
reachability of subcube centers, and the quantitative constant ledger."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .algebra import StratificationSpec, homogeneous_dimension, load_group
from .group import (bch_coords, dilate_coords, inverse_coords, unit_norm,
                    box_norm_coords, sample_unit_sphere_coords,
                    HomogeneousNorm, _dilation_matrix)
from .decompose import (batch_decompose, select_anchor, DecompositionError)


class TilingError(ValueError):
    pass


class LedgerError(ValueError):
    """Raised when the constant chain cannot be verified as given.

    ``check`` names the first violated inequality, ``shrink`` the input
    (k1 or c6) that must decrease.
    """

    def __init__(self, message: str, check: str, shrink: str | None = None):
        super().__init__(message)
        self.check = check
        self.shrink = shrink


# Clouds above this size are returned but not kept in the per-tile cache.
_CACHE_POINT_LIMIT = 3_000_000


class TileSpec:
    """An iterated-function-system tile: 2^Q centers, contraction 1/2.

    The depth-k attractor cloud is generated by the exact recursion
    cloud(k) = union over j of p_j * delta_{1/2}(cloud(k-1)) with
    cloud(0) = {0}. Branch j occupies the contiguous row block
    [j*m, (j+1)*m) where m = len(cloud(k-1)).
    """

    def __init__(self, spec: StratificationSpec, centers, name: str = ""):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        if centers.ndim != 2 or centers.shape[1] != spec.n:
            raise TilingError("centers must be a (count, n) array")
        q = homogeneous_dimension(spec)
        if centers.shape[0] != 2 ** q:
            raise TilingError(
                f"need exactly 2^Q = {2 ** q} centers, got {centers.shape[0]}")
        if not np.isfinite(centers).all():
            raise TilingError("centers must be finite")
        self.spec = spec
        self.centers = centers.copy()
        self.centers.setflags(write=False)
        self.name = name
        self.ratio = 0.5
        self._clouds: dict[int, np.ndarray] = {}

    def cloud(self, depth: int) -> np.ndarray:
        if depth < 0 or int(depth) != depth:
            raise TilingError("depth must be a nonnegative integer")
        depth = int(depth)
        if depth in self._clouds:
            return self._clouds[depth]
        if depth == 0:
            pts = np.zeros((1, self.spec.n))
        else:
            half = dilate_coords(self.spec, self.cloud(depth - 1), self.ratio)
            pts = np.concatenate(
                [bch_coords(self.spec, c, half) for c in self.centers])
        pts.setflags(write=False)
        if len(pts) <= _CACHE_POINT_LIMIT:
            self._clouds[depth] = pts
        return pts

    def branch_count(self) -> int:
        return self.centers.shape[0]


def attractor(spec: StratificationSpec, centers, depth: int) -> np.ndarray:
    """Depth-k address cloud of the IFS with the given centers."""
    return TileSpec(spec, centers).cloud(depth)


def tile_from_dict(data: dict) -> TileSpec:
    spec = load_group(data["group"])
    return TileSpec(spec, np.asarray(data["centers"], dtype=float),
                    name=data.get("name", data["group"]))


def tile_to_dict(tile: TileSpec, provenance: str = "") -> dict:
    return {
        "name": tile.name,
        "group": tile.spec.name,
        "provenance": provenance,
        "centers": [list(map(float, row)) for row in tile.centers],
        "seed": [0.0] * tile.spec.n,
    }


def load_tile(name: str) -> TileSpec:
    from importlib import resources
    path = resources.files("carnot_kit") / "catalog" / f"{name}.json"
    with path.open() as fh:
        return tile_from_dict(json.load(fh))


def _cell_sizes(spec: StratificationSpec, r: float) -> np.ndarray:
    """Anisotropic homogeneous cell edge per coordinate: r^j on stratum j."""
    out = np.empty(spec.n)
    for i in range(spec.n):
        out[i] = r ** spec.stratum_of_index(i + 1)
    return out


def _unique_cells(pts: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    idx = np.floor(pts / sizes).astype(np.int64)
    rows = np.ascontiguousarray(idx)
    view = rows.view([("", np.int64)] * rows.shape[1])
    return np.unique(view).view(np.int64).reshape(-1, rows.shape[1])


def _pack_rows(rows: list[np.ndarray]) -> list[np.ndarray]:
    """Pack integer index rows into scalar keys with a shared offset."""
    lo = np.min([r.min(axis=0) for r in rows], axis=0)
    hi = np.max([r.max(axis=0) for r in rows], axis=0)
    extent = hi - lo + 1
    if np.prod(extent.astype(float)) >= 2 ** 62:
        raise TilingError("cell grid too fine to pack")
    keys = []
    for r in rows:
        shifted = r - lo
        k = shifted[:, 0]
        for ax in range(1, r.shape[1]):
            k = k * extent[ax] + shifted[:, ax]
        keys.append(k)
    return keys

def _snap_scale(diam: float) -> float:
    """Power of two nearest to diam: keeps the counting grid commensurate
    with the dyadic address lattice, so fractions are comparable across
    depths."""
    if diam <= 0:
        return 1.0
    return float(2.0 ** round(math.log2(diam)))


def overlap_fraction(tile: TileSpec, depth: int,
                     grid_resolution: float | None = None,
                     diam_hint: float | None = None) -> dict:
    """Fraction of occupied grid cells claimed by >= 2 subcube clouds.

    The cell edge is grid_resolution on stratum 1 (r^j on stratum j),
    defaulting to snap(diam) * 2^-depth.
    """
    if depth < 1:
        raise TilingError("overlap needs depth >= 1")
    if grid_resolution is None:
        diam = diam_hint if diam_hint is not None else diam_estimate(tile)
        r = _snap_scale(diam) * 2.0 ** (-depth)
    else:
        r = float(grid_resolution)
    if r <= 0:
        raise TilingError("grid resolution must be positive")
    sizes = _cell_sizes(tile.spec, r)
    half = dilate_coords(tile.spec, tile.cloud(depth - 1), tile.ratio)
    branch_cells = [_unique_cells(bch_coords(tile.spec, c, half), sizes)
                    for c in tile.centers]
    keys = _pack_rows(branch_cells)
    uniq, counts = np.unique(np.concatenate(keys), return_counts=True)
    multi = int((counts >= 2).sum())
    return {"depth": int(depth), "fraction": multi / len(uniq),
            "cells_total": int(len(uniq)), "cells_multi": multi,
            "grid_resolution": r}


def overlap_curve(tile: TileSpec, depths,
                  grid_resolution_base: float | None = None) -> list[dict]:
    """Overlap fractions over several depths at commensurate resolutions
    r = base * 2^-depth."""
    depths = sorted(int(d) for d in depths)
    base = grid_resolution_base
    if base is None:
        base = _snap_scale(diam_estimate(tile))
    return [overlap_fraction(tile, d, grid_resolution=base * 2.0 ** (-d))
            for d in depths]


def diam_estimate(tile: TileSpec, depth: int = 4,
                  norm: HomogeneousNorm | None = None,
                  sample: int = 2048, seed: int = 0) -> float:
    """Max pairwise homogeneous distance over a cloud subsample."""
    norm = norm if norm is not None else unit_norm(tile.spec)
    pts = tile.cloud(depth)
    if len(pts) > sample:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(pts), sample, replace=False)
        # keep the coordinate extremes so the subsample brackets the hull
        extremes = np.concatenate([pts.argmin(axis=0), pts.argmax(axis=0)])
        pick = np.unique(np.concatenate([pick, extremes]))
        pts = pts[pick]
    best = 0.0
    for start in range(0, len(pts), 256):
        blk = pts[start:start + 256]
        rel = bch_coords(tile.spec, inverse_coords(tile.spec, blk[:, None, :]),
                         pts[None, :, :])
        best = max(best, float(box_norm_coords(norm, rel).max()))
    return best


def _occupied_keys(pts: np.ndarray, sizes: np.ndarray, lo: np.ndarray,
                   extent: np.ndarray) -> np.ndarray:
    idx = np.floor((pts - lo) / sizes).astype(np.int64)
    idx = np.clip(idx, 0, extent - 1)
    k = idx[:, 0]
    for ax in range(1, idx.shape[1]):
        k = k * extent[ax] + idx[:, ax]
    return k


def interior_radius(tile: TileSpec, depth: int,
                    norm: HomogeneousNorm | None = None,
                    probes: int = 192, radius_steps: int = 120,
                    seed: int = 0,
                    diam_hint: float | None = None) -> float:
    """Largest tested r with B(0, r) inside the cell hull of the cloud.

    The hull is the union of occupied homogeneous cells at the cloud's
    own covering scale snap(diam) * 2^-depth; a radius passes when every
    probe on the sphere of that radius lands in an occupied cell.
    """
    diam = diam_hint if diam_hint is not None else diam_estimate(tile)
    if diam <= 0:
        return 0.0
    norm = norm if norm is not None else unit_norm(tile.spec)
    pts = tile.cloud(depth)
    r_cov = _snap_scale(diam) * 2.0 ** (-depth)
    sizes = _cell_sizes(tile.spec, r_cov)
    # half-cell phase keeps lattice points off cell boundaries
    lo = pts.min(axis=0) - 2.5 * sizes
    hi = pts.max(axis=0) + 2 * sizes
    extent = np.floor((hi - lo) / sizes).astype(np.int64) + 1
    occ = np.unique(_occupied_keys(pts, sizes, lo, extent))
    rng = np.random.default_rng(seed)
    sphere = sample_unit_sphere_coords(tile.spec, norm, rng, probes)
    best = 0.0
    for rad in np.linspace(diam / 50, 0.75 * diam, radius_steps):
        probe = dilate_coords(tile.spec, sphere, rad)
        if (probe < lo).any() or (probe >= hi).any():
            break
        keys = _occupied_keys(probe, sizes, lo, extent)
        if not np.isin(keys, occ).all():
            break
        best = float(rad)
    return best


def verify_tile(tile: TileSpec, norm: HomogeneousNorm | None = None,
                grid_resolution: float | None = None, depth: int = 5,
                probes: int = 192, seed: int = 0) -> dict:
    """Empirical tiling report: self-similarity defect, overlap fraction,
    interior ball radius, and diameter."""
    if depth < 4:
        raise TilingError("verification needs depth >= 4")
    norm = norm if norm is not None else unit_norm(tile.spec)
    cloud = tile.cloud(depth)
    half = dilate_coords(tile.spec, tile.cloud(depth - 1), tile.ratio)
    union = np.concatenate(
        [bch_coords(tile.spec, c, half) for c in tile.centers])
    if union.shape == cloud.shape and np.array_equal(cloud, union):
        defect = 0.0
    else:
        defect = _hausdorff(tile.spec, norm, cloud, union)
    diam = diam_estimate(tile, norm=norm, seed=seed)
    ov = overlap_fraction(tile, depth, grid_resolution=grid_resolution,
                          diam_hint=diam)
    lam = interior_radius(tile, depth, norm=norm, probes=probes, seed=seed,
                          diam_hint=diam)
    return {
        "self_similarity_defect": defect,
        "overlap_fraction": ov["fraction"],
        "lambda_emp": lam,
        "diam_emp": diam,
        "depth": int(depth),
        "grid_resolution": ov["grid_resolution"],
        "cells_total": ov["cells_total"],
        "cells_multi": ov["cells_multi"],
    }


def _hausdorff(spec, norm, a: np.ndarray, b: np.ndarray,
               cap: int = 4096, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    if len(a) > cap:
        a = a[rng.choice(len(a), cap, replace=False)]
    if len(b) > cap:
        b = b[rng.choice(len(b), cap, replace=False)]
    worst = 0.0
    for src, dst in ((a, b), (b, a)):
        for start in range(0, len(src), 128):
            blk = src[start:start + 128]
            rel = bch_coords(spec, inverse_coords(spec, blk[:, None, :]),
                             dst[None, :, :])
            worst = max(worst,
                        float(box_norm_coords(norm, rel).min(axis=1).max()))
    return worst


def translate_tile(tile: TileSpec, tau, lambda_emp: float | None = None,
                   norm: HomogeneousNorm | None = None) -> TileSpec:
    """Conjugated tile with centers tau * p_j * delta_{1/2}(tau)^-1.

    Its infinite attractor is the left translate by tau of the original;
    at finite depth the identity carries a delta_{2^-k}(tau)^-1 tail, see
    translation_defect.
    """
    tau = np.asarray(tau, dtype=float).reshape(tile.spec.n)
    if lambda_emp is not None:
        norm = norm if norm is not None else unit_norm(tile.spec)
        size = float(box_norm_coords(norm, tau))
        if size >= lambda_emp / 4:
            warnings.warn(
                f"translation norm {size:.4g} >= lambda_emp/4 "
                f"= {lambda_emp / 4:.4g}; interior-ball margin not preserved",
                stacklevel=2)
    tail = inverse_coords(tile.spec,
                          dilate_coords(tile.spec, tau, tile.ratio))
    centers = np.array([
        bch_coords(tile.spec, bch_coords(tile.spec, tau, p), tail)
        for p in tile.centers])
    suffix = "+tau" if tile.name else ""
    return TileSpec(tile.spec, centers, name=tile.name + suffix)


def translation_defect(tile: TileSpec, translated: TileSpec, tau,
                       depth: int) -> float:
    """Max coordinate gap in the exact identity
    new_cloud(k) * delta_{2^-k}(tau) = tau * old_cloud(k)."""
    tau = np.asarray(tau, dtype=float).reshape(tile.spec.n)
    scale = 2.0 ** (-depth)
    lhs = bch_coords(tile.spec, translated.cloud(depth),
                     dilate_coords(tile.spec, tau, scale))
    rhs = bch_coords(tile.spec, tau, tile.cloud(depth))
    return float(np.abs(lhs - rhs).max())


def conjugation_constant(spec: StratificationSpec,
                         norm: HomogeneousNorm | None = None,
                         radius: float = 2.0, samples: int = 4096,
                         seed: int = 0) -> float:
    """Empirical C with ||y^-1 x y|| <= C ||x||^(1/s) for x, y in B(0, radius)."""
    norm = norm if norm is not None else unit_norm(spec)
    rng = np.random.default_rng(seed)
    s = spec.step
    xs = sample_unit_sphere_coords(spec, norm, rng, samples)
    xs = xs * _dilation_matrix(spec, np.geomspace(1e-3, radius, samples))
    ys = sample_unit_sphere_coords(spec, norm, rng, samples)
    ys = ys * _dilation_matrix(spec, rng.uniform(0, radius, samples))
    conj = bch_coords(spec, bch_coords(spec, inverse_coords(spec, ys), xs), ys)
    num = box_norm_coords(norm, conj)
    den = box_norm_coords(norm, xs) ** (1.0 / s)
    return float((num / den).max())


def _merge_letters(entries) -> list[tuple[int, float]]:
    """Normal form of a word: adjacent letters along the same direction
    combine (delta_a v * delta_b v = delta_{a+b} v), zero letters drop."""
    out: list[list] = []
    for idx, s in entries:
        if out and out[-1][0] == idx:
            out[-1][1] += s
        else:
            out.append([int(idx), float(s)])
    return [(i, s) for i, s in out if s != 0.0]


def reachability_check(tile: TileSpec, basis=None, xi: float = 0.1,
                       rho: float = 0.1, lam: float | None = None,
                       c0: float | None = None, diam: float | None = None,
                       samples: int = 8, seed: int = 0, retries: int = 3,
                       norm: HomogeneousNorm | None = None) -> dict:
    """Check that every y^-1 p_j admits a word of basis letters whose
    nonzero scalars exceed xi and whose largest scalar is at most
    c0 * ||y^-1 p_j||, with c0 = n * lam / diam when given via lam.

    y ranges over {0} plus random points of B(0, rho). A pair may be
    certified by any anchor among `retries` alternates: the bound is
    existential in the word.
    """
    spec = tile.spec
    norm = norm if norm is not None else unit_norm(spec)
    if xi <= 0:
        raise TilingError("xi must be positive")
    if c0 is None:
        if lam is None:
            raise TilingError("provide either c0 or lam")
        if diam is None:
            diam = diam_estimate(tile, norm=norm, seed=seed)
        c0 = spec.n * lam / diam
    rng = np.random.default_rng(seed)
    ys = [np.zeros(spec.n)]
    if samples > 1 and rho > 0:
        sph = sample_unit_sphere_coords(spec, norm, rng, samples - 1)
        scale = rho * rng.uniform(0.1, 1.0, samples - 1)
        for i in range(samples - 1):
            ys.append(dilate_coords(spec, sph[i], scale[i]))
    anchors = [select_anchor(spec, basis=basis, seed=seed + k)
               for k in range(max(1, retries))]
    rows = []
    passed = 0
    worst_min = np.inf
    worst_max = np.inf
    for yi, y in enumerate(ys):
        targets = np.array([
            bch_coords(spec, inverse_coords(spec, y), p)
            for p in tile.centers])
        norms = box_norm_coords(norm, targets)
        try:
            words = list(batch_decompose(spec, targets, basis=basis,
                                         anchor=anchors[0], norm=norm))
        except DecompositionError:
            words = [None] * len(targets)
        for j in range(len(targets)):
            ok = False
            best = None
            for k in range(len(anchors)):
                if k > 0 or words[j] is None:
                    try:
                        word = batch_decompose(
                            spec, targets[j][None], basis=basis,
                            anchor=anchors[k], norm=norm)[0]
                    except DecompositionError as err:
                        if k == len(anchors) - 1 and best is None:
                            raise DecompositionError(
                                f"decomposition failed at center {j}, "
                                f"sample {yi}: {err}") from err
                        continue
                else:
                    word = words[j]
                letters = _merge_letters(word.entries)
                mags = [abs(s) for _, s in letters]
                min_letter = min(mags) if mags else np.inf
                max_letter = max(mags) if mags else 0.0
                cap = c0 * norms[j]
                row = {
                    "center": j, "sample": yi, "anchor": k,
                    "norm": float(norms[j]), "word_length": len(letters),
                    "min_letter": float(min_letter),
                    "max_letter": float(max_letter),
                    "min_margin": float(min_letter - xi),
                    "max_margin": float(cap - max_letter),
                }
                row["passed"] = min_letter > xi and max_letter <= cap
                if best is None or row["min_margin"] > best["min_margin"]:
                    best = row
                if row["passed"]:
                    ok = True
                    best = row
                    break
            rows.append(best)
            if ok:
                passed += 1
            worst_min = min(worst_min, best["min_margin"])
            worst_max = min(worst_max, best["max_margin"])
    checked = len(rows)
    return {
        "pass_fraction": passed / checked,
        "checked": checked,
        "failures": checked - passed,
        "worst_min_margin": float(worst_min),
        "worst_max_margin": float(worst_max),
        "xi": float(xi),
        "c0": float(c0),
        "rows": rows,
    }


@dataclass(frozen=True)
class LogValue:
    """A positive constant tracked in log10; value underflows to 0.0
    gracefully when the log is below the float range."""
    log10: float

    @property
    def value(self) -> float:
        if self.log10 < -320:
            return 0.0
        return 10.0 ** self.log10

    @classmethod
    def of(cls, x: float) -> "LogValue":
        if x <= 0:
            raise TilingError("log-tracked constants must be positive")
        return cls(math.log10(x))


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ConstantLedger:
    inputs: dict
    eps1: float
    k1: LogValue
    n_big: float
    c2: LogValue
    c4: LogValue
    c5: float
    c6: LogValue
    c7: float
    c11: LogValue
    checks: tuple[Check, ...] = field(default_factory=tuple)
    shrink_events: tuple[str, ...] = field(default_factory=tuple)

    def all_pass(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _log_add(a: float, b: float) -> float:
    """log10(10^a + 10^b) without overflow."""
    hi, lo = max(a, b), min(a, b)
    return hi + math.log10(1.0 + 10.0 ** (lo - hi))


def constant_ledger(diam_t: float, c0: float, M: int, lam: float,
                    lip_phi: float, s: int, conj_c: float, drift_c1: float,
                    xi: float = 0.1, c_surj: float = 0.1,
                    k1: float | None = None, c6: float | None = None,
                    auto_shrink: bool = True) -> ConstantLedger:
    """Evaluate the quantitative constant chain and verify its inequalities.

    K1 and C6 default to half their stated upper bounds. When the derived
    smallness checks fail there, both are shrunk (in log space; the
    required values underflow float range for moderate M) until the chain
    verifies, and each shrink is recorded. With auto_shrink=False a failed
    check raises LedgerError naming the first violated inequality.
    """
    for nm, v in (("diam_t", diam_t), ("c0", c0), ("M", M), ("lam", lam),
                  ("lip_phi", lip_phi), ("s", s), ("conj_c", conj_c),
                  ("drift_c1", drift_c1), ("xi", xi), ("c_surj", c_surj)):
        if v <= 0:
            raise TilingError(f"ledger input {nm} must be positive")
    if lam >= diam_t / 4:
        raise TilingError("lam must be below diam_t / 4")
    if s < 1:
        raise TilingError("step s must be at least 1")
    M = int(M)
    s = int(s)

    eps1 = min(lam, xi)
    c7 = 4.0 * c0 * (diam_t + 1.0)
    n_big = 2.0 * (8.0 * M * c0 * (diam_t + 1.0) + 1.0) / lam
    c5 = 4.0 * 2.0 * M * (2.0 + 64.0 * (diam_t + 1.0) * c0)

    k1_bound = min(eps1 / (32.0 * (diam_t + 1.0) * c0
                           * (drift_c1 + 2.0 * lip_phi)), 1.0 / 100.0)
    c6_bound = min(eps1 / (4.0 * lip_phi), 1.0 / (100.0 + n_big), c7 / 100.0)

    shrink: list[str] = []
    log_k1 = math.log10(k1) if k1 is not None else math.log10(k1_bound / 2)
    log_c6 = math.log10(c6) if c6 is not None else math.log10(c6_bound / 2)
    if auto_shrink and log_k1 >= math.log10(k1_bound):
        shrink.append(f"k1 shrunk to bound/2: log10 {log_k1:.3g} -> "
                      f"{math.log10(k1_bound / 2):.3g}")
        log_k1 = math.log10(k1_bound / 2)
    if auto_shrink and log_c6 >= math.log10(c6_bound):
        shrink.append(f"c6 shrunk to bound/2: log10 {log_c6:.3g} -> "
                      f"{math.log10(c6_bound / 2):.3g}")
        log_c6 = math.log10(c6_bound / 2)

    # the two C11 summands, in log10
    log_lip_pow = math.log10(lip_phi) / s
    log_conj_term = math.log10(conj_c) + log_lip_pow

    def chain(log_k1: float, log_c6: float):
        t1 = log_conj_term + log_c6 / s
        t2 = (math.log10(4.0) + log_k1
              + math.log10((2.0 * drift_c1 + 4.0 * lip_phi)
                           * (diam_t + 1.0) * c0))
        log_c11 = _log_add(t1, t2)
        log_c4 = log_c11 / (s ** M) + M * math.log10(2.0 * max(conj_c, 1.0))
        log_c2 = log_c4 + 1.0
        return log_c11, log_c4, log_c2

    log_c11, log_c4, log_c2 = chain(log_k1, log_c6)
    c2_cap = min(1.0 / 100.0, c7 / 10.0, c_surj / 10.0)

    needs_shrink = (log_c11 >= 0.0 or log_c2 >= math.log10(c2_cap))
    if needs_shrink and auto_shrink:
        # pick C2 a decade under its cap, then solve the chain backwards,
        # splitting C11 evenly between its two summands
        target_c2 = math.log10(c2_cap) - 1.0
        target_c4 = target_c2 - 1.0
        target_c11 = min(
            (target_c4 - M * math.log10(2.0 * max(conj_c, 1.0))) * (s ** M),
            -1.0)
        half = target_c11 - math.log10(2.0)
        new_c6 = min(log_c6, (half - log_conj_term) * s)
        new_k1 = min(log_k1, half - math.log10(4.0)
                     - math.log10((2.0 * drift_c1 + 4.0 * lip_phi)
                                  * (diam_t + 1.0) * c0))
        if new_k1 < log_k1:
            shrink.append(f"k1 shrunk: log10 {log_k1:.3g} -> {new_k1:.3g}")
            log_k1 = new_k1
        if new_c6 < log_c6:
            shrink.append(f"c6 shrunk: log10 {log_c6:.3g} -> {new_c6:.3g}")
            log_c6 = new_c6
        log_c11, log_c4, log_c2 = chain(log_k1, log_c6)

    c2_value = 10.0 ** log_c2 if log_c2 > -320 else 0.0
    checks = (
        Check("k1_upper", log_k1 < math.log10(k1_bound),
              f"log10 K1 = {log_k1:.4g}, bound {math.log10(k1_bound):.4g}"),
        Check("c6_upper", log_c6 < math.log10(c6_bound),
              f"log10 C6 = {log_c6:.4g}, bound {math.log10(c6_bound):.4g}"),
        Check("c11_unit", log_c11 < 0.0, f"log10 C11 = {log_c11:.4g}"),
        Check("c2_small", log_c2 < math.log10(c2_cap),
              f"log10 C2 = {log_c2:.4g}, cap {math.log10(c2_cap):.4g}"),
        Check("n_lower",
              n_big > (8.0 * M * c0 * (diam_t + 1.0) + c2_value) / lam,
              f"N = {n_big:.4g}"),
    )
    if not all(c.passed for c in checks):
        first = next(c for c in checks if not c.passed)
        shrink_target = {"k1_upper": "k1", "c6_upper": "c6",
                         "c11_unit": "k1", "c2_small": "c6"}.get(first.name)
        raise LedgerError(
            f"constant chain fails at {first.name} ({first.detail})",
            check=first.name, shrink=shrink_target)

    inputs = {"diam_t": diam_t, "c0": c0, "M": M, "lam": lam,
              "lip_phi": lip_phi, "s": s, "conj_c": conj_c,
              "drift_c1": drift_c1, "xi": xi, "c_surj": c_surj}
    return ConstantLedger(
        inputs=inputs, eps1=eps1, k1=LogValue(log_k1), n_big=n_big,
        c2=LogValue(log_c2), c4=LogValue(log_c4), c5=c5,
        c6=LogValue(log_c6), c7=c7, c11=LogValue(log_c11),
        checks=checks, shrink_events=tuple(shrink))
