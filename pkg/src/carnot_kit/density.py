"""Density and rectifiability diagnostics on weighted point clouds:
Ahlfors-type bounds, DC-set membership, and the David mass fraction."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .algebra import StratificationSpec, homogeneous_dimension
from .group import (bch_coords, inverse_coords, unit_norm, box_norm_coords,
                    sample_box_coords, HomogeneousNorm)


class DensityError(ValueError):
    pass


_CHUNK = 262_144


@dataclass
class WeightedCloud:
    """Finite measure: atoms at `points` with positive `weights`.

    Group clouds carry a spec (and optional norm); abstract metric clouds
    carry a `distance` callback d(x, points) -> array instead.
    """
    points: np.ndarray
    weights: np.ndarray
    spec: StratificationSpec | None = None
    norm: HomogeneousNorm | None = None
    distance: Callable | None = field(default=None, compare=False)
    _nn_median: float | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if len(self.weights) != len(self.points):
            raise DensityError("one weight per point required")
        if len(self.points) == 0:
            raise DensityError("cloud must not be empty")
        if not np.isfinite(self.points).all():
            raise DensityError("points must be finite")
        if not ((self.weights > 0) & np.isfinite(self.weights)).all():
            raise DensityError("weights must be positive and finite")
        if self.spec is not None:
            if self.points.shape[1] != self.spec.n:
                raise DensityError("points do not match the group dimension")
            if self.norm is None:
                self.norm = unit_norm(self.spec)
        elif self.distance is None:
            raise DensityError("need a spec or a distance callback")

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def distances(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if self.distance is not None and self.spec is None:
            return np.asarray(self.distance(x, self.points), dtype=float)
        out = np.empty(len(self.points))
        inv = inverse_coords(self.spec, x)
        for start in range(0, len(self.points), _CHUNK):
            blk = self.points[start:start + _CHUNK]
            rel = bch_coords(self.spec, inv, blk)
            out[start:start + _CHUNK] = box_norm_coords(self.norm, rel)
        return out

    def ball_masses(self, x, radii) -> np.ndarray:
        d = self.distances(x)
        radii = np.asarray(radii, dtype=float)
        order = np.argsort(d)
        cum = np.concatenate([[0.0], np.cumsum(self.weights[order])])
        pos = np.searchsorted(d[order], radii, side="right")
        return cum[pos]

    def nn_median(self, sample: int = 2048, seed: int = 0) -> float:
        """Median nearest-neighbor distance, estimated on a subsample."""
        if self._nn_median is None:
            self._nn_median = _nn_median(self, sample=sample, seed=seed)
        return self._nn_median

    def resolution_floor(self) -> float:
        # estimates below five nearest-neighbor spacings are refused
        return 5.0 * self.nn_median()


def _homogeneous_cell_sizes(spec: StratificationSpec, h: float) -> np.ndarray:
    out = np.empty(spec.n)
    for i in range(spec.n):
        out[i] = h ** spec.stratum_of_index(i + 1)
    return out


def _nn_median(cloud: WeightedCloud, sample: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    pts = cloud.points
    n = len(pts)
    if n < 2:
        raise DensityError("nearest-neighbor scale needs at least 2 points")
    pick = np.arange(n) if n <= sample else rng.choice(n, sample,
                                                       replace=False)
    if cloud.spec is None:
        vals = []
        for i in pick:
            d = cloud.distances(pts[i])
            d[i] = np.inf
            vals.append(d.min())
        return float(np.median(vals))
    spec = cloud.spec
    q = homogeneous_dimension(spec)
    extent = pts.max(axis=0) - pts.min(axis=0)
    vol = float(np.prod(np.maximum(extent, 1e-12)))
    h = (vol / n) ** (1.0 / q)
    vals = np.full(len(pick), np.inf)
    todo = np.arange(len(pick))
    for _ in range(40):
        sizes = _homogeneous_cell_sizes(spec, h)
        lo = pts.min(axis=0) - 2.5 * sizes
        idx = np.floor((pts - lo) / sizes).astype(np.int64)
        extent_cells = idx.max(axis=0) + 2
        keys = idx[:, 0].copy()
        for ax in range(1, spec.n):
            keys = keys * extent_cells[ax] + idx[:, ax]
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        offsets = np.array(list(itertools.product((-1, 0, 1),
                                                  repeat=spec.n)))
        strides = np.ones(spec.n, dtype=np.int64)
        for ax in range(spec.n - 2, -1, -1):
            strides[ax] = strides[ax + 1] * extent_cells[ax + 1]
        probe = keys[pick[todo]][:, None] + (offsets @ strides)[None, :]
        lo_pos = np.searchsorted(sorted_keys, probe.ravel(), side="left")
        hi_pos = np.searchsorted(sorted_keys, probe.ravel(), side="right")
        counts = (hi_pos - lo_pos).reshape(len(todo), -1)
        occupied = counts.sum(axis=1) > 1  # own cell always holds the point
        still = []
        for row, t in enumerate(todo):
            if not occupied[row]:
                still.append(t)
                continue
            i = pick[t]
            cand = []
            for c in range(offsets.shape[0]):
                a = lo_pos[row * offsets.shape[0] + c]
                b = hi_pos[row * offsets.shape[0] + c]
                cand.append(order[a:b])
            cand = np.concatenate(cand)
            cand = cand[cand != i]
            if len(cand) == 0:
                still.append(t)
                continue
            rel = bch_coords(spec, inverse_coords(spec, pts[i]), pts[cand])
            vals[t] = box_norm_coords(cloud.norm, rel).min()
        if not still:
            break
        todo = np.array(still)
        h *= 2.0
    if np.isinf(vals).any():
        # isolated points: fall back to exact scan for the stragglers
        for t in np.where(np.isinf(vals))[0]:
            d = cloud.distances(pts[pick[t]])
            d[pick[t]] = np.inf
            vals[t] = d.min()
    return float(np.median(vals))


class DensityEstimate(NamedTuple):
    theta_lower: float
    theta_upper: float
    floor: float
    radii: np.ndarray
    thetas: np.ndarray


def density_estimates(cloud: WeightedCloud, x, radii, Q: float
                      ) -> DensityEstimate:
    """Min and max of mu(B(x, r)) / r^Q over the finest decade of radii
    above the cloud's resolution floor."""
    radii = np.sort(np.asarray(radii, dtype=float).ravel())
    if len(radii) < 2 or radii[0] <= 0:
        raise DensityError("radii must be positive")
    if radii[-1] / radii[0] < 1e3 * (1 - 1e-9):
        raise DensityError("radii must span at least 3 decades")
    floor = cloud.resolution_floor()
    usable = radii[radii > floor]
    if len(usable) == 0:
        raise DensityError(
            f"all radii below the resolution floor {floor:.4g}")
    decade = usable[usable < 10.0 * usable[0]]
    masses = cloud.ball_masses(x, decade)
    thetas = masses / decade ** Q
    return DensityEstimate(float(thetas.min()), float(thetas.max()),
                           floor, decade, thetas)


def density_profile(cloud: WeightedCloud, x, radii, Q: float):
    """(radii, theta) over every radius above the resolution floor."""
    radii = np.sort(np.asarray(radii, dtype=float).ravel())
    floor = cloud.resolution_floor()
    usable = radii[radii > floor]
    if len(usable) == 0:
        raise DensityError(
            f"all radii below the resolution floor {floor:.4g}")
    masses = cloud.ball_masses(x, usable)
    return usable, masses / usable ** Q


def ahlfors_set(cloud: WeightedCloud, l: float, R: float, Q: float,
                steps: int = 10) -> np.ndarray:
    """Mask of points satisfying l^-1 r^Q <= mu(B(x, r)) <= l r^Q at every
    sampled radius in (resolution floor, R). Quadratic in the cloud size."""
    if l < 1:
        raise DensityError("l must be at least 1")
    floor = cloud.resolution_floor()
    if R <= floor:
        raise DensityError(
            f"R = {R:.4g} is below the resolution floor {floor:.4g}")
    radii = np.geomspace(floor * 1.0001, R, steps)
    lower = radii ** Q / l
    upper = radii ** Q * l
    mask = np.empty(len(cloud.points), dtype=bool)
    for i, x in enumerate(cloud.points):
        masses = cloud.ball_masses(x, radii)
        mask[i] = bool(((masses >= lower) & (masses <= upper)).all())
    return mask


@dataclass(frozen=True)
class DCResult:
    passed: bool
    rows: tuple
    slack: float
    r_low: float
    r_high: float

    def __bool__(self) -> bool:
        return self.passed


def _cells_in_ball(spec: StratificationSpec, radius: float,
                   sizes: np.ndarray, norm: HomogeneousNorm) -> np.ndarray:
    """Integer indices of homogeneous grid cells whose center lies in
    B(0, radius). Images are rounded to the same lattice, so numerator
    and denominator of the hit fraction live on one grid."""
    ranges = []
    for ax in range(spec.n):
        k = int(np.ceil(radius / sizes[ax])) + 1
        ranges.append(np.arange(-k, k + 1))
    grids = np.meshgrid(*ranges, indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    inside = box_norm_coords(norm, idx * sizes) <= radius
    return idx[inside]


def _pack_rows(idx: np.ndarray, span: int) -> np.ndarray:
    keys = idx[:, 0].astype(np.int64).copy()
    for ax in range(1, idx.shape[1]):
        keys = keys * span + idx[:, ax]
    return np.unique(keys)


def _dc_single(cloud: WeightedCloud, dist: np.ndarray, phi, x, beta: float,
               eps: float, R: float, grid: int, gamma: float,
               steps: int, target_spec, target_norm) -> DCResult:
    nn = cloud.nn_median()
    r_low = max(cloud.resolution_floor(), gamma * grid * nn / beta)
    if r_low >= R:
        raise DensityError(
            "grid too coarse: the cloud cannot resolve grid cells below R "
            f"(needs r >= {r_low:.4g})")
    radii = np.geomspace(r_low, R, steps)
    phi_x = np.asarray(phi(np.asarray(x, dtype=float)[None, :])[0]
                       if phi is not None else x, dtype=float)
    inv_phi_x = inverse_coords(target_spec, phi_x)
    rows = []
    passed = True
    for i, r in enumerate(radii):
        h = beta * r / grid
        sizes = _homogeneous_cell_sizes(target_spec, h)
        ball_idx = _cells_in_ball(target_spec, beta * r, sizes, target_norm)
        if i == 0 and len(ball_idx) < 100:
            raise DensityError(
                f"grid too coarse: only {len(ball_idx)} cells in the "
                "target ball, need at least 100")
        src = np.where(dist <= r)[0]
        if len(src) == 0 or len(ball_idx) == 0:
            fraction = 0.0
        else:
            imgs = cloud.points[src] if phi is None else np.atleast_2d(
                np.asarray(phi(cloud.points[src]), dtype=float))
            rel = bch_coords(target_spec, inv_phi_x, imgs)
            # images outside the target ball's bounding box cannot hit a cell
            near = (np.abs(rel) <= 2.0 * _homogeneous_cell_sizes(
                target_spec, beta * r) + sizes).all(axis=1)
            rel = rel[near]
            if len(rel) == 0:
                fraction = 0.0
            else:
                cell_idx = np.floor(rel / sizes + 0.5).astype(np.int64)
                span = int(2 * max(np.abs(cell_idx).max(),
                                   np.abs(ball_idx).max()) + 3)
                hit_keys = _pack_rows(cell_idx, span)
                ball_keys = _pack_rows(ball_idx, span)
                fraction = float(np.isin(ball_keys, hit_keys).mean())
        rows.append((float(r), fraction))
        if fraction < 1.0 - eps:
            passed = False
    return DCResult(passed=passed, rows=tuple(rows), slack=1.0 / grid,
                    r_low=float(radii[0]), r_high=float(radii[-1]))


def dc_membership(cloud: WeightedCloud, phi, x, beta: float, eps: float,
                  R: float, grid: int = 2, gamma: float = 3.0,
                  steps: int = 5, target_spec=None,
                  target_norm=None) -> DCResult:
    """Does the chart image of B(x, r) nearly fill B(phi(x), beta r)?

    At every sampled r below R the fraction of homogeneous grid cells of
    the target ball hit by images of cloud points within B(x, r) must
    reach 1 - eps. Truthy result carries per-radius fractions and the
    cell-size slack 1/grid.
    """
    if not 0 < beta < 1:
        raise DensityError("beta must lie in (0, 1)")
    if not 0 < eps < 1:
        raise DensityError("eps must lie in (0, 1)")
    if cloud.spec is None and phi is None:
        raise DensityError("identity chart needs a group cloud")
    target_spec = target_spec if target_spec is not None else cloud.spec
    target_norm = target_norm if target_norm is not None \
        else unit_norm(target_spec)
    dist = cloud.distances(x)
    return _dc_single(cloud, dist, phi, x, beta, eps, R, grid, gamma, steps,
                      target_spec, target_norm)


def david_fraction(cloud: WeightedCloud, phi, eps: float, betas, Rs,
                   grid: int = 2, gamma: float = 3.0, steps: int = 5,
                   sample: int = 160, seed: int = 0, target_spec=None,
                   target_norm=None) -> dict:
    """Mass fraction of points lying in DC(beta, eps, R) for at least one
    (beta, R) on the parameter grid, estimated on a weighted point sample."""
    if not 0 < eps <= 1:
        raise DensityError("eps must lie in (0, 1]")
    betas = [float(b) for b in np.atleast_1d(betas)]
    Rs = [float(R) for R in np.atleast_1d(Rs)]
    if not betas or not Rs:
        raise DensityError("parameter grid must be nonempty")
    if not all(0 < b < 1 for b in betas) or not all(R > 0 for R in Rs):
        raise DensityError("betas must lie in (0, 1) and Rs be positive")
    target_spec = target_spec if target_spec is not None else cloud.spec
    if target_spec is None:
        raise DensityError("david_fraction needs a group target")
    target_norm = target_norm if target_norm is not None \
        else unit_norm(target_spec)
    rng = np.random.default_rng(seed)
    n = len(cloud.points)
    probs = cloud.weights / cloud.total_mass
    pick = rng.choice(n, min(sample, n), replace=True, p=probs)
    passes = 0
    rows = []
    for i in pick:
        x = cloud.points[i]
        dist = cloud.distances(x)
        ok = False
        if eps >= 1.0:
            ok = True
        else:
            for beta in betas:
                for R in Rs:
                    try:
                        res = _dc_single(cloud, dist, phi, x, float(beta),
                                         eps, float(R), grid, gamma, steps,
                                         target_spec, target_norm)
                    except DensityError:
                        continue
                    if res.passed:
                        ok = True
                        break
                if ok:
                    break
        passes += ok
        rows.append({"index": int(i), "passed": bool(ok)})
    return {"fraction": passes / len(pick), "sample": int(len(pick)),
            "eps": float(eps), "rows": rows}


def box_count_constant(spec: StratificationSpec,
                       norm: HomogeneousNorm | None = None,
                       grid: int = 8) -> float:
    """Count-measure normalization: cell count of the unit ball's cover
    times the cell volume h^Q. Only ratios enter the DC diagnostics, so
    this constant is reported, never consumed."""
    norm = norm if norm is not None else unit_norm(spec)
    h = 1.0 / grid
    sizes = _homogeneous_cell_sizes(spec, h)
    cells = _cells_in_ball(spec, 1.0, sizes, norm)
    return float(len(cells) * h ** homogeneous_dimension(spec))


def uniform_ball_cloud(spec: StratificationSpec, count: int, radius: float,
                       seed: int = 0,
                       norm: HomogeneousNorm | None = None) -> WeightedCloud:
    """Uniform (Haar) sample of a box-norm ball, unit total mass."""
    norm = norm if norm is not None else unit_norm(spec)
    rng = np.random.default_rng(seed)
    out = []
    have = 0
    while have < count:
        batch = sample_box_coords(spec, rng, int(count * 1.4) + 256, radius)
        keep = batch[box_norm_coords(norm, batch) <= radius]
        out.append(keep)
        have += len(keep)
    pts = np.concatenate(out)[:count]
    return WeightedCloud(pts, np.full(count, 1.0 / count), spec=spec,
                         norm=norm)


def segment_cloud(spec: StratificationSpec, count: int, axis: int,
                  extent: float = 1.0, seed: int = 0) -> WeightedCloud:
    """Uniform sample of a coordinate-axis segment, unit total mass."""
    rng = np.random.default_rng(seed)
    pts = np.zeros((count, spec.n))
    pts[:, axis] = rng.uniform(-extent, extent, count)
    return WeightedCloud(pts, np.full(count, 1.0 / count), spec=spec)
