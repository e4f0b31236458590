"""Difference quotients, derivative estimation, and differentials along curves."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .algebra import StratificationSpec, StructureError
from .group import (
    ExtensionError,
    HomogeneousHom,
    HomogeneousNorm,
    bch_coords,
    box_norm_coords,
    dilate_coords,
    extend_horizontal,
    unit_norm,
)


@dataclass(frozen=True)
class MapSampler:
    """Deterministic map between groups, evaluated on coordinate batches.

    fn takes and returns arrays of shape (..., n); it must be a pure
    function of its input so repeated evaluation agrees bitwise.
    """

    source: StratificationSpec
    target: StratificationSpec
    fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float | None = None
    name: str = ""

    def evaluate(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = np.asarray(self.fn(p), dtype=float)
        if out.shape != p.shape[:-1] + (self.target.n,):
            raise StructureError(
                f"map returned shape {out.shape} for input {p.shape}")
        return out

    def __call__(self, p) -> np.ndarray:
        return self.evaluate(p)


def sampler_from_hom(hom: HomogeneousHom, translation=None,
                     name: str = "") -> MapSampler:
    """The map x -> g * L(x) as a sampler."""
    if translation is None:
        translation = np.zeros(hom.target.n)
    g = np.asarray(translation, dtype=float)

    def fn(p):
        return bch_coords(hom.target, g, hom.apply_coords(p))

    return MapSampler(hom.source, hom.target, fn,
                      name=name or "translated-hom")


def constant_sampler(source: StratificationSpec, target: StratificationSpec,
                     value=None) -> MapSampler:
    val = np.zeros(target.n) if value is None else np.asarray(value, dtype=float)
    return MapSampler(source, target,
                      lambda p: np.broadcast_to(val, p.shape[:-1] + (target.n,)).copy(),
                      name="constant")


def pansu_residual(f: MapSampler, hom: HomogeneousHom, x0, x,
                   norm_source: HomogeneousNorm | None = None,
                   norm_target: HomogeneousNorm | None = None) -> np.ndarray:
    """|| L(x0^-1 x)^-1 * f(x0)^-1 * f(x) ||_H / d(x0, x), batched over x."""
    ns = norm_source or unit_norm(f.source)
    nt = norm_target or unit_norm(f.target)
    x0 = np.asarray(x0, dtype=float)
    x = np.asarray(x, dtype=float)
    step = bch_coords(f.source, -x0, x)
    d = box_norm_coords(ns, step)
    if np.any(d == 0):
        raise StructureError("pansu_residual needs x != x0")
    fx0 = f.evaluate(np.broadcast_to(x0, x.shape))
    image_step = bch_coords(f.target, -fx0, f.evaluate(x))
    defect = bch_coords(f.target, -hom.apply_coords(step), image_step)
    return box_norm_coords(nt, defect) / d


@dataclass(frozen=True)
class ResidualCurve:
    """Max residual per scale, with the per-direction table kept alongside."""

    scales: np.ndarray
    residuals: np.ndarray
    per_direction: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=float)
        r = np.asarray(self.residuals, dtype=float)
        if s.ndim != 1 or np.any(np.diff(s) >= 0):
            raise StructureError("scales must be strictly decreasing")
        if r.shape != s.shape:
            raise StructureError("one residual per scale")
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "residuals", r)
        object.__setattr__(self, "per_direction", np.asarray(self.per_direction, dtype=float))

    def rows(self) -> list[tuple[float, float]]:
        return [(float(t), float(r)) for t, r in zip(self.scales, self.residuals)]

    def finest_decade_slope(self) -> float:
        """Log-log slope fitted over scales within 10x of the smallest.

        Exact zeros are dropped before fitting (they have no log); nan
        when fewer than two usable points remain.
        """
        t0 = self.scales.min()
        mask = (self.scales <= 10.0 * t0 * (1 + 1e-12)) & (self.residuals > 0)
        if mask.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(self.scales[mask]),
                                np.log(self.residuals[mask]), 1)[0])


def default_scales(count: int = 11) -> np.ndarray:
    return 2.0 ** -np.arange(count)


def default_directions(spec: StratificationSpec) -> np.ndarray:
    """V_1 basis first (so the fit interpolates there), then pair sums."""
    n1 = spec.strata_dims[0]
    rows = [np.eye(n1)]
    extra = [np.eye(n1)[i] + np.eye(n1)[j]
             for i in range(n1) for j in range(i + 1, n1)]
    if extra:
        rows.append(np.stack(extra))
    return np.concatenate(rows, axis=0)


def pansu_quotients(f: MapSampler, x0, scale: float, directions) -> np.ndarray:
    """delta_{1/t}( f(x0)^-1 f(x0 * delta_t v) ) for each direction row v."""
    src, tgt = f.source, f.target
    x0 = np.asarray(x0, dtype=float)
    dirs = np.asarray(directions, dtype=float)
    full = np.zeros((len(dirs), src.n))
    full[:, src.stratum_slice(1)] = dirs
    probes = bch_coords(src, x0, dilate_coords(src, full, scale))
    fx0 = f.evaluate(np.broadcast_to(x0, probes.shape))
    quot = bch_coords(tgt, -fx0, f.evaluate(probes))
    return dilate_coords(tgt, quot, 1.0 / scale)


def estimate_pansu_derivative(f: MapSampler, x0, scales=None, directions=None,
                              norm_source: HomogeneousNorm | None = None,
                              norm_target: HomogeneousNorm | None = None,
                              extension_tol: float = 1e-6,
                              ) -> tuple[HomogeneousHom, ResidualCurve]:
    """Fit the V_1 block at the smallest scale, extend, tabulate decay.

    The fit solves the quotient system on the first n_1 directions when
    those form an invertible square (the default set starts with the
    standard basis, making the fit an interpolation there) and falls
    back to least squares over all directions otherwise.
    """
    src, tgt = f.source, f.target
    scales = default_scales() if scales is None else np.asarray(scales, dtype=float)
    dirs = default_directions(src) if directions is None else np.asarray(directions, dtype=float)
    n1 = src.strata_dims[0]
    if dirs.shape[0] < n1 or np.linalg.matrix_rank(dirs) < n1:
        raise StructureError(f"need >= {n1} independent directions")
    if scales.max() / scales.min() < 1000 * (1 - 1e-12):
        raise StructureError("scales must span at least three decades")

    t_star = float(scales.min())
    quot = pansu_quotients(f, x0, t_star, dirs)
    q1 = quot[:, tgt.stratum_slice(1)]
    head = dirs[:n1]
    if head.shape == (n1, n1) and np.linalg.matrix_rank(head) == n1:
        a1 = np.linalg.solve(head, q1[:n1]).T
    else:
        a1 = np.linalg.lstsq(dirs, q1, rcond=None)[0].T

    blocks, defect = extend_horizontal(src, tgt, a1)
    scale_ref = max(1.0, float(np.abs(a1).max()))
    if defect > extension_tol * scale_ref:
        raise ExtensionError(
            f"fitted V_1 block does not extend to a morphism: defect {defect:.3g}",
            defect)
    hom = HomogeneousHom(src, tgt, blocks)

    x0 = np.asarray(x0, dtype=float)
    full = np.zeros((len(dirs), src.n))
    full[:, src.stratum_slice(1)] = dirs
    order = np.argsort(scales)[::-1]
    per_dir = np.empty((len(scales), len(dirs)))
    for row, idx in enumerate(order):
        t = scales[idx]
        probes = bch_coords(src, x0, dilate_coords(src, full, t))
        per_dir[row] = pansu_residual(f, hom, x0, probes, norm_source, norm_target)
    curve = ResidualCurve(scales[order], per_dir.max(axis=1), per_dir)
    return hom, curve


def assemble_differential(target: StratificationSpec, partials, word) -> np.ndarray:
    """Product of dilated partials: delta_{s_1}(d_{i_1}) * ... * delta_{s_k}(d_{i_k}).

    partials[i] is the V_1(target) value of the i-th horizontal partial
    derivative (1-based indices in the word).
    """
    parts = [np.asarray(p, dtype=float) for p in partials]
    n1 = target.strata_dims[0]
    out = np.zeros(target.n)
    for idx, scalar in word:
        idx = int(idx)
        if not 1 <= idx <= len(parts):
            raise StructureError(f"word index {idx} outside [1, {len(parts)}]")
        if parts[idx - 1].shape != (n1,):
            raise StructureError(f"partial {idx} is not a V_1 vector")
        letter = np.zeros(target.n)
        letter[target.stratum_slice(1)] = parts[idx - 1]
        out = bch_coords(target, out, dilate_coords(target, letter, float(scalar)))
    return out


def _locate_time(times: np.ndarray, t0: float) -> int:
    if t0 < times[0] - 1e-12 or t0 > times[-1] + 1e-12:
        raise StructureError(f"t0 = {t0} outside sampled domain")
    return int(np.argmin(np.abs(times - t0)))


def curve_quotient(spec: StratificationSpec, times, points, i: int, j: int) -> np.ndarray:
    """delta_{1/h}( gamma(t_i)^-1 gamma(t_j) ), h = t_j - t_i (sign kept)."""
    h = times[j] - times[i]
    step = bch_coords(spec, -points[i], points[j])
    return dilate_coords(spec, step, 1.0 / h)


def _vertical_size(spec: StratificationSpec, q: np.ndarray) -> float:
    body = q.copy()
    body[..., spec.stratum_slice(1)] = 0.0
    return float(box_norm_coords(unit_norm(spec), body))


def fragment_derivative(fragment, t0: float):
    """Horizontal velocity at t0, or None for non-horizontal motion.

    Uses the nearest sampled time; the quotient with each available
    neighbor must have higher-stratum part below |h|^(1/2) after
    rescaling, else the velocity is treated as undefined.
    """
    spec = fragment.spec
    times = np.asarray(fragment.times, dtype=float)
    points = np.asarray(fragment.points, dtype=float)
    i = _locate_time(times, t0)
    sides = []
    for j in (i + 1, i - 1):
        if 0 <= j < len(times):
            q = curve_quotient(spec, times, points, i, j)
            h = abs(times[j] - times[i])
            if _vertical_size(spec, q) >= h ** 0.5:
                return None
            sides.append(q[spec.stratum_slice(1)])
    if not sides:
        raise StructureError("fragment has a single sample")
    return sum(sides) / len(sides)


def check_horizontal_differential(d_h, f: MapSampler, phi: MapSampler,
                                  fragments, tolerance: float,
                                  t0s=None) -> dict:
    """Chain-rule check D(f.gamma)(t0) = D_H( D(phi.gamma)(t0) ) per fragment.

    d_h is an n_1(H) x n_1(G) matrix acting on horizontal velocities of
    phi-composed fragments.  Fragments where either side is undefined
    are skipped; with none left the verdict is "inconclusive".
    """
    d_h = np.asarray(d_h, dtype=float)
    rows = []
    worst = 0.0
    usable = 0
    for k, frag in enumerate(fragments):
        t0 = float(frag.times[len(frag.times) // 2]) if t0s is None else float(t0s[k])
        lhs = _composed_derivative(f, frag, t0)
        rhs = _composed_derivative(phi, frag, t0)
        if lhs is None or rhs is None:
            rows.append({"fragment": k, "t0": t0, "status": "undefined"})
            continue
        defect = float(np.linalg.norm(lhs - d_h @ rhs))
        usable += 1
        worst = max(worst, defect)
        rows.append({"fragment": k, "t0": t0, "status": "defined", "defect": defect})
    if usable == 0:
        return {"status": "inconclusive", "fragments": rows}
    return {
        "status": "pass" if worst <= tolerance else "fail",
        "max_defect": worst,
        "tolerance": tolerance,
        "fragments": rows,
    }


class _Composed:
    def __init__(self, spec, times, points):
        self.spec = spec
        self.times = times
        self.points = points


def _composed_derivative(mapping: MapSampler, fragment, t0: float):
    images = mapping.evaluate(np.asarray(fragment.points, dtype=float))
    view = _Composed(mapping.target, np.asarray(fragment.times, dtype=float), images)
    return fragment_derivative(view, t0)
