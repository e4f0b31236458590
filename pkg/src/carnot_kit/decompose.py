"""Words of horizontal flows: building F, inverting it, refining cone covers.

A decomposition word spells a group element as a product of dilated
horizontal basis letters.  The forward map F fixes an index pattern and
an anchor; inversion is damped Newton on the pattern scalars, batched
over targets, with the anchor pinning the solution branch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .algebra import StratificationSpec, StructureError
from .fragments import Cone, in_cone
from .group import (
    _dilation_matrix,
    bch_coords,
    box_norm_coords,
    dilate_coords,
    sample_unit_sphere_coords,
    unit_norm,
)


class DecompositionError(RuntimeError):
    """Solve or search failure; .best carries the last iterate if any."""

    def __init__(self, message: str, best=None, residual: float | None = None):
        super().__init__(message)
        self.best = best
        self.residual = residual


def horizontal_basis(spec: StratificationSpec, basis=None) -> np.ndarray:
    n1 = spec.strata_dims[0]
    if basis is None:
        return np.eye(n1)
    b = np.asarray(basis, dtype=float)
    if b.shape != (n1, n1):
        raise StructureError(f"basis must be {n1} x {n1}")
    if np.linalg.matrix_rank(b, tol=1e-10) < n1:
        raise StructureError("basis does not span the first stratum")
    norms = np.linalg.norm(b, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise StructureError("basis letters must be unit vectors")
    return b


def word_product(spec: StratificationSpec, basis: np.ndarray, indices,
                 scalars: np.ndarray) -> np.ndarray:
    """Left-to-right product of dilated letters; scalars may be batched."""
    scalars = np.asarray(scalars, dtype=float)
    letters = np.zeros((len(indices), spec.n))
    for k, idx in enumerate(indices):
        letters[k, spec.stratum_slice(1)] = basis[idx - 1]
    out = np.zeros(scalars.shape[:-1] + (spec.n,))
    for k in range(len(indices)):
        step = scalars[..., k, None] * letters[k]
        out = bch_coords(spec, out, step)
    return out


@dataclass(frozen=True)
class DecompositionWord:
    """Ordered letters (basis index, scalar) with a bound certificate."""

    entries: tuple
    basis: tuple
    residual: float
    certificate: dict = field(compare=False)

    @property
    def scalars(self) -> np.ndarray:
        return np.array([s for _, s in self.entries])

    @property
    def indices(self) -> tuple:
        return tuple(i for i, _ in self.entries)

    @property
    def max_scalar(self) -> float:
        return float(np.abs(self.scalars).max()) if self.entries else 0.0

    def to_json(self) -> str:
        return json.dumps({
            "basis": [list(row) for row in self.basis],
            "pattern": list(self.indices),
            "scalars": [float(s) for s in self.scalars],
            "certificate": self.certificate,
        })

    @classmethod
    def from_json(cls, text: str) -> "DecompositionWord":
        data = json.loads(text)
        entries = tuple(zip(data["pattern"], data["scalars"]))
        cert = dict(data["certificate"])
        return cls(entries=entries,
                   basis=tuple(tuple(r) for r in data["basis"]),
                   residual=float(cert.get("residual", np.nan)),
                   certificate=cert)


def evaluate_word(spec: StratificationSpec, word: DecompositionWord) -> np.ndarray:
    basis = np.asarray(word.basis, dtype=float)
    return word_product(spec, basis, word.indices, word.scalars)


def build_F(spec: StratificationSpec, basis, anchor, pattern):
    """Evaluator s -> G(s) G(anchor)^{-1}; the anchor itself maps to 0."""
    basis = horizontal_basis(spec, basis)
    anchor = np.asarray(anchor, dtype=float)
    pattern = tuple(int(i) for i in pattern)
    n1 = spec.strata_dims[0]
    if len(anchor) != len(pattern):
        raise StructureError("anchor and pattern lengths differ")
    if any(not 1 <= i <= n1 for i in pattern):
        raise StructureError("pattern indices must lie in [1, n1]")
    tail = -word_product(spec, basis, pattern, anchor)

    def F(s):
        s = np.asarray(s, dtype=float)
        out = bch_coords(spec, word_product(spec, basis, pattern, s), tail)
        hit = np.all(s == anchor, axis=-1)
        if np.any(hit):
            if out.ndim > 1:
                out = np.where(np.expand_dims(hit, -1), 0.0, out)
            else:
                out = np.zeros_like(out)
        return out

    return F


def fd_jacobian(F, s: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, batched over leading axes of s."""
    s = np.asarray(s, dtype=float)
    cols = []
    for j in range(s.shape[-1]):
        dp = s.copy()
        dm = s.copy()
        dp[..., j] += h
        dm[..., j] -= h
        cols.append((F(dp) - F(dm)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def _newton_batch(F, s0: np.ndarray, targets: np.ndarray, iters: int = 40,
                  tol: float = 1e-13):
    """Damped Newton on each row; returns (s, residual, converged)."""
    s = np.array(s0, dtype=float)
    res = np.abs(F(s) - targets).max(axis=-1)
    for _ in range(iters):
        active = res > tol
        if not active.any():
            break
        jac = fd_jacobian(F, s)
        try:
            step = np.linalg.solve(jac, (F(s) - targets)[..., None])[..., 0]
        except np.linalg.LinAlgError:
            pinv = np.linalg.pinv(jac)
            step = np.einsum("...ij,...j->...i", pinv, F(s) - targets)
        lam = np.ones(res.shape)
        improved = ~active
        cand = s
        for _ in range(25):
            trial = s - lam[..., None] * step
            trial_res = np.abs(F(trial) - targets).max(axis=-1)
            better = trial_res < res
            cand = np.where((better & ~improved)[..., None], trial, cand)
            res = np.where(better & ~improved, trial_res, res)
            improved = improved | better
            if improved.all():
                break
            lam = np.where(improved, lam, lam * 0.5)
        if not improved.any():
            break
        s = cand
    final = np.abs(F(s) - targets).max(axis=-1)
    return s, final, final <= tol


@dataclass(frozen=True)
class AnchorCertificate:
    """A pattern and anchor where F is invertible, with a certified radius."""

    pattern: tuple
    anchor: tuple
    zeta: float
    cond: float
    seed: int


def _candidate_patterns(spec: StratificationSpec, budget: int, rng):
    n1 = spec.strata_dims[0]
    n = spec.n
    base = tuple((k % n1) + 1 for k in range(n))
    seen = {base}
    yield base
    rev = tuple(reversed(base))
    if rev not in seen:
        seen.add(rev)
        yield rev
    while len(seen) < budget:
        cand = tuple(rng.integers(1, n1 + 1, size=n).tolist())
        if len(set(cand)) == n1 and cand not in seen:
            seen.add(cand)
            yield cand


def select_anchor(spec: StratificationSpec, basis=None,
                  pattern_search_budget: int = 24, seed: int = 0,
                  patterns=None, sphere_targets: int = 32) -> AnchorCertificate:
    """Search for a nonsingular (pattern, anchor) and certify a radius zeta.

    Certification is empirical: undamped-start Newton from the anchor
    must converge for every target on a zeta-sphere sample; the ladder
    descends until a zeta passes.
    """
    rng = np.random.default_rng(seed)
    basis_arr = horizontal_basis(spec, basis)
    norm = unit_norm(spec)
    ladder = (0.5, 0.25, 0.1, 0.05, 0.02, 0.01)
    if patterns is None:
        pattern_iter = _candidate_patterns(spec, max(2, pattern_search_budget // 3), rng)
    else:
        pattern_iter = iter([tuple(p) for p in patterns])
    tried = 0
    best: AnchorCertificate | None = None
    for pattern in pattern_iter:
        for _ in range(3):
            if tried >= pattern_search_budget:
                break
            tried += 1
            anchor = rng.uniform(0.05, 0.95, size=spec.n)
            F = build_F(spec, basis_arr, anchor, pattern)
            jac = fd_jacobian(F, anchor)
            svals = np.linalg.svd(jac, compute_uv=False)
            if svals[-1] <= 0 or svals[0] / svals[-1] >= 1e6:
                continue
            cond = float(svals[0] / svals[-1])
            sphere = sample_unit_sphere_coords(spec, norm, rng, sphere_targets)
            for zeta in ladder:
                if best is not None and zeta <= best.zeta:
                    break
                targets = dilate_coords(spec, sphere, zeta)
                s0 = np.broadcast_to(anchor, (sphere_targets, spec.n))
                _, _, ok = _newton_batch(F, s0, targets)
                if ok.all():
                    best = AnchorCertificate(pattern=tuple(pattern),
                                             anchor=tuple(anchor),
                                             zeta=float(zeta), cond=cond,
                                             seed=seed)
                    break
        if best is not None and best.zeta >= 0.25:
            break
    if best is None:
        raise DecompositionError(
            f"anchor search budget ({pattern_search_budget}) exhausted "
            "without a certified pattern")
    return best


@lru_cache(maxsize=32)
def _cached_anchor(spec: StratificationSpec, basis_key, seed: int) -> AnchorCertificate:
    basis = np.asarray(basis_key, dtype=float) if basis_key is not None else None
    return select_anchor(spec, basis=basis, seed=seed)


def decompose(spec: StratificationSpec, v, basis=None,
              anchor: AnchorCertificate | None = None, norm=None,
              seed: int = 0, restarts: int = 8) -> DecompositionWord:
    """Invert F for one target; word length is exactly 2 n."""
    word = batch_decompose(spec, np.asarray(v, dtype=float)[None, :], basis=basis,
                           anchor=anchor, norm=norm, seed=seed, restarts=restarts)
    return word[0]


def batch_decompose(spec: StratificationSpec, targets, basis=None,
                    anchor: AnchorCertificate | None = None, norm=None,
                    seed: int = 0, restarts: int = 8) -> list:
    """Decompose each row; Newton runs on the whole batch at once.

    Targets are first normalized to the unit sphere by dilation; solved
    scalars are rescaled by homogeneity of each letter, so one anchor
    branch serves every magnitude.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2 or targets.shape[1] != spec.n:
        raise StructureError(f"targets must be (batch, {spec.n})")
    basis_arr = horizontal_basis(spec, basis)
    if anchor is None:
        key = None if basis is None else tuple(map(tuple, basis_arr))
        anchor = _cached_anchor(spec, key, 0)
    if norm is None:
        norm = unit_norm(spec)
    pattern = anchor.pattern
    s_hat = np.asarray(anchor.anchor)
    F = build_F(spec, basis_arr, s_hat, pattern)
    rng = np.random.default_rng(seed)

    radii = box_norm_coords(norm, targets)
    radii = np.atleast_1d(radii)
    # solve inside the certified ball: targets live on the zeta-sphere
    scale = np.where(radii > 0, radii / anchor.zeta, 1.0)
    normalized = targets / _dilation_matrix(spec, scale)

    s = np.broadcast_to(s_hat, targets.shape).copy()
    s, res, ok = _newton_batch(F, s, normalized)
    # the certificate samples finitely many directions, so stray targets
    # can sit outside the zeta basin; renormalizing a failing row onto a
    # smaller sphere widens the anchor's basin around F(s_hat) = 0
    for level in range(1, 4):
        if ok.all():
            break
        todo = np.nonzero(~ok)[0]
        zeta = anchor.zeta * 2.0 ** -level
        scale[todo] = np.where(radii[todo] > 0, radii[todo] / zeta, 1.0)
        sub = targets[todo] / _dilation_matrix(spec, scale[todo])
        s2, res2, ok2 = _newton_batch(
            F, np.broadcast_to(s_hat, sub.shape).copy(), sub)
        s[todo], res[todo], ok[todo] = s2, res2, ok2
    for _ in range(restarts):
        if ok.all():
            break
        todo = np.nonzero(~ok)[0]
        sub = targets[todo] / _dilation_matrix(spec, scale[todo])
        fresh = rng.uniform(0.0, 1.0, size=sub.shape)
        s2, res2, ok2 = _newton_batch(F, fresh, sub)
        take = np.nonzero(ok2)[0]
        rows = todo[take]
        s[rows], res[rows], ok[rows] = s2[take], res2[take], True

    # polish at full scale: the normalized solve leaves O(lam^step eps)
    # coordinate error after rescaling, a few Newton steps remove it
    live = radii > 0
    if live.any():
        if not ok[live].all():
            bad = int(np.nonzero(live & ~ok)[0][0])
            raise DecompositionError("Newton failed after restarts",
                                     best=s[bad], residual=float(res[bad]))
        scaled = scale[live, None] * s[live]
        tails = -word_product(spec, basis_arr, pattern,
                              scale[live, None] * s_hat[None, :])

        def full(sv):
            return bch_coords(spec, word_product(spec, basis_arr, pattern, sv), tails)

        tol_rows = 1e-12 * np.maximum(1.0, np.abs(targets[live]).max(axis=1))
        polished, _, _ = _newton_batch(full, scaled, targets[live],
                                       iters=6, tol=float(tol_rows.min()))
        s_full = np.zeros_like(s)
        s_full[live] = polished

    words = []
    for b in range(len(targets)):
        r = float(radii[b])
        lam = float(scale[b])
        if r == 0.0:
            scal = np.zeros(2 * spec.n)
        else:
            scal = np.concatenate([s_full[b], -lam * s_hat[::-1]])
        idx = pattern + tuple(reversed(pattern))
        entries = tuple(zip(idx, scal.tolist()))
        word = DecompositionWord(
            entries=entries,
            basis=tuple(map(tuple, basis_arr)),
            residual=0.0,
            certificate={},
        )
        recon = evaluate_word(spec, word)
        resid = float(np.abs(recon - targets[b]).max())
        tol_final = 1e-8 * max(1.0, r)
        if resid > tol_final:
            raise DecompositionError("reconstruction above tolerance",
                                     best=word, residual=resid)
        cert = {
            "norm": r,
            "max_scalar": float(np.abs(scal).max()),
            "ratio": float(np.abs(scal).max() / r) if r > 0 else 0.0,
            "residual": resid,
            "anchor_zeta": anchor.zeta,
            "anchor_cond": anchor.cond,
        }
        words.append(DecompositionWord(entries=entries,
                                       basis=tuple(map(tuple, basis_arr)),
                                       residual=resid, certificate=cert))
    return words



def empirical_c0(spec: StratificationSpec, count: int = 1000, seed: int = 0,
                 basis=None, anchors: int = 4) -> dict:
    """Certificate ratio statistics over unit-norm targets.

    The constant bounds the smallest admissible word per target, so each
    ratio is minimized over several anchor branches; a single branch can
    land on a far solution sheet for stray directions and inflate the
    max by orders of magnitude.
    """
    norm = unit_norm(spec)
    rng = np.random.default_rng(seed)
    targets = sample_unit_sphere_coords(spec, norm, rng, count)
    basis_key = None
    if basis is not None:
        basis_key = tuple(map(tuple, horizontal_basis(spec, basis)))
    ratios = None
    max_residual = 0.0
    for k in range(max(1, anchors)):
        anchor = _cached_anchor(spec, basis_key, k)
        words = batch_decompose(spec, targets, basis=basis, anchor=anchor,
                                seed=seed)
        r = np.array([w.certificate["ratio"] for w in words])
        ratios = r if ratios is None else np.minimum(ratios, r)
        max_residual = max(max_residual,
                           float(max(w.residual for w in words)))
    return {
        "count": count,
        "c0_max": float(ratios.max()),
        "c0_mean": float(ratios.mean()),
        "max_residual": max_residual,
        "seed": seed,
        "anchors": int(max(1, anchors)),
    }


# ------------------------------------------------------------ cone cover


def _cap_samples(cone: Cone, count: int, rng) -> np.ndarray:
    """Unit vectors of the cone, axis and boundary included."""
    d = len(cone.axis)
    phi_max = float(np.arccos(np.clip(1.0 - cone.sigma ** 2, -1.0, 1.0)))
    out = [cone.axis]
    if d == 1 or phi_max == 0.0:
        return np.asarray(out)
    raw = rng.normal(size=(count, d))
    raw -= np.outer(raw @ cone.axis, cone.axis)
    mags = np.linalg.norm(raw, axis=1)
    tang = raw[mags > 1e-12] / mags[mags > 1e-12, None]
    phis = rng.uniform(0.0, 1.0, size=len(tang)) ** (1.0 / max(d - 1, 1)) * phi_max
    # force some exact boundary points into the sample
    phis[: max(1, len(phis) // 8)] = phi_max
    return np.concatenate([np.asarray(out),
                           np.cos(phis)[:, None] * cone.axis + np.sin(phis)[:, None] * tang])


def refine_cone_cover(cones, ell: int, samples: int = 4096, seed: int = 0):
    """Cover each parent cone by cones of opening 1/ell, axes inside the parent.

    Greedy: grow the axis list from uncovered cap samples until a fresh
    dense sample lies strictly inside the union; per-parent lists are
    returned in parent order, each starting with the parent axis.
    """
    ell = int(ell)
    if ell < 1:
        raise StructureError("ell must be a positive integer")
    alpha = 1.0 / ell
    rng = np.random.default_rng(seed)
    slope = 1.0 - alpha ** 2
    covers = []
    for parent in cones:
        pts = _cap_samples(parent, samples, rng)
        axes = [parent.axis]
        for _ in range(64):
            mat = np.asarray(axes)
            inner = pts @ mat.T > slope
            uncovered = ~inner.any(axis=1)
            if not uncovered.any():
                fresh = _cap_samples(parent, samples, rng)
                miss = ~(fresh @ mat.T > slope).any(axis=1)
                if not miss.any():
                    break
                pts = np.concatenate([pts, fresh[miss]])
                continue
            axes.append(pts[np.nonzero(uncovered)[0][0]])
        covers.append([Cone(np.asarray(a, dtype=float), alpha) for a in axes])
    return covers
