"""Stratified Lie algebras given by structure constants on a graded basis."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

ZERO_TOL = 1e-12


class StructureError(ValueError):
    """Malformed structure data: bad indices, shapes, or stratum sizes."""


@dataclass(frozen=True)
class StratificationSpec:
    """Basis-level description of a stratified nilpotent Lie algebra.

    The basis is graded: the first strata_dims[0] vectors span V_1, the
    next strata_dims[1] span V_2, and so on.  structure_constants holds
    entries (i, j, k, c) with 1-based basis indices meaning the X_k
    component of [X_i, X_j] is c; entries for (j, i) are implied with
    opposite sign and need not be stored.
    """

    strata_dims: tuple[int, ...]
    structure_constants: tuple[tuple[int, int, int, float], ...] = ()
    name: str = ""

    @classmethod
    def make(cls, strata_dims, brackets=(), name: str = "") -> "StratificationSpec":
        dims = tuple(int(d) for d in strata_dims)
        if not dims or any(d < 1 for d in dims):
            raise StructureError(f"strata dims must be positive, got {dims}")
        n = sum(dims)
        canon: dict[tuple[int, int, int], float] = {}
        for entry in brackets:
            if len(entry) != 4:
                raise StructureError(f"bracket entry {entry!r} is not (i, j, k, c)")
            i, j, k, c = int(entry[0]), int(entry[1]), int(entry[2]), float(entry[3])
            for idx in (i, j, k):
                if not 1 <= idx <= n:
                    raise StructureError(f"basis index {idx} outside [1, {n}] in {entry!r}")
            if i == j:
                if c != 0.0:
                    # kept so validation reports the antisymmetry violation
                    canon[(i, j, k)] = canon.get((i, j, k), 0.0) + c
                continue
            if i > j:
                i, j, c = j, i, -c
            canon[(i, j, k)] = canon.get((i, j, k), 0.0) + c
        entries = tuple(sorted((i, j, k, c) for (i, j, k), c in canon.items() if c != 0.0))
        return cls(strata_dims=dims, structure_constants=entries, name=name)

    @property
    def n(self) -> int:
        return sum(self.strata_dims)

    @property
    def step(self) -> int:
        return len(self.strata_dims)

    @property
    def offsets(self) -> tuple[int, ...]:
        out = [0]
        for d in self.strata_dims:
            out.append(out[-1] + d)
        return tuple(out)

    def stratum_slice(self, j: int) -> slice:
        if not 1 <= j <= self.step:
            raise StructureError(f"stratum {j} outside [1, {self.step}]")
        off = self.offsets
        return slice(off[j - 1], off[j])

    def stratum_of_index(self, i: int) -> int:
        """Stratum (1-based) of basis vector X_i (1-based)."""
        if not 1 <= i <= self.n:
            raise StructureError(f"basis index {i} outside [1, {self.n}]")
        off = self.offsets
        for j in range(1, self.step + 1):
            if i <= off[j]:
                return j
        raise AssertionError

    def basis_vector(self, i: int) -> np.ndarray:
        v = np.zeros(self.n)
        v[i - 1] = 1.0
        return v


def _raw_tensor(spec: StratificationSpec) -> np.ndarray:
    """Entries exactly as stored, no antisymmetric closure."""
    n = spec.n
    t = np.zeros((n, n, n))
    for i, j, k, c in spec.structure_constants:
        for idx in (i, j, k):
            if not 1 <= idx <= n:
                raise StructureError(f"basis index {idx} outside [1, {n}]")
        t[i - 1, j - 1, k - 1] += c
    return t


@lru_cache(maxsize=None)
def structure_tensor(spec: StratificationSpec) -> np.ndarray:
    """Dense antisymmetrized tensor C with [X_i, X_j] = sum_k C[i,j,k] X_k.

    Where only one orientation of a pair is stored the other is implied;
    where both are stored the (i < j) orientation wins, so a spec that
    fails antisymmetry validation still yields a well-defined tensor.
    """
    raw = _raw_tensor(spec)
    given = np.any(raw != 0.0, axis=2)
    c = raw.copy()
    mirror = -np.swapaxes(raw, 0, 1)
    fill = ~given & np.swapaxes(given, 0, 1)
    c[fill] = mirror[fill]
    n = spec.n
    iu, ju = np.triu_indices(n, k=1)
    c[ju, iu] = -c[iu, ju]
    c[np.arange(n), np.arange(n)] = 0.0
    c.setflags(write=False)
    return c


@dataclass(frozen=True)
class AlgebraVector:
    spec: StratificationSpec
    coords: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coords, dtype=float)
        if arr.shape != (self.spec.n,):
            raise StructureError(f"coords shape {arr.shape} != ({self.spec.n},)")
        object.__setattr__(self, "coords", arr)

    def stratum(self, j: int) -> np.ndarray:
        return self.coords[self.spec.stratum_slice(j)]


def bracket_coords(spec: StratificationSpec, u, v) -> np.ndarray:
    """[u, v] on coordinate arrays of shape (..., n), broadcast together."""
    c = structure_tensor(spec)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.einsum("...i,...j,ijk->...k", u, v, c)


def bracket(u: AlgebraVector, v: AlgebraVector) -> AlgebraVector:
    if u.spec != v.spec:
        raise StructureError("bracket arguments live in different algebras")
    return AlgebraVector(u.spec, bracket_coords(u.spec, u.coords, v.coords))


def homogeneous_dimension(spec: StratificationSpec) -> int:
    return sum(j * d for j, d in enumerate(spec.strata_dims, start=1))


def project_stratum(spec: StratificationSpec, v, j: int) -> np.ndarray:
    """Projection onto V_j, returned as a full-length coordinate array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    sl = spec.stratum_slice(j)
    out[..., sl] = v[..., sl]
    return out


def validate_stratification(spec: StratificationSpec) -> list[str]:
    """Check the stratified-algebra axioms; returns [] when all hold.

    Violations are reported as strings tagged antisymmetry / grading /
    jacobi / generation.  Structural problems (indices outside [1, n],
    nonpositive strata) raise StructureError instead.
    """
    if not spec.strata_dims or any(d < 1 for d in spec.strata_dims):
        raise StructureError(f"strata dims must be positive, got {spec.strata_dims}")
    raw = _raw_tensor(spec)  # raises on malformed indices
    n, s = spec.n, spec.step
    report: list[str] = []

    diag = np.abs(raw[np.arange(n), np.arange(n)]).max() if n else 0.0
    if diag > ZERO_TOL:
        report.append(f"antisymmetry: [X_i, X_i] != 0 (max component {diag:.3g})")
    given = np.any(raw != 0.0, axis=2)
    both = given & np.swapaxes(given, 0, 1)
    np.fill_diagonal(both, False)
    if both.any():
        mism = np.abs(raw + np.swapaxes(raw, 0, 1))[both].max()
        if mism > ZERO_TOL:
            report.append(f"antisymmetry: stored (i,j) and (j,i) entries disagree by {mism:.3g}")

    c = structure_tensor(spec)
    stratum_of = np.concatenate(
        [np.full(d, j) for j, d in enumerate(spec.strata_dims, start=1)]
    )
    for i in range(n):
        for j in range(n):
            bad = np.nonzero(np.abs(c[i, j]) > ZERO_TOL)[0]
            want = stratum_of[i] + stratum_of[j]
            for k in bad:
                if want > s or stratum_of[k] != want:
                    report.append(
                        f"grading: [X_{i+1}, X_{j+1}] hits X_{k+1} "
                        f"(stratum {stratum_of[k]}, expected {want})"
                    )
    if len(report) > 8:
        report = report[:8] + ["grading: further violations suppressed"]

    nested = np.einsum("bcm,aml->abcl", c, c)
    jac = nested + nested.transpose(1, 2, 0, 3) + nested.transpose(2, 0, 1, 3)
    worst = np.abs(jac).max()
    if worst > ZERO_TOL:
        a, b, d = np.unravel_index(np.abs(jac).max(axis=3).argmax(), (n, n, n))
        report.append(f"jacobi: defect {worst:.3g} at triple ({a+1}, {b+1}, {d+1})")

    off = spec.offsets
    for j in range(1, s):
        cols = c[off[0]:off[1], off[j - 1]:off[j], off[j]:off[j + 1]]
        mat = cols.reshape(-1, spec.strata_dims[j]).T
        rank = np.linalg.matrix_rank(mat, tol=1e-10) if mat.size else 0
        if rank < spec.strata_dims[j]:
            report.append(
                f"generation: [V_1, V_{j}] spans rank {rank} < dim V_{j+1} = {spec.strata_dims[j]}"
            )
    return report


def spec_from_dict(data: dict) -> StratificationSpec:
    try:
        strata = data["strata"]
        brackets = data.get("brackets", [])
        name = data.get("name", "")
    except (TypeError, KeyError) as exc:
        raise StructureError(f"group description missing field: {exc}") from exc
    return StratificationSpec.make(strata, brackets, name=str(name))


def load_spec_file(path) -> StratificationSpec:
    with open(path) as fh:
        return spec_from_dict(json.load(fh))


def _catalog_dir():
    return resources.files("carnot_kit") / "catalog"


def list_groups() -> list[str]:
    names = []
    for item in _catalog_dir().iterdir():
        if item.name.endswith(".json") and not item.name.startswith("tile_"):
            names.append(json.loads(item.read_text())["name"])
    return sorted(names)


def load_group(name: str) -> StratificationSpec:
    for item in _catalog_dir().iterdir():
        if item.name.endswith(".json") and not item.name.startswith("tile_"):
            data = json.loads(item.read_text())
            if data.get("name") == name:
                return spec_from_dict(data)
    raise KeyError(f"unknown group {name!r}; available: {', '.join(list_groups())}")
