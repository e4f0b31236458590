"""Figure emission: tile projections, residual and overlap curves,
fragment traces, density profiles. SVG output is deterministic."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "carnot-kit"

# Date stripped so rerunning a config reproduces the file byte for byte
_SVG_KW = {"format": "svg", "metadata": {"Date": None}}


def _save(fig, path) -> str:
    fig.savefig(path, **_SVG_KW)
    plt.close(fig)
    return str(path)


def tile_projection_svg(tile, depth: int, path, axes=(0, 1)) -> str:
    """Scatter of the depth-d cloud, one color per first-level subcube."""
    from .group import bch_coords, dilate_coords

    spec = tile.spec
    sub = tile.cloud(depth - 1) if depth >= 1 else np.zeros((1, spec.n))
    fig, ax = plt.subplots(figsize=(5.4, 5.0))
    cmap = plt.get_cmap("tab20")
    flat = spec.n == 1
    for j, center in enumerate(tile.centers):
        pts = bch_coords(spec, center,
                         dilate_coords(spec, sub, tile.ratio))
        pts = np.atleast_2d(pts)
        ys = np.full(len(pts), 0.1 * j) if flat else pts[:, axes[1]]
        ax.scatter(pts[:, axes[0]], ys, s=2.0,
                   color=cmap(j % 20), linewidths=0,
                   label=f"branch {j}" if len(tile.centers) <= 8 else None)
    ax.set_xlabel(f"coordinate {axes[0]}")
    ax.set_ylabel("branch offset" if flat else f"coordinate {axes[1]}")
    ax.set_title(f"{tile.name or 'tile'} depth {depth}")
    ax.set_aspect("equal", adjustable="datalim")
    if len(tile.centers) <= 8:
        ax.legend(loc="upper right", fontsize=7)
    return _save(fig, path)


def overlap_curve_svg(rows, path) -> str:
    """rows: (depth, fraction) pairs."""
    rows = [(int(d), float(f)) for d, f in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    depths = [d for d, _ in rows]
    fracs = [max(f, 1e-12) for _, f in rows]
    ax.semilogy(depths, fracs, marker="o")
    ax.set_xlabel("depth")
    ax.set_ylabel("overlap fraction")
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def residual_curve_svg(curves, path, title="Pansu residuals") -> str:
    """curves: mapping name -> (scales, residuals)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for name, (scales, residuals) in curves.items():
        r = np.maximum(np.asarray(residuals, dtype=float), 1e-18)
        ax.loglog(scales, r, marker="o", markersize=3, label=name)
    ax.set_xlabel("scale t")
    ax.set_ylabel("max residual")
    ax.set_title(title)
    ax.legend(fontsize=7)
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def fragment_svg(fragment, path, axes=(0, 1)) -> str:
    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    pts = fragment.points
    ax.plot(pts[:, axes[0]], pts[:, axes[1]], lw=0.7)
    ax.set_xlabel(f"coordinate {axes[0]}")
    ax.set_ylabel(f"coordinate {axes[1]}")
    ax.set_title("fragment projection")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def density_profile_svg(profiles, path, Q: float) -> str:
    """profiles: mapping name -> (radii, thetas)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for name, (radii, thetas) in profiles.items():
        ax.loglog(radii, np.maximum(np.asarray(thetas, dtype=float), 1e-18),
                  marker="o", markersize=3, label=name)
    ax.set_xlabel("radius r")
    ax.set_ylabel(f"mass(B(x,r)) / r^{Q:g}")
    ax.legend(fontsize=7)
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)
