"""Matplotlib renderings of nodal fields, eigenfunctions and iteration histories."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402

from asinv.mesh import Mesh  # noqa: E402


def _triangulation(mesh: Mesh) -> mtri.Triangulation:
    return mtri.Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles)


def plot_field(mesh: Mesh, values, path, title: str = "", cmap: str = "viridis",
               vmin=None, vmax=None) -> Path:
    """Filled contour plot of a real nodal field saved as PNG."""
    fig, ax = plt.subplots(figsize=(5, 5 * mesh.domain.height / mesh.domain.width + 0.3))
    tc = ax.tripcolor(_triangulation(mesh), np.real(values), shading="gouraud", cmap=cmap,
                      vmin=vmin, vmax=vmax)
    fig.colorbar(tc, ax=ax, shrink=0.85)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_fields(mesh: Mesh, fields: dict, path, ncols: int = 4, cmap: str = "viridis") -> Path:
    """Grid of nodal fields (``{title: values}``) in one PNG."""
    n = len(fields)
    ncols = min(ncols, n)
    nrows = -(-n // ncols)
    aspect = mesh.domain.height / mesh.domain.width
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 3.2 * aspect * nrows + 0.4),
                             squeeze=False)
    tri = _triangulation(mesh)
    for ax, (title, vals) in zip(axes.flat, fields.items()):
        ax.tripcolor(tri, np.real(vals), shading="gouraud", cmap=cmap)
        ax.set_aspect("equal")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    for ax in axes.flat[n:]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_history(history: list[dict], path) -> Path:
    """Misfit, dimension and (if known) error against the iteration number."""
    it = [r["iteration"] for r in history]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].semilogy(it, [r["misfit"] for r in history], "o-")
    axes[0].set_title("misfit")
    axes[1].plot(it, [r["J_m"] for r in history], "s-")
    axes[1].set_title("search-space dimension")
    err = [r["rel_L2_error"] for r in history]
    if np.all(np.isnan(err)):
        axes[2].semilogy(it, [r["update_norm"] for r in history], "^-")
        axes[2].set_title("update norm")
    else:
        axes[2].plot(it, err, "^-")
        axes[2].set_title("relative L2 error")
    for ax in axes:
        ax.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
