"""Preset media, source layouts and synthetic observations."""

from __future__ import annotations

import numpy as np

from asinv.fem import ForwardProblem, GaussianSource, HelmholtzSystem, interpolate_medium
from asinv.inversion import ObservationSet
from asinv.medium import (BackgroundPiece, Disk, Inclusion, Medium, rectangle_polygon,
                          regular_polygon, star_polygon)
from asinv.mesh import SIDES, Mesh, build_rect_mesh


def layered_medium() -> Medium:
    """Seven background pieces and eight inclusions on ``(0, 1.5) x (0, 1)``.

    The background has a bottom strip, a middle band and a top strip split
    by vertical interfaces. The inclusions are a star containing a small
    disk, a rectangle, a triangle, a disk, a square and an annulus (an outer
    disk plus a negative inner disk).
    """
    domain = (0.0, 1.5, 0.0, 1.0)
    pieces = [
        BackgroundPiece(1.0, rectangle_polygon(0.0, 0.75, 0.0, 0.1)),
        BackgroundPiece(1.4, rectangle_polygon(0.75, 1.5, 0.0, 0.1)),
        BackgroundPiece(1.8, rectangle_polygon(0.0, 0.75, 0.1, 0.9)),
        BackgroundPiece(2.2, rectangle_polygon(0.75, 1.5, 0.1, 0.9)),
        BackgroundPiece(1.2, rectangle_polygon(0.0, 0.5, 0.9, 1.0)),
        BackgroundPiece(1.6, rectangle_polygon(0.5, 1.0, 0.9, 1.0)),
        BackgroundPiece(2.0, rectangle_polygon(1.0, 1.5, 0.9, 1.0)),
    ]
    inclusions = [
        Inclusion(1.0, star_polygon((0.33, 0.5), 0.2, 0.11)),
        Inclusion(-0.6, rectangle_polygon(0.07, 0.2, 0.72, 0.82)),
        Inclusion(0.8, _triangle((0.5, 0.18), (0.66, 0.18), (0.58, 0.31))),
        Inclusion(1.2, Disk((0.95, 0.65), 0.1)),
        Inclusion(-0.7, rectangle_polygon(1.15, 1.35, 0.55, 0.75)),
        Inclusion(0.9, Disk((1.2, 0.3), 0.13)),
        Inclusion(0.6, Disk((0.33, 0.5), 0.045)),
        Inclusion(-0.9, Disk((1.2, 0.3), 0.055)),
    ]
    return Medium(domain, pieces, inclusions)


def _triangle(a, b, c):
    from asinv.medium import Polygon

    return Polygon(np.array([a, b, c], dtype=float))


def five_inclusion_medium() -> Medium:
    """``2 + 1.4 chi_1 + 1.1 chi_2 + 1.3 chi_3 + 1.5 chi_4 + 1.2 chi_5`` on the unit square."""
    inclusions = [
        Inclusion(1.4, Disk((0.3, 0.7), 0.12)),
        Inclusion(1.1, rectangle_polygon(0.6, 0.8, 0.6, 0.8)),
        Inclusion(1.3, _triangle((0.18, 0.18), (0.42, 0.18), (0.3, 0.38))),
        Inclusion(1.5, regular_polygon((0.7, 0.3), 0.12, 5, rotation=np.pi / 2)),
        Inclusion(1.2, rectangle_polygon(0.44, 0.56, 0.44, 0.56)),
    ]
    return Medium.constant((0.0, 1.0, 0.0, 1.0), 2.0, inclusions)


def disk_medium(radius: float = 0.25, value: float = 1.0, background: float = 1.0) -> Medium:
    return Medium.constant((0.0, 1.0, 0.0, 1.0), background,
                           [Inclusion(value, Disk((0.5, 0.5), radius))])


def square_medium(side: float = 0.4, value: float = 1.0, background: float = 1.0) -> Medium:
    lo, hi = 0.5 - side / 2, 0.5 + side / 2
    return Medium.constant((0.0, 1.0, 0.0, 1.0), background,
                           [Inclusion(value, rectangle_polygon(lo, hi, lo, hi))])


def star_medium(n_inclusions: int = 1) -> Medium:
    """One to three star inclusions on a unit square (unit background)."""
    layouts = {
        1: [((0.5, 0.5), 1.0)],
        3: [((0.27, 0.27), 1.0), ((0.73, 0.3), 0.7), ((0.5, 0.73), 1.3)],
    }
    if n_inclusions not in layouts:
        raise ValueError("star_medium supports 1 or 3 inclusions")
    r_out = 0.3 if n_inclusions == 1 else 0.17
    incs = [Inclusion(v, star_polygon(c, r_out, 0.45 * r_out)) for c, v in layouts[n_inclusions]]
    return Medium.constant((0.0, 1.0, 0.0, 1.0), 1.0, incs)


MEDIA = {
    "layered": layered_medium,
    "five_inclusion": five_inclusion_medium,
    "disk": disk_medium,
    "square": square_medium,
    "star1": lambda: star_medium(1),
    "star3": lambda: star_medium(3),
    "constant": lambda: Medium.constant((0.0, 1.0, 0.0, 1.0), 1.0),
}


def perimeter_sources(domain, width: float, amplitude: float = 1.0) -> list[GaussianSource]:
    """Eight sources, two near each side, at 10 % inset."""
    x0, x1, y0, y1 = domain
    W, H = x1 - x0, y1 - y0
    rel = [(0.1, 0.3), (0.1, 0.7), (0.9, 0.3), (0.9, 0.7),
           (0.3, 0.1), (0.7, 0.1), (0.3, 0.9), (0.7, 0.9)]
    return [GaussianSource((x0 + a * W, y0 + b * H), width, amplitude) for a, b in rel]


def generate_observations(truth: Medium, mesh: Mesh, frequency: float, sources, noise: float = 0.0,
                          rng: np.random.Generator | None = None, refine: int = 1,
                          tags=SIDES, sound_hard=()) -> ObservationSet:
    """Boundary data for ``truth`` computed on a finer mesh and restricted to ``mesh``.

    The fine mesh subdivides ``mesh`` ``refine`` more times, so the boundary
    nodes of ``mesh`` are fine-mesh nodes. Complex white noise is scaled per
    source so that its L2 norm on the observation boundary is exactly
    ``noise`` times that of the data.
    """
    if noise < 0:
        raise ValueError("noise level must be nonnegative")
    if noise > 0 and rng is None:
        raise ValueError("a random generator is required when noise > 0")
    nx, ny = mesh.shape
    fine = build_rect_mesh(mesh.domain, nx, ny, refine=refine)
    problem = ForwardProblem(fine, frequency, sources, observe=tuple(tags),
                             sound_hard=tuple(sound_hard))
    u = interpolate_medium(truth, fine).values
    Y = HelmholtzSystem(problem, u).solve_all()
    nodes = mesh.nodes_with_tags(tags)
    pts = mesh.vertices[nodes]
    data = np.column_stack([fine.evaluate(Y[:, l], pts) for l in range(Y.shape[1])])
    if noise > 0:
        from asinv.fem import assemble_boundary_mass

        MG = assemble_boundary_mass(mesh, tags).tocsr()[nodes][:, nodes]
        for l in range(data.shape[1]):
            eta = rng.standard_normal(len(nodes)) + 1j * rng.standard_normal(len(nodes))
            ny_ = np.sqrt(np.real(np.vdot(data[:, l], MG @ data[:, l])))
            ne_ = np.sqrt(np.real(np.vdot(eta, MG @ eta)))
            data[:, l] = data[:, l] + noise * ny_ / ne_ * eta
    return ObservationSet(nodes, data, frequency, noise, tuple(tags))


def relative_noise(obs: ObservationSet, clean: ObservationSet, mesh: Mesh) -> np.ndarray:
    from asinv.fem import assemble_boundary_mass

    MG = assemble_boundary_mass(mesh, obs.tags).tocsr()[obs.nodes][:, obs.nodes]
    d = obs.data - clean.data
    num = np.sqrt(np.real(np.einsum("ij,ij->j", np.conj(d), MG @ d)))
    den = np.sqrt(np.real(np.einsum("ij,ij->j", np.conj(clean.data), MG @ clean.data)))
    return num / den
