"""Structured triangular meshes of rectangular domains."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

SIDES = ("bottom", "right", "top", "left")


class Rectangle(NamedTuple):
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        p = np.atleast_2d(points)
        return ((p[:, 0] >= self.xmin - tol) & (p[:, 0] <= self.xmax + tol)
                & (p[:, 1] >= self.ymin - tol) & (p[:, 1] <= self.ymax + tol))


def as_rectangle(domain) -> Rectangle:
    if isinstance(domain, Rectangle):
        return domain
    return Rectangle(*(float(v) for v in domain))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with per-side boundary tags.

    ``boundary_edges`` is an ``(ne, 2)`` array of vertex indices and
    ``boundary_tags`` the matching side names. Triangles are counter-clockwise.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    domain: Rectangle
    shape: tuple[int, int] = field(default=(0, 0))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Gradients of the three hat functions on each triangle, ``(nt, 3, 2)``."""
        p = self.vertices[self.triangles]
        two_area = 2.0 * self.areas
        # grad lambda_i = rot90(p_{i+2} - p_{i+1}) / (2|T|)
        g = np.empty((self.n_triangles, 3, 2))
        for i in range(3):
            a = p[:, (i + 1) % 3]
            b = p[:, (i + 2) % 3]
            g[:, i, 0] = (a[:, 1] - b[:, 1]) / two_area
            g[:, i, 1] = (b[:, 0] - a[:, 0]) / two_area
        return g

    @cached_property
    def h_max(self) -> float:
        p = self.vertices[self.triangles]
        lengths = [np.linalg.norm(p[:, (i + 1) % 3] - p[:, i], axis=1) for i in range(3)]
        return float(np.max(lengths))

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.vertices[self.boundary_edges]
        return np.linalg.norm(e[:, 1] - e[:, 0], axis=1)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        return mask

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    def edges_with_tags(self, tags=None) -> np.ndarray:
        """Indices of boundary edges carrying any of ``tags`` (all if None)."""
        if tags is None:
            return np.arange(len(self.boundary_edges))
        tags = [tags] if isinstance(tags, str) else list(tags)
        unknown = set(tags) - set(SIDES)
        if unknown:
            raise ValueError(f"unknown boundary tags {sorted(unknown)}")
        return np.flatnonzero(np.isin(self.boundary_tags, tags))

    def nodes_with_tags(self, tags=None) -> np.ndarray:
        return np.unique(self.boundary_edges[self.edges_with_tags(tags)].ravel())

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Triangle index and barycentric coordinates for each point.

        Uses the structured layout; points are clipped into the domain.
        """
        nx, ny = self.shape
        x0, x1, y0, y1 = self.domain
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        sx = (pts[:, 0] - x0) / (x1 - x0) * nx
        sy = (pts[:, 1] - y0) / (y1 - y0) * ny
        i = np.clip(np.floor(sx).astype(int), 0, nx - 1)
        j = np.clip(np.floor(sy).astype(int), 0, ny - 1)
        fx = np.clip(sx - i, 0.0, 1.0)
        fy = np.clip(sy - j, 0.0, 1.0)
        cell = j * nx + i
        even = (i + j) % 2 == 0
        # triangle ordering per cell follows build_rect_mesh
        second = np.where(even, fy > fx, fx + fy > 1.0)
        tri = 2 * cell + second.astype(int)
        bary = self.barycentric(tri, pts)
        return tri, bary

    def barycentric(self, tri: np.ndarray, points: np.ndarray) -> np.ndarray:
        p = self.vertices[self.triangles[tri]]
        g = self.basis_gradients[tri]
        l1 = np.einsum("nk,nk->n", g[:, 1], points - p[:, 0])
        l2 = np.einsum("nk,nk->n", g[:, 2], points - p[:, 0])
        return np.column_stack([1.0 - l1 - l2, l1, l2])

    def evaluate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluate a P1 nodal field at arbitrary points of the domain."""
        tri, bary = self.locate(points)
        return np.einsum("nk,nk->n", np.asarray(values)[self.triangles[tri]], bary)


def build_rect_mesh(domain, nx: int, ny: int, refine: int = 0) -> Mesh:
    """Triangulate ``domain`` with ``(nx 2^refine) x (ny 2^refine)`` cells.

    Each cell is split along one diagonal; the diagonal direction alternates
    in a checkerboard pattern, which keeps the mesh symmetric under the
    reflections of the rectangle.
    """
    domain = as_rectangle(domain)
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")
    if refine < 0:
        raise ValueError("refine must be nonnegative")
    if not (domain.width > 0 and domain.height > 0):
        raise ValueError(f"zero-size domain {tuple(domain)}")
    nx *= 2 ** refine
    ny *= 2 ** refine

    xs = np.linspace(domain.xmin, domain.xmax, nx + 1)
    ys = np.linspace(domain.ymin, domain.ymax, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    I = I.ravel()
    J = J.ravel()
    v00, v10, v01, v11 = vid(I, J), vid(I + 1, J), vid(I, J + 1), vid(I + 1, J + 1)
    even = (I + J) % 2 == 0
    t_first = np.where(even[:, None],
                       np.column_stack([v00, v10, v11]),
                       np.column_stack([v00, v10, v01]))
    t_second = np.where(even[:, None],
                        np.column_stack([v00, v11, v01]),
                        np.column_stack([v10, v11, v01]))
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = t_first
    triangles[1::2] = t_second

    edges, tags = [], []
    i = np.arange(nx)
    j = np.arange(ny)
    for side, e in (
        ("bottom", np.column_stack([vid(i, 0), vid(i + 1, 0)])),
        ("right", np.column_stack([vid(nx, j), vid(nx, j + 1)])),
        ("top", np.column_stack([vid(i + 1, ny), vid(i, ny)])),
        ("left", np.column_stack([vid(0, j + 1), vid(0, j)])),
    ):
        edges.append(e)
        tags.extend([side] * len(e))
    return Mesh(
        vertices=vertices,
        triangles=triangles,
        boundary_edges=np.vstack(edges),
        boundary_tags=np.array(tags),
        domain=domain,
        shape=(nx, ny),
    )
