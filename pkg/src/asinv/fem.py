"""P1 finite elements: assembly, interpolation and the Helmholtz forward solver.

The forward problem is

    -div(u grad y) - omega^2 y = f             in the domain,
    dy/dn - i omega u^{-1/2} y = g             on the impedance boundary,

and its Galerkin form (multiplying the boundary condition by ``u``) reads

    (u grad y, grad v) - omega^2 (y, v) - i omega <sqrt(u) y, v> = (f, v) + <u g, v>.

The medium ``u`` is a nodal P1 field; inside the stiffness form it enters
through its element mean (exact for P1 times constant gradients) and on the
boundary through the mean over each edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from asinv.linalg import Factorization, factorize
from asinv.mesh import SIDES, Mesh
from asinv.medium import Medium


class NonpositiveMediumError(ValueError):
    """The medium has a node with value <= 0; carries the offending minimum."""

    def __init__(self, min_value: float):
        super().__init__(f"medium must be positive, minimum nodal value is {min_value:.6g}")
        self.min_value = float(min_value)


@dataclass(eq=False)
class FEField:
    """Nodal values of a P1 field; ``space`` is ``"full"`` or ``"h10"``."""

    mesh: Mesh
    values: np.ndarray
    space: str = "full"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        expected = self.mesh.n_vertices if self.space == "full" else len(self.mesh.interior_nodes)
        if self.values.shape != (expected,):
            raise ValueError(f"{self.space} field needs {expected} values, got {self.values.shape}")

    def full(self) -> np.ndarray:
        if self.space == "full":
            return self.values
        out = np.zeros(self.mesh.n_vertices, dtype=self.values.dtype)
        out[self.mesh.interior_nodes] = self.values
        return out


# ---------------------------------------------------------------------------
# interpolation

def interpolate_medium(medium: Medium, mesh: Mesh) -> FEField:
    """Lagrange interpolant of a piecewise-constant medium (closed sets win)."""
    _check_same_domain(medium, mesh)
    return FEField(mesh, medium.evaluate(mesh.vertices))


def interpolate_background(medium: Medium, mesh: Mesh) -> FEField:
    _check_same_domain(medium, mesh)
    return FEField(mesh, medium.background_values(mesh.vertices))


def interpolate_indicator(medium: Medium, k: int, mesh: Mesh) -> FEField:
    return FEField(mesh, medium.indicator(k, mesh.vertices))


def _check_same_domain(medium: Medium, mesh: Mesh) -> None:
    if not np.allclose(tuple(medium.domain), tuple(mesh.domain), rtol=0, atol=1e-12):
        raise ValueError("medium and mesh domains differ")


# ---------------------------------------------------------------------------
# assembly

_MASS_REF = (np.ones((3, 3)) + np.eye(3)) / 12.0
_EDGE_MASS_REF = (np.ones((2, 2)) + np.eye(2)) / 6.0


def _coo_to_csr(rows, cols, vals, n) -> sp.csr_matrix:
    A = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def _element_pattern(mesh: Mesh):
    t = mesh.triangles
    return np.repeat(t, 3, axis=1), np.tile(t, (1, 3))


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    rows, cols = _element_pattern(mesh)
    vals = mesh.areas[:, None, None] * _MASS_REF[None]
    return _coo_to_csr(rows, cols, vals.reshape(len(vals), 9), mesh.n_vertices)


def element_stiffness(mesh: Mesh) -> np.ndarray:
    """Unit-coefficient element stiffness matrices, ``(nt, 3, 3)``."""
    g = mesh.basis_gradients
    return mesh.areas[:, None, None] * np.einsum("nik,njk->nij", g, g)


def assemble_weighted_stiffness(mesh: Mesh, mu: np.ndarray) -> sp.csr_matrix:
    mu = np.asarray(mu)
    if mu.shape != (mesh.n_triangles,):
        raise ValueError("one weight per triangle expected")
    if np.isrealobj(mu) and not (np.all(np.isfinite(mu)) and np.all(mu > 0)):
        raise ValueError("stiffness weights must be positive and finite")
    rows, cols = _element_pattern(mesh)
    vals = mu[:, None, None] * element_stiffness(mesh)
    return _coo_to_csr(rows, cols, vals.reshape(len(vals), 9), mesh.n_vertices)


def assemble_boundary_mass(mesh: Mesh, tags=None, coeff=None) -> sp.csr_matrix:
    """Boundary mass matrix over edges with ``tags``; ``coeff`` is per selected edge."""
    sel = mesh.edges_with_tags(tags)
    e = mesh.boundary_edges[sel]
    w = mesh.edge_lengths[sel]
    if coeff is not None:
        w = w * np.broadcast_to(coeff, w.shape)
    vals = w[:, None, None] * _EDGE_MASS_REF[None]
    rows = np.repeat(e, 2, axis=1)
    cols = np.tile(e, (1, 2))
    return _coo_to_csr(rows, cols, vals.reshape(len(vals), 4), mesh.n_vertices)


# degree-5 seven-point rule on the reference triangle (barycentric, weights sum to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
TRI_QUAD_POINTS = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
TRI_QUAD_WEIGHTS = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)

_GAUSS3_X = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GAUSS3_W = np.array([5 / 9, 8 / 9, 5 / 9])


def assemble_load(mesh: Mesh, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Load vector ``(f, phi_i)`` with a seven-point rule per triangle."""
    p = mesh.vertices[mesh.triangles]
    pts = np.einsum("qi,nik->nqk", TRI_QUAD_POINTS, p)
    fv = np.asarray(f(pts[..., 0], pts[..., 1]))
    local = np.einsum("nq,qi,q->ni", fv, TRI_QUAD_POINTS, TRI_QUAD_WEIGHTS) * mesh.areas[:, None]
    out = np.zeros(mesh.n_vertices, dtype=local.dtype)
    np.add.at(out, mesh.triangles, local)
    return out


def edge_load_vectors(mesh: Mesh, g: Callable, edges: np.ndarray) -> np.ndarray:
    """Local loads ``int_e g phi_a`` for the given boundary edges, ``(ne, 2)``.

    Three-point Gauss rule per edge.
    """
    e = mesh.boundary_edges[edges]
    a = mesh.vertices[e[:, 0]]
    b = mesh.vertices[e[:, 1]]
    s = 0.5 * (_GAUSS3_X + 1.0)  # parameter along the edge
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    gv = np.asarray(g(pts[..., 0], pts[..., 1]))
    shape = np.stack([1.0 - s, s], axis=1)  # (3, 2)
    return np.einsum("nq,qi,q->ni", gv, shape, 0.5 * _GAUSS3_W) * mesh.edge_lengths[edges][:, None]


def assemble_boundary_load(mesh: Mesh, g: Callable, tags=None, coeff=None) -> np.ndarray:
    """Boundary load ``<coeff g, phi_i>``; ``coeff`` is constant per selected edge."""
    sel = mesh.edges_with_tags(tags)
    local = edge_load_vectors(mesh, g, sel)
    if coeff is not None:
        local = local * np.asarray(coeff)[:, None]
    out = np.zeros(mesh.n_vertices, dtype=local.dtype)
    np.add.at(out, mesh.boundary_edges[sel], local)
    return out


def element_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Constant gradient of P1 field(s) on each triangle, ``(nt, 2, ...)``."""
    v = np.asarray(values)[mesh.triangles]
    return np.einsum("ni...,nik->nk...", v, mesh.basis_gradients)


def element_means(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    return np.asarray(values)[mesh.triangles].mean(axis=1)


def l2_norm(M: sp.spmatrix, v: np.ndarray) -> float:
    return float(np.sqrt(max(np.real(np.vdot(v, M @ v)), 0.0)))


# ---------------------------------------------------------------------------
# accurate L2 distances to discontinuous functions

def _sub_barycentric(level: int) -> np.ndarray:
    """Barycentric centroids of the 4**level uniform sub-triangles."""
    n = 2 ** level
    pts = []
    for i in range(n):
        for j in range(n - i):
            pts.append(((i + 1 / 3) / n, (j + 1 / 3) / n))  # upright
            if i + j < n - 1:
                pts.append(((i + 2 / 3) / n, (j + 2 / 3) / n))  # inverted
    s = np.array(pts)
    return np.column_stack([1.0 - s.sum(axis=1), s[:, 0], s[:, 1]])


@dataclass(eq=False)
class FineQuadrature:
    """Sub-triangle centroid rule for integrals against discontinuous functions."""

    mesh: Mesh
    level: int = 3
    points: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)
    interpolation: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        lam = _sub_barycentric(self.level)
        nq = len(lam)
        p = self.mesh.vertices[self.mesh.triangles]
        self.points = np.einsum("qi,nik->nqk", lam, p).reshape(-1, 2)
        self.weights = np.repeat(self.mesh.areas / nq, nq)
        rows = np.arange(len(self.points)).repeat(3)
        cols = np.repeat(self.mesh.triangles, nq, axis=0).ravel()
        vals = np.tile(lam, (self.mesh.n_triangles, 1)).ravel()
        self.interpolation = sp.csr_matrix((vals, (rows, cols)),
                                           shape=(len(self.points), self.mesh.n_vertices))

    def norm(self, func_values: np.ndarray) -> float:
        return float(np.sqrt(self.weights @ np.abs(func_values) ** 2))

    def distance(self, nodal: np.ndarray, func_values: np.ndarray) -> float:
        """L2 distance between a P1 field and a function sampled at ``points``."""
        return self.norm(self.interpolation @ nodal - func_values)


# ---------------------------------------------------------------------------
# Helmholtz forward problem

@dataclass(frozen=True)
class GaussianSource:
    """Smoothed point source ``A exp(-|x - c|^2 / (2 sigma^2))``."""

    center: tuple[float, float]
    width: float
    amplitude: float = 1.0

    def __call__(self, x, y):
        cx, cy = self.center
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        return self.amplitude * np.exp(-r2 / (2.0 * self.width ** 2))


@dataclass(eq=False)
class ForwardProblem:
    """Mesh, frequency, sources and boundary description for one frequency.

    ``boundary_data`` holds, per source, None, a callable ``g(x, y)`` or a
    mapping from boundary tag to such a callable.
    Tags in ``sound_hard`` drop the impedance term (homogeneous Neumann).
    """

    mesh: Mesh
    frequency: float
    sources: Sequence[GaussianSource | Callable]
    observe: tuple[str, ...] = SIDES
    sound_hard: tuple[str, ...] = ()
    boundary_data: Sequence[Callable | None] | None = None

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")
        if not self.observe:
            raise ValueError("observation boundary must be nonempty")
        self.observe = tuple(self.observe)
        self.sound_hard = tuple(self.sound_hard)
        self.mesh.edges_with_tags(self.observe + self.sound_hard)  # validates tags
        for s in self.sources:
            if isinstance(s, GaussianSource) and not self.mesh.domain.contains(np.array(s.center))[0]:
                raise ValueError(f"source center {s.center} outside the domain")
        if self.boundary_data is None:
            self.boundary_data = [None] * len(self.sources)
        self._loads = None

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def impedance_tags(self) -> tuple[str, ...]:
        return tuple(t for t in SIDES if t not in self.sound_hard)

    def interior_loads(self) -> np.ndarray:
        """``(n, Ns)`` volume load vectors (medium independent, cached)."""
        if self._loads is None:
            cols = [assemble_load(self.mesh, f) for f in self.sources]
            self._loads = np.column_stack(cols).astype(complex)
        return self._loads

    def has_boundary_data(self) -> bool:
        return any(g is not None for g in self.boundary_data)


class HelmholtzSystem:
    """Assembled and factorized Helmholtz operator for a given medium.

    The complex-symmetric system matrix is factorized once and reused for
    every source and for the adjoint solves.
    """

    def __init__(self, problem: ForwardProblem, u: np.ndarray):
        u = np.asarray(u, dtype=float)
        mesh = problem.mesh
        if u.shape != (mesh.n_vertices,):
            raise ValueError("medium must be a full nodal field")
        umin = float(u.min())
        if not umin > 0:
            raise NonpositiveMediumError(umin)
        self.problem = problem
        self.u = u
        omega = problem.omega
        self.edges = mesh.edges_with_tags(problem.impedance_tags)
        e = mesh.boundary_edges[self.edges]
        self.edge_u = u[e].mean(axis=1)
        K = assemble_weighted_stiffness(mesh, element_means(mesh, u))
        M = _cached_mass(mesh)
        B = assemble_boundary_mass(mesh, problem.impedance_tags, np.sqrt(self.edge_u))
        self.matrix = (K - omega ** 2 * M - 1j * omega * B).tocsc()
        self.factor: Factorization = factorize(self.matrix)

    def rhs(self) -> np.ndarray:
        problem = self.problem
        b = problem.interior_loads().copy()
        if problem.has_boundary_data():
            mesh = problem.mesh
            for l, g in enumerate(problem.boundary_data):
                if g is None:
                    continue
                pieces = g.items() if isinstance(g, dict) else [(None, g)]
                for tag, gfun in pieces:
                    tags = problem.impedance_tags if tag is None else [tag]
                    sel = mesh.edges_with_tags(tags)
                    u_edge = self.u[mesh.boundary_edges[sel]].mean(axis=1)
                    b[:, l] += assemble_boundary_load(mesh, gfun, tags, coeff=u_edge)
        return b

    def solve_all(self) -> np.ndarray:
        return self.factor.solve(self.rhs())


_MASS_CACHE: dict[int, tuple[Mesh, sp.csr_matrix]] = {}


def _cached_mass(mesh: Mesh) -> sp.csr_matrix:
    hit = _MASS_CACHE.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        if len(_MASS_CACHE) > 16:
            _MASS_CACHE.clear()
        hit = (mesh, assemble_mass(mesh))
        _MASS_CACHE[id(mesh)] = hit
    return hit[1]


def solve_helmholtz(problem: ForwardProblem, u: FEField | np.ndarray, source: int | None = None):
    """Wave field(s) for medium ``u``; all sources as ``(n, Ns)`` if ``source`` is None."""
    values = u.values if isinstance(u, FEField) else u
    Y = HelmholtzSystem(problem, values).solve_all()
    if source is None:
        return Y
    return FEField(problem.mesh, Y[:, source])


def boundary_inner(mesh: Mesh, a, b, tags=None) -> complex:
    """``int_Gamma a conj(b)`` for P1 fields through the boundary mass matrix."""
    if tags is not None and len(tags if not isinstance(tags, str) else [tags]) == 0:
        raise ValueError("empty boundary tag set")
    av = a.values if isinstance(a, FEField) else np.asarray(a)
    bv = b.values if isinstance(b, FEField) else np.asarray(b)
    if av.shape != (mesh.n_vertices,) or bv.shape != (mesh.n_vertices,):
        raise ValueError("fields must live on the same mesh")
    return complex(av @ (assemble_boundary_mass(mesh, tags) @ np.conj(bv)))


# ---------------------------------------------------------------------------
# field dumps

def write_field_csv(path, mesh: Mesh, values: np.ndarray, descriptor: dict | None = None) -> None:
    """Write ``x,y,re,im`` per node and a JSON sidecar with mesh parameters."""
    import json
    from pathlib import Path

    path = Path(path)
    v = np.asarray(values)
    data = np.column_stack([mesh.vertices, np.real(v), np.imag(v)])
    np.savetxt(path, data, delimiter=",", header="x,y,re,im", comments="", fmt="%.17g")
    meta = {
        "domain": list(mesh.domain),
        "shape": list(mesh.shape),
        "n_vertices": mesh.n_vertices,
        "n_triangles": mesh.n_triangles,
        "h_max": mesh.h_max,
    }
    meta.update(descriptor or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def read_field_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    values = data[:, 2] + 1j * data[:, 3]
    return data[:, :2], values
