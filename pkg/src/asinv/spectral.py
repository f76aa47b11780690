"""Adaptive spectral decomposition of a medium.

For a nodal field ``w`` the weighted operator ``L[w] v = -div(mu[w] grad v)``
with ``mu[w] ~ 1 / |grad w|`` gives a background ``phi_0`` (the weighted
harmonic extension of the boundary values) and Dirichlet eigenfunctions
``phi_k``. A piecewise-constant medium is then well represented by
``phi_0 + sum_k c_k phi_k`` with few terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from asinv.fem import (FEField, assemble_mass, assemble_weighted_stiffness, element_gradients,
                       interpolate_background, interpolate_indicator, interpolate_medium)
from asinv.linalg import EigenPairs, Factorization, smallest_eigenpairs
from asinv.medium import Medium, RegionMask, classify_regions
from asinv.mesh import Mesh, Rectangle, as_rectangle


@dataclass(frozen=True)
class WeightSpec:
    """Weight ``mu(t) = (t^q + eps^q)^(-1/q)`` (``power``) or ``1 / max(t, eps)`` (``max``)."""

    form: str = "power"
    q: float = 2.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.form not in ("power", "max"):
            raise ValueError(f"weight form must be 'power' or 'max', got {self.form!r}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.form == "power" and not self.q >= 1:
            raise ValueError("q must be >= 1")

    def __call__(self, t) -> np.ndarray:
        t = np.abs(np.asarray(t, dtype=float))
        if self.form == "max":
            return 1.0 / np.maximum(t, self.eps)
        # factor out the larger of t and eps so t^q cannot overflow
        s = np.maximum(t, self.eps)
        return 1.0 / (s * ((t / s) ** self.q + (self.eps / s) ** self.q) ** (1.0 / self.q))


def _values(w) -> np.ndarray:
    return w.full() if isinstance(w, FEField) else np.asarray(w)


def gradient_magnitude(mesh: Mesh, w) -> np.ndarray:
    return np.linalg.norm(element_gradients(mesh, _values(w)), axis=1)


def weight_field(mesh: Mesh, w, spec: WeightSpec) -> np.ndarray:
    """Element weights ``mu(|grad w|)`` using the exact P1 element gradient."""
    return spec(gradient_magnitude(mesh, w))


def tv_l1_norm(mesh: Mesh, v) -> float:
    """``int |grad v|`` for a P1 field (exact)."""
    return float(mesh.areas @ gradient_magnitude(mesh, v))


def compute_background(mesh: Mesh, w, boundary_values, spec: WeightSpec,
                       mu: np.ndarray | None = None) -> FEField:
    """Weighted-harmonic extension of ``boundary_values`` with weight ``mu[w]``.

    Only the boundary entries of ``boundary_values`` are used. The interior is
    found from ``K_II x = -K_IB g`` with an SPD factorization.
    """
    if mu is None:
        mu = weight_field(mesh, w, spec)
    g = _values(boundary_values).astype(float)
    K = assemble_weighted_stiffness(mesh, mu)
    I, B = mesh.interior_nodes, mesh.boundary_nodes
    out = np.zeros(mesh.n_vertices)
    out[B] = g[B]
    if len(I):
        rhs = -(K[I][:, B] @ g[B])
        out[I] = Factorization(K[I][:, I], spd=True).solve(rhs)
    return FEField(mesh, out)


@dataclass(eq=False)
class SpectralBasis:
    """Background and Dirichlet eigenpairs of the weighted operator.

    ``vectors`` holds full-length nodal columns (zero on the boundary) that
    are orthonormal in the mass inner product.
    """

    mesh: Mesh
    background: FEField | None
    values: np.ndarray
    vectors: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def size(self) -> int:
        return len(self.values)

    def function(self, k: int) -> FEField:
        return FEField(self.mesh, self.vectors[:, k])


def compute_eigenbasis(mesh: Mesh, w, n_eigs: int, spec: WeightSpec, *, rescale: bool = False,
                       tol: float = 1e-10, mu: np.ndarray | None = None,
                       background: FEField | None = None, seed: int = 0) -> SpectralBasis:
    """The ``n_eigs`` smallest eigenpairs of ``L[w]`` on interior nodes.

    With ``rescale`` the stiffness is multiplied by ``eps`` before solving and
    the eigenvalues divided by it afterwards; the result is the same up to
    rounding but the matrix entries are O(1).
    """
    if n_eigs < 1:
        raise ValueError("need at least one eigenpair")
    if mu is None:
        mu = weight_field(mesh, w, spec)
    I = mesh.interior_nodes
    scale = spec.eps if rescale else 1.0
    K = assemble_weighted_stiffness(mesh, mu * scale)[I][:, I]
    M = _mass(mesh)[I][:, I]
    pairs: EigenPairs = smallest_eigenpairs(K, M, n_eigs, tol=tol, seed=seed)
    vectors = np.zeros((mesh.n_vertices, n_eigs))
    vectors[I] = pairs.vectors
    return SpectralBasis(mesh, background, pairs.values / scale, vectors, mu, pairs.residuals)


_MASS: dict[int, tuple[Mesh, sp.csr_matrix]] = {}


def _mass(mesh: Mesh) -> sp.csr_matrix:
    hit = _MASS.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        if len(_MASS) > 16:
            _MASS.clear()
        hit = _MASS[id(mesh)] = (mesh, assemble_mass(mesh))
    return hit[1]


def project(mesh: Mesh, v, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2 projection onto the span of mass-orthonormal columns ``vectors``.

    Returns the coefficients and the reconstructed nodal field.
    """
    if isinstance(vectors, SpectralBasis):
        vectors = vectors.vectors
    vals = _values(v)
    coeffs = vectors.T @ (_mass(mesh) @ vals)
    return coeffs, vectors @ coeffs


def as_decomposition(mesh: Mesh, u, basis: SpectralBasis, n_terms: int | None = None) -> np.ndarray:
    """``phi_0 + Pi_K (u - phi_0)`` using the first ``n_terms`` eigenfunctions."""
    phi0 = basis.background.values
    V = basis.vectors[:, :n_terms]
    _, rec = project(mesh, _values(u) - phi0, V)
    return phi0 + rec


# ---------------------------------------------------------------------------
# estimate checks

SLACK = 1e-9


@dataclass
class EstimateCheck:
    check: str
    index: int
    lhs: float
    rhs: float
    passed: bool


@dataclass(eq=False)
class EstimateReport:
    """Results of the background, eigenfunction and eigenvalue estimate checks."""

    checks: list[EstimateCheck]
    eigenvalues: np.ndarray
    constants: dict
    regions: RegionMask
    basis: SpectralBasis

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def rows(self) -> list[dict]:
        return [c.__dict__.copy() for c in self.checks]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["check", "index", "lhs", "rhs", "pass"])
            for c in self.checks:
                writer.writerow([c.check, c.index, repr(float(c.lhs)), repr(float(c.rhs)), int(c.passed)])


def _grad_sq_on(mesh: Mesh, values: np.ndarray, mask: np.ndarray) -> float:
    g = element_gradients(mesh, values)
    return float(mesh.areas[mask] @ np.sum(g[mask] ** 2, axis=1))


def _l2_sq_on(mesh: Mesh, values: np.ndarray, mask: np.ndarray) -> float:
    v = values[mesh.triangles[mask]]
    return float(mesh.areas[mask] @ ((v ** 2).sum(axis=1) + v.sum(axis=1) ** 2) / 12.0)


def verify_estimates(medium: Medium, mesh: Mesh, spec: WeightSpec, delta: float | None = None,
                     n_eigs: int | None = None, region: Rectangle | None = None,
                     rescale: bool = False) -> EstimateReport:
    """Check the decomposition estimates for the interpolant of ``medium``.

    Checks ``bg`` (gradient of the background on the complement of the
    interface bands), ``eig`` (gradient of each eigenfunction there against
    ``lambda_k eps``) and reports the constants ``C`` of the eigenvalue
    bound and ``C2`` of the L2 bound on ``region``.

    Parameters
    ----------
    delta : band width, default ``2 h``.
    n_eigs : number of eigenpairs, default the number of inclusions.
    region : rectangle selecting the set on which ``C2`` is measured
        (intersected with non-inclusion complement triangles); whole domain
        by default.
    """
    delta = 2.0 * mesh.h_max if delta is None else float(delta)
    K = n_eigs if n_eigs is not None else max(medium.n_inclusions, 1)
    regions = classify_regions(mesh, medium, delta)
    D = regions.complement

    u_d = interpolate_medium(medium, mesh).values
    u0_d = interpolate_background(medium, mesh).values
    mu = weight_field(mesh, u_d, spec)
    phi0 = compute_background(mesh, u_d, u_d, spec, mu=mu)
    basis = compute_eigenbasis(mesh, u_d, K, spec, mu=mu, background=phi0, rescale=rescale)

    checks = []
    lhs = _grad_sq_on(mesh, phi0.values, D)
    rhs = spec.eps * tv_l1_norm(mesh, u0_d)
    # absolute floor for a constant background, where rhs = 0 and lhs is rounding
    floor = SLACK * spec.eps * float(np.abs(u_d).max()) * 2 * (mesh.domain.width + mesh.domain.height)
    checks.append(EstimateCheck("bg", 0, lhs, rhs, lhs <= rhs * (1 + SLACK) + floor))
    for k in range(K):
        lhs = _grad_sq_on(mesh, basis.vectors[:, k], D)
        rhs = basis.values[k] * spec.eps
        checks.append(EstimateCheck("eig", k + 1, lhs, rhs, lhs <= rhs * (1 + SLACK)))

    constants = {}
    if medium.n_inclusions:
        umin = medium.min_abs_inclusion_value()
        tau = np.array([tv_l1_norm(mesh, interpolate_indicator(medium, k, mesh).values)
                        for k in range(medium.n_inclusions)])
        tnorm = float(np.linalg.norm(tau))
        n_c = min(K, medium.n_inclusions)
        C = basis.values[:n_c] * umin / tnorm
        constants["C"] = float(C.max())
        constants["tau"] = tau
        for k in range(n_c):
            checks.append(EstimateCheck("eigval_const", k + 1, float(C[k]), np.inf, bool(np.isfinite(C[k]))))

        V = regions.mask(2)
        if region is not None:
            V &= as_rectangle(region).contains(mesh.barycenters)
        C2 = [_l2_sq_on(mesh, basis.vectors[:, k], V) * umin / spec.eps for k in range(K)]
        constants["C2"] = float(max(C2))
        for k, c in enumerate(C2):
            checks.append(EstimateCheck("l2_const", k + 1, c, np.inf, bool(np.isfinite(c))))
    return EstimateReport(checks, basis.values.copy(), constants, regions, basis)
