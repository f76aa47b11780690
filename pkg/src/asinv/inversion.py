"""Misfit, adjoint gradient, BFGS and the adaptive spectral inversion loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from asinv.fem import (ForwardProblem, HelmholtzSystem, NonpositiveMediumError,
                       assemble_boundary_mass, assemble_weighted_stiffness, edge_load_vectors,
                       element_gradients)
from asinv.linalg import modified_gram_schmidt, qcqp_ball
from asinv.mesh import SIDES, Mesh
from asinv.spectral import (WeightSpec, _mass, compute_background, compute_eigenbasis,
                            weight_field)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data containers

@dataclass(eq=False)
class ObservationSet:
    """Boundary data ``data[:, l]`` for source ``l`` at the mesh nodes ``nodes``."""

    nodes: np.ndarray
    data: np.ndarray
    frequency: float
    noise_level: float = 0.0
    tags: tuple[str, ...] = SIDES

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        if self.data.shape[0] != len(self.nodes):
            raise ValueError("one observation row per boundary node expected")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("observations must be finite")
        self.tags = tuple(self.tags)

    @property
    def n_sources(self) -> int:
        return self.data.shape[1]


@dataclass(eq=False)
class SearchSpace:
    """Affine space ``offset + span(basis)`` with mass-orthonormal basis columns."""

    mesh: Mesh
    offset: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)
        self.basis = np.asarray(self.basis, dtype=float).reshape(self.mesh.n_vertices, -1)

    @property
    def dimension(self) -> int:
        return self.basis.shape[1]

    def medium(self, coeffs: np.ndarray) -> np.ndarray:
        return self.offset + self.basis @ coeffs

    def coefficients(self, v: np.ndarray) -> np.ndarray:
        """Coefficients of the L2 projection of ``v - offset``."""
        return self.basis.T @ (_mass(self.mesh) @ (np.asarray(v) - self.offset))

    def orthonormality_error(self) -> float:
        G = self.basis.T @ (_mass(self.mesh) @ self.basis)
        return float(np.abs(G - np.eye(self.dimension)).max()) if self.dimension else 0.0


# ---------------------------------------------------------------------------
# misfit and gradient

class Misfit:
    """``J[u] = 1/2 sum_l |y_l[u] - y_obs_l|^2`` over the observation boundary.

    The gradient with respect to nodal medium values uses one adjoint solve
    per source with the (complex symmetric) Helmholtz matrix, so each
    evaluation costs a single factorization.
    """

    def __init__(self, problem: ForwardProblem, obs: ObservationSet):
        if obs.n_sources != problem.n_sources:
            raise ValueError("observation and source counts differ")
        self.problem = problem
        self.obs = obs
        mesh = problem.mesh
        MG = assemble_boundary_mass(mesh, obs.tags).tocsr()
        self.MG = MG[obs.nodes][:, obs.nodes]
        if not set(mesh.nodes_with_tags(obs.tags)).issubset(set(obs.nodes.tolist())):
            raise ValueError("observation nodes do not cover the observation boundary")
        self.n_evals = 0

    def residual(self, Y: np.ndarray) -> np.ndarray:
        return Y[self.obs.nodes] - self.obs.data

    def _value(self, R: np.ndarray) -> float:
        # real part of a Hermitian form; summed per source in a fixed order
        return 0.5 * float(np.sum(np.real(np.conj(R) * (self.MG @ R))))

    def value(self, u: np.ndarray) -> float:
        system = HelmholtzSystem(self.problem, u)
        self.n_evals += 1
        return self._value(self.residual(system.solve_all()))

    def value_and_gradient(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        """Misfit and its gradient with respect to all nodal values of ``u``."""
        problem = self.problem
        mesh = problem.mesh
        system = HelmholtzSystem(problem, u)
        self.n_evals += 1
        Y = system.solve_all()
        R = self.residual(Y)
        J = self._value(R)
        rhs = np.zeros_like(Y)
        rhs[self.obs.nodes] = self.MG @ np.conj(R)
        Z = system.factor.solve(rhs)

        # stiffness term: mean(u) on each element enters with weight 1/3 per vertex
        Gy = element_gradients(mesh, Y)  # (nt, 2, Ns)
        Gz = element_gradients(mesh, Z)
        elem = mesh.areas * np.einsum("nks,nks->n", Gz, Gy)
        grad = np.zeros(mesh.n_vertices, dtype=complex)
        np.add.at(grad, mesh.triangles, -(elem / 3.0)[:, None])

        # impedance term: -i omega sqrt(mean edge u) <y, v>
        e = mesh.boundary_edges[system.edges]
        L = mesh.edge_lengths[system.edges]
        za, zb = Z[e[:, 0]], Z[e[:, 1]]
        ya, yb = Y[e[:, 0]], Y[e[:, 1]]
        zEy = L / 6.0 * np.sum(2 * za * ya + za * yb + zb * ya + 2 * zb * yb, axis=1)
        dB = zEy / (4.0 * np.sqrt(system.edge_u))
        np.add.at(grad, e, (1j * problem.omega * dB)[:, None])

        # boundary data enter through the edge factor mean(u); their loads are linear in it
        if problem.has_boundary_data():
            grad += self._boundary_data_term(system, Z)
        return J, np.real(grad)

    def _boundary_data_term(self, system: HelmholtzSystem, Z: np.ndarray) -> np.ndarray:
        problem = self.problem
        mesh = problem.mesh
        out = np.zeros(mesh.n_vertices, dtype=complex)
        for l, g in enumerate(problem.boundary_data):
            if g is None:
                continue
            pieces = g.items() if isinstance(g, dict) else [(None, g)]
            for tag, gfun in pieces:
                tags = problem.impedance_tags if tag is None else [tag]
                sel = mesh.edges_with_tags(tags)
                e = mesh.boundary_edges[sel]
                load = edge_load_vectors(mesh, gfun, sel)
                # d(mean u)/du_a = 1/2 for both end nodes of an edge
                contrib = 0.5 * np.sum(load * Z[e, l], axis=1)
                np.add.at(out, e[:, 0], contrib)
                np.add.at(out, e[:, 1], contrib)
        return out


def evaluate_misfit(coeffs, space: SearchSpace, problem: ForwardProblem, obs: ObservationSet) -> float:
    return Misfit(problem, obs).value(space.medium(np.asarray(coeffs, dtype=float)))


def misfit_gradient(coeffs, space: SearchSpace, problem: ForwardProblem,
                    obs: ObservationSet) -> np.ndarray:
    _, g = Misfit(problem, obs).value_and_gradient(space.medium(np.asarray(coeffs, dtype=float)))
    return space.basis.T @ g


# ---------------------------------------------------------------------------
# BFGS

@dataclass
class BFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    converged: bool
    warning: str = ""
    fun_history: list = field(default_factory=list)


def _safe_eval(fun_grad, x):
    try:
        f, g = fun_grad(x)
    except NonpositiveMediumError:
        return np.inf, None
    if not np.isfinite(f):
        return np.inf, None
    return float(f), np.asarray(g, dtype=float)


def _line_search(fun_grad, x, f0, g0, d, alpha0, c1, c2, max_evals):
    """Strong Wolfe line search (bracketing then zoom).

    Infinite values (nonpositive media) shrink the trial step. Returns the
    step, value, gradient, number of evaluations and whether the Wolfe
    conditions hold; on failure the best point seen is returned.
    """
    dg0 = float(g0 @ d)
    evals = 0
    best = (0.0, f0, g0)

    def trial(a):
        nonlocal evals, best
        f, g = _safe_eval(fun_grad, x + a * d)
        evals += 1
        if np.isfinite(f) and f < best[1]:
            best = (a, f, g)
        return f, g

    a_prev, f_prev, dg_prev = 0.0, f0, dg0
    a = alpha0
    bracket = None
    while evals < max_evals:
        f, g = trial(a)
        if not np.isfinite(f):
            a = a_prev + 0.25 * (a - a_prev)
            continue
        dg = float(g @ d)
        if f > f0 + c1 * a * dg0 or (a_prev > 0 and f >= f_prev):
            bracket = (a_prev, f_prev, dg_prev, a, f)
            break
        if abs(dg) <= -c2 * dg0:
            return a, f, g, evals, True
        if dg >= 0:
            bracket = (a, f, dg, a_prev, f_prev)
            break
        a_prev, f_prev, dg_prev = a, f, dg
        a = 2.0 * a
    if bracket is None:
        return best[0], best[1], best[2], evals, False

    a_lo, f_lo, dg_lo, a_hi, f_hi = bracket
    while evals < max_evals:
        lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
        width = hi - lo
        if width <= 1e-12 * max(hi, 1e-300):
            break
        # minimizer of the quadratic through f_lo, dg_lo and f_hi, kept inside the bracket
        da = a_hi - a_lo
        denom = 2.0 * (f_hi - f_lo - dg_lo * da)
        a = a_lo - dg_lo * da * da / denom if np.isfinite(f_hi) and denom > 0 else 0.5 * (lo + hi)
        if not lo + 0.1 * width <= a <= hi - 0.1 * width:
            a = 0.5 * (lo + hi)
        f, g = trial(a)
        if not np.isfinite(f):
            a_hi, f_hi = a, np.inf
            continue
        dg = float(g @ d)
        if f > f0 + c1 * a * dg0 or f >= f_lo:
            a_hi, f_hi = a, f
        else:
            if abs(dg) <= -c2 * dg0:
                return a, f, g, evals, True
            if dg * (a_hi - a_lo) >= 0:
                a_hi, f_hi = a_lo, f_lo
            a_lo, f_lo, dg_lo = a, f, dg
    return best[0], best[1], best[2], evals, False


def bfgs(fun_grad, x0, gtol: float = 1e-6, max_iter: int = 200, initial_step: float = 0.1,
         c1: float = 1e-4, c2: float = 0.9, max_ls_evals: int = 30,
         callback: Callable | None = None) -> BFGSResult:
    """Minimize with BFGS inverse-Hessian updates and a strong Wolfe line search.

    Stops when ``|g| <= gtol |g0|``. Points where ``fun_grad`` raises
    :class:`NonpositiveMediumError` count as infinite and shrink the step.
    The first step has length ``initial_step`` along ``-g0``; the inverse
    Hessian is rescaled by ``s^T y / y^T y`` after the first accepted step.
    """
    x = np.array(x0, dtype=float)
    n = len(x)
    f, g = _safe_eval(fun_grad, x)
    if g is None:
        raise NonpositiveMediumError(-np.inf)
    n_eval = 1
    g0 = np.linalg.norm(g)
    hist = [f]
    H = np.eye(n)
    scaled = False
    if g0 == 0.0:
        return BFGSResult(x, f, g, 0, n_eval, True, "", hist)
    warning = ""
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = -H @ g
        if g @ d >= 0:  # lost descent: restart from steepest descent
            H = np.eye(n)
            scaled = False
            d = -g
        alpha0 = 1.0 if scaled else initial_step / np.linalg.norm(d)
        a, f_new, g_new, evals, ok = _line_search(fun_grad, x, f, g, d, alpha0, c1, c2, max_ls_evals)
        n_eval += evals
        if a == 0.0 or g_new is None:
            warning = "line search failed"
            it -= 1
            break
        s = a * d
        y = g_new - g
        x = x + s
        f, g = f_new, g_new
        hist.append(f)
        if callback is not None:
            callback(x, f)
        if not ok:
            warning = "line search did not satisfy the Wolfe conditions"
        if np.linalg.norm(g) <= gtol * g0:
            converged = True
            break
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if not scaled:
                H = (sy / float(y @ y)) * np.eye(n)
                scaled = True
            rho = 1.0 / sy
            Hy = H @ y
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s))
    if converged:
        warning = ""
    return BFGSResult(x, f, g, it, n_eval, converged, warning, hist)


def minimize_subspace(initial, space: SearchSpace, problem: ForwardProblem, obs: ObservationSet,
                      tol: float = 1e-6, max_iter: int = 200, initial_step: float = 0.1) -> BFGSResult:
    """BFGS over the coefficients of ``space``."""
    misfit = Misfit(problem, obs)

    def fg(beta):
        J, gu = misfit.value_and_gradient(space.medium(beta))
        return J, space.basis.T @ gu

    return bfgs(fg, initial, gtol=tol, max_iter=max_iter, initial_step=initial_step)


# ---------------------------------------------------------------------------
# search-space adaptation

def merge_spaces(old: SearchSpace, new_background: np.ndarray, new_vectors: np.ndarray,
                 drop_tol: float = 1e-10) -> SearchSpace:
    """Orthonormalize (new eigenvectors, background change, old basis) in that order."""
    mesh = old.mesh
    shift = np.asarray(new_background, dtype=float) - old.offset
    cols = np.column_stack([new_vectors, shift, old.basis])
    cols[mesh.boundary_nodes] = 0.0  # the basis lives in H^1_0
    res = modified_gram_schmidt(cols, _mass(mesh), drop_tol=drop_tol)
    return SearchSpace(mesh, np.asarray(new_background, dtype=float), res.basis)


def filter_indicator(w: np.ndarray, space: SearchSpace, eps_psi: float, spec: WeightSpec,
                     full_output: bool = False):
    """Minimize ``int mu[w] |grad v|^2`` over ``v`` in ``span(space)`` near ``w``.

    The constraint ``|v - w|^2 <= eps_psi^2 |w|^2`` reduces, for
    ``v = sum beta_j psi_j``, to a ball of radius
    ``r^2 = eps_psi^2 |w|^2 - |w - Pi w|^2`` around ``gamma_j = <w, psi_j>``.
    """
    mesh = space.mesh
    M = _mass(mesh)
    w = np.asarray(w, dtype=float)
    Psi = space.basis
    gamma = Psi.T @ (M @ w)
    proj = Psi @ gamma
    resid = w - proj
    r2 = eps_psi ** 2 * float(w @ (M @ w)) - float(resid @ (M @ resid))
    if r2 <= 0:
        beta = gamma
    else:
        mu = weight_field(mesh, w, spec)
        K = assemble_weighted_stiffness(mesh, mu)
        A = Psi.T @ (K @ Psi)
        beta = qcqp_ball(0.5 * (A + A.T), gamma, math.sqrt(r2))
    out = Psi @ beta
    return (out, beta) if full_output else out


@dataclass(frozen=True)
class TruncationResult:
    keep: int
    eps_psi: float
    j0: int
    rho: float
    order: np.ndarray


def truncation_rule(gamma, J_prev: int, eps_psi: float, rho0: float, rho1: float) -> TruncationResult:
    """Choose the number of basis functions to keep from Fourier coefficients.

    ``J0`` is the smallest ``J`` whose discarded tail (coefficients sorted by
    decreasing magnitude) has energy at most ``eps_psi^2 |gamma|^2``, and
    ``rho = J0 / J_prev``. Above ``rho1`` the tolerance doubles; below
    ``rho0`` the count is raised to ``ceil(rho0 J_prev)`` and the tolerance
    halves.
    """
    gamma = np.asarray(gamma, dtype=float)
    n = len(gamma)
    if n == 0:
        raise ValueError("empty coefficient vector")
    order = np.argsort(-np.abs(gamma), kind="stable")
    g2 = gamma[order] ** 2
    total = float(np.sum(g2))
    # tail[J] = sum_{l > J} g2[l-1] for J = 1..n
    tail = np.concatenate([np.cumsum(g2[::-1])[::-1][1:], [0.0]])
    bound = eps_psi ** 2 * total
    j0 = int(np.flatnonzero(tail <= bound)[0]) + 1
    rho = j0 / J_prev
    keep, eps = j0, eps_psi
    if rho > rho1:
        eps = 2.0 * eps_psi
    elif rho < rho0:
        keep = min(int(math.ceil(rho0 * J_prev)), n)
        eps = 0.5 * eps_psi
    return TruncationResult(keep, eps, j0, rho, order)


def truncate_space(space: SearchSpace, indicator: np.ndarray, J_prev: int, eps_psi: float,
                   rho0: float, rho1: float) -> tuple[SearchSpace, float, TruncationResult]:
    gamma = space.basis.T @ (_mass(space.mesh) @ np.asarray(indicator))
    rule = truncation_rule(gamma, J_prev, eps_psi, rho0, rho1)
    kept = rule.order[: rule.keep]
    return SearchSpace(space.mesh, space.offset, space.basis[:, kept]), rule.eps_psi, rule


# ---------------------------------------------------------------------------
# the ASI loop

@dataclass(frozen=True)
class ASIConfig:
    """Parameters of the adaptive spectral inversion.

    ``eig_operand`` is ``"subtracted"`` (eigenfunctions of ``L[u - phi_0]``)
    or ``"medium"`` (``L[u]``); ``warm_start`` is ``"projection"`` or
    ``"filtered"``.
    """

    eps_psi: float = 0.005
    rho0: float = 0.8
    rho1: float = 1.2
    eps_nu: float = 0.005
    eps_tol: float = 0.005
    J1: int = 100
    gtol: float = 1e-6
    bfgs_max_iter: int = 200
    bfgs_initial_step: float = 0.1
    max_iterations: int = 30
    max_iter_per_frequency: int | None = None
    eig_operand: str = "subtracted"
    warm_start: str = "projection"
    weight: WeightSpec = WeightSpec()

    def __post_init__(self):
        if not 0 <= self.rho0 <= 1 <= self.rho1:
            raise ValueError("need 0 <= rho0 <= 1 <= rho1")
        for name in ("eps_psi", "eps_nu", "eps_tol", "gtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.J1 < 1 or self.max_iterations < 1 or self.bfgs_max_iter < 1:
            raise ValueError("J1, max_iterations and bfgs_max_iter must be >= 1")
        if self.eig_operand not in ("subtracted", "medium"):
            raise ValueError("eig_operand must be 'subtracted' or 'medium'")
        if self.warm_start not in ("projection", "filtered"):
            raise ValueError("warm_start must be 'projection' or 'filtered'")
        if self.max_iter_per_frequency is not None and self.max_iter_per_frequency < 1:
            raise ValueError("max_iter_per_frequency must be >= 1")


HISTORY_COLUMNS = ("iteration", "frequency", "J_m", "misfit", "rel_L2_error", "update_norm",
                   "merged_dim", "eps_psi", "bfgs_iterations", "bfgs_evaluations",
                   "bfgs_converged", "misfit_monotone", "initial_misfit")


@dataclass(eq=False)
class ASIState:
    """Loop state between iterations; enough to resume a run exactly."""

    iteration: int
    freq_index: int
    iters_at_freq: int
    eps_psi: float
    space: SearchSpace
    coeffs: np.ndarray
    u_prev: np.ndarray
    history: list

    def save(self, path) -> None:
        np.savez(path, iteration=self.iteration, freq_index=self.freq_index,
                 iters_at_freq=self.iters_at_freq, eps_psi=self.eps_psi,
                 offset=self.space.offset, basis=self.space.basis, coeffs=self.coeffs,
                 u_prev=self.u_prev,
                 history=np.array([[row[c] for c in HISTORY_COLUMNS] for row in self.history],
                                  dtype=float).reshape(-1, len(HISTORY_COLUMNS)))

    @classmethod
    def load(cls, path, mesh: Mesh) -> "ASIState":
        with np.load(path) as z:
            hist = [dict(zip(HISTORY_COLUMNS, _typed_row(r))) for r in z["history"]]
            return cls(int(z["iteration"]), int(z["freq_index"]), int(z["iters_at_freq"]),
                       float(z["eps_psi"]), SearchSpace(mesh, z["offset"], z["basis"]),
                       z["coeffs"].copy(), z["u_prev"].copy(), hist)


_INT_COLUMNS = {"iteration", "J_m", "merged_dim", "bfgs_iterations", "bfgs_evaluations",
                "bfgs_converged", "misfit_monotone"}


def _typed_row(r):
    return [int(v) if c in _INT_COLUMNS else float(v) for c, v in zip(HISTORY_COLUMNS, r)]


@dataclass(eq=False)
class ASIResult:
    u: np.ndarray
    history: list
    space: SearchSpace
    converged: bool
    state: ASIState

    def history_array(self) -> np.ndarray:
        return np.array([[row[c] for c in HISTORY_COLUMNS] for row in self.history], dtype=float)


class ASIError(RuntimeError):
    """A sub-step failed; ``history`` holds the iterations completed so far."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def initial_space(mesh: Mesh, u0: np.ndarray, boundary: np.ndarray, cfg: ASIConfig) -> SearchSpace:
    spec = cfg.weight
    phi0 = compute_background(mesh, u0, boundary, spec).values
    w = u0 - phi0 if cfg.eig_operand == "subtracted" else u0
    basis = compute_eigenbasis(mesh, w, cfg.J1, spec)
    return SearchSpace(mesh, phi0, basis.vectors)


def asi_run(cfg: ASIConfig, problems: Sequence[ForwardProblem], observations: Sequence[ObservationSet],
            u0: np.ndarray, boundary: np.ndarray, truth: Callable[[np.ndarray], float] | None = None,
            state: ASIState | None = None, snapshot_dir=None,
            on_iteration: Callable[[dict], None] | None = None) -> ASIResult:
    """Adaptive spectral inversion with frequency stepping.

    Parameters
    ----------
    problems, observations : one forward problem and data set per frequency,
        in increasing frequency order.
    u0 : initial nodal medium (positive).
    boundary : nodal field whose boundary entries give the known medium trace.
    truth : optional callable returning the relative L2 error of a nodal medium.
    state : resume from a saved :class:`ASIState` instead of initializing.
    snapshot_dir : if given, the loop state is written there whenever the
        frequency changes and at the end.
    """
    if len(problems) != len(observations) or not problems:
        raise ValueError("need one observation set per forward problem")
    mesh = problems[0].mesh
    spec = cfg.weight
    M = _mass(mesh)
    last = len(problems) - 1
    u0 = np.asarray(u0, dtype=float)
    if np.min(u0) <= 0:
        raise NonpositiveMediumError(float(np.min(u0)))

    if state is None:
        space = initial_space(mesh, u0, boundary, cfg)
        state = ASIState(1, 0, 0, cfg.eps_psi, space, space.coefficients(u0), u0.copy(), [])
    else:
        state = replace(state, history=list(state.history))  # leave the caller's state intact
    history = state.history
    converged = False
    snapshot_dir = Path(snapshot_dir) if snapshot_dir is not None else None

    def snapshot(tag):
        if snapshot_dir is not None:
            snapshot_dir.mkdir(parents=True, exist_ok=True)
            state.save(snapshot_dir / f"snapshot_{tag}.npz")

    try:
        while state.iteration <= cfg.max_iterations:
            m = state.iteration
            p = state.freq_index
            space = state.space
            problem, obs = problems[p], observations[p]
            res = minimize_subspace(state.coeffs, space, problem, obs, tol=cfg.gtol,
                                    max_iter=cfg.bfgs_max_iter, initial_step=cfg.bfgs_initial_step)
            u_m = space.medium(res.x)
            du = u_m - state.u_prev
            update = math.sqrt(max(float(du @ (M @ du)), 0.0))
            fh = np.asarray(res.fun_history)
            row = {
                "iteration": m,
                "frequency": problem.frequency,
                "J_m": space.dimension,
                "misfit": res.fun,
                "rel_L2_error": truth(u_m) if truth is not None else float("nan"),
                "update_norm": update,
                "merged_dim": 0,
                "eps_psi": state.eps_psi,
                "bfgs_iterations": res.n_iter,
                "bfgs_evaluations": res.n_eval,
                "bfgs_converged": int(res.converged),
                "misfit_monotone": int(bool(np.all(np.diff(fh) <= 0))),
                "initial_misfit": float(fh[0]),
            }
            history.append(row)
            log.info("iter %d nu=%g J=%d misfit=%.4e err=%.4f du=%.3e", m, problem.frequency,
                     space.dimension, res.fun, row["rel_L2_error"], update)
            if res.warning:
                log.info("BFGS: %s", res.warning)

            if p == last and update < cfg.eps_tol:
                converged = True
                state = replace(state, coeffs=res.x, u_prev=u_m)
                break
            if m == cfg.max_iterations:
                state = replace(state, iteration=m + 1, coeffs=res.x, u_prev=u_m)
                break

            iters_here = state.iters_at_freq + 1
            advance = p < last and (update < cfg.eps_nu or (
                cfg.max_iter_per_frequency is not None and iters_here >= cfg.max_iter_per_frequency))

            # adapt the search space around u_m
            phi0 = compute_background(mesh, u_m, boundary, spec).values
            w = u_m - phi0
            operand = w if cfg.eig_operand == "subtracted" else u_m
            n_eigs = min(space.dimension, len(mesh.interior_nodes) - 1)
            eig = compute_eigenbasis(mesh, operand, n_eigs, spec)
            merged = merge_spaces(space, phi0, eig.vectors)
            row["merged_dim"] = merged.dimension
            indicator = filter_indicator(w, merged, state.eps_psi, spec)
            new_space, eps_new, _ = truncate_space(merged, indicator, space.dimension,
                                                   state.eps_psi, cfg.rho0, cfg.rho1)
            target = u_m if cfg.warm_start == "projection" else phi0 + indicator
            coeffs = new_space.coefficients(target)
            if np.min(new_space.medium(coeffs)) <= 0:
                coeffs = new_space.coefficients(u_m)
            state = ASIState(m + 1, p + int(advance), 0 if advance else iters_here, eps_new,
                             new_space, coeffs, u_m, history)
            if on_iteration is not None:
                on_iteration(row)
            if advance:
                snapshot(f"{m:03d}")
    except Exception as exc:  # keep partial history for the caller
        if isinstance(exc, ASIError):
            raise
        raise ASIError(f"ASI iteration {state.iteration} failed: {exc}", history) from exc

    snapshot("final")
    final_u = state.u_prev
    return ASIResult(final_u, history, state.space, converged, state)
