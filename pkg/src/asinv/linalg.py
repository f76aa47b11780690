"""Sparse direct solves, a shift-invert Lanczos eigensolver, Gram-Schmidt and
the ball-constrained quadratic subproblem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class FactorizationError(ArithmeticError):
    """Singular (or numerically singular) pivot; ``pivot`` is a matrix column or None."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message if pivot is None else f"{message} (pivot column {pivot})")
        self.pivot = pivot


class IndefiniteError(FactorizationError):
    """A matrix claimed positive definite produced a nonpositive pivot."""


class ConvergenceError(ArithmeticError):
    """Iterative method stopped before meeting its tolerance."""

    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = None if residuals is None else np.asarray(residuals)


def is_symmetric(A, rtol: float = 1e-14) -> bool:
    """Pattern and value symmetry ``A == A.T`` to ``rtol`` relative (not Hermitian)."""
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        return False
    D = (A - A.T).tocsr()
    D.eliminate_zeros()
    if D.nnz == 0:
        return True
    scale = abs(A).max()
    return bool(abs(D).max() <= rtol * scale)


# ---------------------------------------------------------------------------
# direct factorization

class Factorization:
    """Reusable sparse LU factorization (SuperLU with a fill-reducing ordering).

    With ``spd=True`` the factorization uses diagonal pivoting on a
    symmetric ordering, which is a Cholesky-type LDL^T factorization; a
    nonpositive pivot raises :class:`IndefiniteError`.
    """

    def __init__(self, A, spd: bool = False):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.shape = A.shape
        self.dtype = A.dtype
        self.spd = spd
        self._norm1 = float(abs(A).sum(axis=0).max()) if A.nnz else 0.0
        if A.nnz == 0:
            raise FactorizationError("matrix is zero", 0)
        try:
            if spd:
                self._lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                     options=dict(SymmetricMode=True))
            else:
                self._lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise FactorizationError(f"factorization failed: {exc}", _zero_column(A)) from None
        d = self._lu.U.diagonal()
        if spd:
            if not np.array_equal(self._lu.perm_r, self._lu.perm_c) or np.any(np.real(d) <= 0):
                bad = int(np.argmin(np.real(d)))
                raise IndefiniteError("matrix is not positive definite", self._column(bad))
        absd = np.abs(d)
        if not np.all(np.isfinite(absd)) or absd.min() <= 1e-14 * absd.max():
            raise FactorizationError("numerically singular pivot", self._column(int(np.argmin(absd))))

    def _column(self, j: int) -> int:
        return int(np.argsort(self._lu.perm_c)[j])

    @property
    def n(self) -> int:
        return self.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b)
        if b.shape[0] != self.n:
            raise ValueError("right-hand side length mismatch")
        if np.iscomplexobj(self.dtype.type(0)) or not np.iscomplexobj(b):
            return self._lu.solve(np.ascontiguousarray(b, dtype=np.result_type(b, self.dtype)))
        # real factor, complex data
        return self._lu.solve(np.ascontiguousarray(b.real)) + 1j * self._lu.solve(
            np.ascontiguousarray(b.imag))


def _zero_column(A: sp.csc_matrix) -> int | None:
    counts = np.diff(A.indptr)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        return int(empty[0])
    rows = np.bincount(A.indices, minlength=A.shape[0])
    empty = np.flatnonzero(rows == 0)
    return int(empty[0]) if len(empty) else None


def factorize(A, spd: bool = False) -> Factorization:
    return Factorization(A, spd=spd)


def factor_solve(A, b):
    """Solve ``A x = b``; ``b`` may hold several right-hand sides as columns."""
    return Factorization(A).solve(b)


# ---------------------------------------------------------------------------
# generalized symmetric eigenproblem

@dataclass
class EigenPairs:
    """Ascending eigenvalues and M-orthonormal eigenvectors (columns)."""

    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    matvecs: int = 0

    def __len__(self) -> int:
        return len(self.values)


class _Lanczos:
    """Thick-restart Lanczos for ``OP = K^{-1} M`` in the M inner product.

    Vectors in ``locked`` are deflated: every Krylov vector is kept M-orthogonal
    to them, so the run sees only the complementary invariant subspace.
    """

    def __init__(self, K, M, solver, rng, locked):
        self.K, self.M, self.solver, self.rng = K, M, solver, rng
        self.n = K.shape[0]
        self.locked = locked
        self.locked_M = M @ locked if locked.shape[1] else locked
        self.matvecs = 0

    def _orthogonalize(self, w, V, MV, j):
        """Two passes of Gram-Schmidt against locked vectors and V[:, :j]."""
        h = np.zeros(j)
        for _ in range(2):
            if self.locked.shape[1]:
                w = w - self.locked @ (self.locked_M.T @ w)
            c = MV[:, :j].T @ w
            w = w - V[:, :j] @ c
            h += c
        return w, h

    def _random_start(self, V, MV, j):
        for _ in range(10):
            w = self.rng.standard_normal(self.n)
            w, _ = self._orthogonalize(w, V, MV, j)
            nrm = np.sqrt(w @ (self.M @ w))
            if nrm > 1e-8 * np.sqrt(self.n):
                return w / nrm
        raise ConvergenceError("could not generate an independent start vector")

    def run(self, k, ncv, tol, max_matvecs):
        n_free = self.n - self.locked.shape[1]
        ncv = min(ncv, n_free)
        k = min(k, n_free)
        V = np.zeros((self.n, ncv + 1))
        MV = np.zeros_like(V)
        H = np.zeros((ncv + 1, ncv + 1))
        v = self._random_start(V, MV, 0)
        V[:, 0] = v
        MV[:, 0] = self.M @ v
        p = 0  # number of vectors carried over from the last restart
        while True:
            for j in range(p, ncv):
                w = self.solver.solve(MV[:, j])
                self.matvecs += 1
                w, h = self._orthogonalize(w, V, MV, j + 1)
                H[: j + 1, j] = h
                Mw = self.M @ w
                beta = np.sqrt(max(w @ Mw, 0.0))
                scale = max(np.abs(h).max(), 1e-300)
                if j + 1 == n_free:
                    beta = 0.0
                    break
                if beta <= 1e-12 * scale:
                    # invariant subspace found: continue with a fresh direction
                    H[j + 1, j] = 0.0
                    V[:, j + 1] = self._random_start(V, MV, j + 1)
                    MV[:, j + 1] = self.M @ V[:, j + 1]
                else:
                    H[j + 1, j] = beta
                    V[:, j + 1] = w / beta
                    MV[:, j + 1] = Mw / beta
            m = j + 1
            T = np.triu(H[:m, :m])
            T = T + np.triu(T, 1).T
            theta, S = np.linalg.eigh(T)
            order = np.argsort(-theta)
            theta, S = theta[order], S[:, order]
            resid = np.abs(H[m, m - 1] * S[m - 1, :]) if m < V.shape[1] and m < n_free else np.zeros(m)
            conv = resid[:k] <= tol * np.abs(theta[:k])
            if np.all(conv) or m == n_free:
                X = V[:, :m] @ S[:, :k]
                return X, self.matvecs
            if self.matvecs >= max_matvecs:
                raise ConvergenceError(
                    f"Lanczos did not converge within {max_matvecs} operator applications",
                    resid[:k] / np.abs(theta[:k]))
            # thick restart with the leading Ritz vectors
            p = min(ncv - 1, k + max(1, (ncv - k) // 2))
            Y = V[:, :m] @ S[:, :p]
            MY = MV[:, :m] @ S[:, :p]
            b = H[m, m - 1] * S[m - 1, :p]
            vnext, Mvnext = V[:, m].copy(), MV[:, m].copy()
            V[:] = 0.0
            MV[:] = 0.0
            H[:] = 0.0
            V[:, :p] = Y
            MV[:, :p] = MY
            V[:, p] = vnext
            MV[:, p] = Mvnext
            H[:p, :p] = np.diag(theta[:p])
            H[p, :p] = b
            H[:p, p] = b


def smallest_eigenpairs(K, M, k: int, tol: float = 1e-10, ncv: int | None = None,
                        max_matvecs: int | None = None, seed: int = 0,
                        factor: Factorization | None = None) -> EigenPairs:
    """The ``k`` algebraically smallest eigenpairs of ``K v = lambda M v``.

    Shift-invert (sigma = 0) Lanczos with full reorthogonalization and thick
    restarts. Repeated eigenvalues, which a single Krylov sequence cannot
    resolve, are recovered by rerunning on the M-orthogonal complement of the
    pairs found so far until no smaller eigenvalue appears.

    Parameters
    ----------
    K, M : sparse symmetric positive definite matrices.
    k : number of pairs, ``1 <= k < n``.
    tol : relative Ritz residual tolerance.
    max_matvecs : cap on inverse applications per run (default ``50 k``, at least 200).

    Returns
    -------
    EigenPairs
        Ascending values, M-orthonormal vectors with the largest-magnitude
        entry positive, and relative residuals ``|Kv - lambda M v| / |Kv|``.
    """
    K = sp.csr_matrix(K)
    M = sp.csr_matrix(M)
    n = K.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    solver = factor if factor is not None else Factorization(K, spd=True)
    ncv = ncv or max(2 * k + 1, k + 20)
    max_matvecs = max_matvecs or max(50 * k, 200)
    rng = np.random.default_rng(seed)

    locked = np.zeros((n, 0))
    total = 0
    X, mv = _Lanczos(K, M, solver, rng, locked).run(k, ncv, tol, max_matvecs)
    total += mv
    X, lam = _rayleigh_ritz(K, M, X)
    for _ in range(k):  # each pass adds at least one missing copy
        free = n - X.shape[1]
        if free <= 0:
            break
        kc = min(free, max(3, k // 4))
        run = _Lanczos(K, M, solver, rng, X)
        Xc, mv = run.run(kc, min(ncv, free), tol, max_matvecs)
        total += mv
        Xc, lam_c = _rayleigh_ritz(K, M, Xc)
        if lam_c[0] >= lam[-1] * (1.0 - 1e3 * tol):
            break
        X, lam = _rayleigh_ritz(K, M, np.hstack([X, Xc[:, lam_c < lam[-1]]]))
        X, lam = X[:, :k], lam[:k]
    X, lam = _rayleigh_ritz(K, M, X)
    X = _fix_signs(X)
    KX = K @ X
    res = np.linalg.norm(KX - (M @ X) * lam, axis=0) / np.maximum(np.linalg.norm(KX, axis=0), 1e-300)
    return EigenPairs(lam, X, res, total)


def _rayleigh_ritz(K, M, X):
    """M-orthonormalize ``X`` and diagonalize the projected pencil; ascending."""
    MX = M @ X
    G = X.T @ MX
    G = 0.5 * (G + G.T)
    A = X.T @ (K @ X)
    A = 0.5 * (A + A.T)
    lam, S = sla.eigh(A, G)
    Y = X @ S
    # one more step of M-orthonormalization to clean rounding
    L = np.linalg.cholesky(Y.T @ (M @ Y))
    Y = sla.solve_triangular(L, Y.T, lower=True).T
    A = Y.T @ (K @ Y)
    lam, S = np.linalg.eigh(0.5 * (A + A.T))
    return Y @ S, lam


def _fix_signs(X):
    idx = np.argmax(np.abs(X), axis=0)
    s = np.sign(X[idx, np.arange(X.shape[1])])
    s[s == 0] = 1.0
    return X * s


# ---------------------------------------------------------------------------
# Gram-Schmidt

@dataclass
class GramSchmidtResult:
    basis: np.ndarray
    kept: np.ndarray
    n_dropped: int


def modified_gram_schmidt(vectors, M=None, drop_tol: float = 1e-10) -> GramSchmidtResult:
    """Orthonormalize columns in order against the inner product ``x^T M y``.

    Each vector is projected against all kept ones twice (Gram-Schmidt with
    one full reorthogonalization, which gives orthogonality to working
    precision like modified Gram-Schmidt). A vector whose remaining norm is
    at most ``drop_tol`` times its original norm is dropped, so earlier
    vectors win.
    """
    V = np.asarray(vectors, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    n, m = V.shape
    Q = np.zeros((n, m))
    MQ = np.zeros((n, m))
    MV = V if M is None else np.asarray(M @ V)
    kept = []
    for j in range(m):
        v = V[:, j].copy()
        norm0 = np.sqrt(max(v @ MV[:, j], 0.0))
        if norm0 == 0.0:
            continue
        r = len(kept)
        if r:
            for _ in range(2):
                v -= Q[:, :r] @ (MQ[:, :r].T @ v)
        Mv = v if M is None else M @ v
        nrm = np.sqrt(max(v @ Mv, 0.0))
        if nrm <= drop_tol * norm0:
            continue
        Q[:, r] = v / nrm
        MQ[:, r] = Mv / nrm
        kept.append(j)
    r = len(kept)
    return GramSchmidtResult(Q[:, :r], np.array(kept, dtype=int), m - r)


# ---------------------------------------------------------------------------
# ball-constrained quadratic

@dataclass
class QCQPResult:
    beta: np.ndarray
    nu: float
    distance: float


def qcqp_ball(A, gamma, r: float, full_output: bool = False, rtol: float = 1e-12):
    """Minimize ``b^T A b`` subject to ``|b - gamma| <= r`` for symmetric PSD ``A``.

    Zero is returned when it is feasible. Otherwise the multiplier ``nu > 0``
    of ``A b = nu (gamma - b)`` is the root of the secular equation
    ``|b(nu) - gamma| = r``, found by safeguarded Newton iteration on
    ``1/|b(nu) - gamma| - 1/r`` inside a bisection bracket.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    gamma = np.asarray(gamma, dtype=float).ravel()
    if A.shape != (len(gamma), len(gamma)):
        raise ValueError("A and gamma dimensions differ")
    gnorm = np.linalg.norm(gamma)
    if gnorm <= r:
        out = QCQPResult(np.zeros_like(gamma), 0.0, gnorm)
        return out if full_output else out.beta
    lam, Q = np.linalg.eigh(0.5 * (A + A.T))
    lam = np.where(lam <= rtol * max(lam.max(), 0.0), 0.0, lam)
    g = Q.T @ gamma
    pos = lam > 0
    d0 = np.linalg.norm(g[pos])
    if d0 <= r:
        # nu -> 0: the null-space component of gamma is feasible with zero cost
        beta = Q[:, ~pos] @ g[~pos]
        out = QCQPResult(beta, 0.0, d0)
        return out if full_output else out.beta

    lp, gp = lam[pos], g[pos]

    def dist(nu):
        return np.linalg.norm(lp * gp / (lp + nu))

    def phi(nu):
        d = dist(nu)
        c = lp * gp / (lp + nu)
        dprime = -np.sum(c ** 2 / (lp + nu)) / d
        return 1.0 / d - 1.0 / r, -dprime / d ** 2

    lo, hi = 0.0, lp.max() * d0 / r
    nu = min(hi, max(lp.min() * (d0 / r - 1.0), 0.5 * hi * 1e-3))
    for _ in range(200):
        f, fp = phi(nu)
        if abs(dist(nu) - r) <= 1e-14 * r:
            break
        if f < 0:
            lo = nu
        else:
            hi = nu
        step = nu - f / fp if fp > 0 else None
        nu = step if step is not None and lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 1e-16 * hi:
            break
    c = nu / (lam + nu)
    beta = Q @ (c * g)
    out = QCQPResult(beta, float(nu), float(np.linalg.norm(beta - gamma)))
    return out if full_output else out.beta
