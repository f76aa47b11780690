import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from asinv.linalg import (ConvergenceError, Factorization, FactorizationError, IndefiniteError,
                          factor_solve, is_symmetric, modified_gram_schmidt, qcqp_ball,
                          smallest_eigenpairs)


def laplace_1d(n):
    h = 1.0 / (n + 1)
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]) / h ** 2, h


# -- factorization -----------------------------------------------------------

def test_lu_solves_complex_system(rng):
    A = sp.random(60, 60, density=0.1, random_state=1) + 5 * sp.eye(60)
    A = A + 1j * sp.diags(rng.random(60))
    b = rng.standard_normal((60, 3)) + 1j * rng.standard_normal((60, 3))
    x = Factorization(A).solve(b)
    assert np.allclose(A @ x, b)


def test_real_factor_complex_rhs(rng):
    K, _ = laplace_1d(30)
    b = rng.standard_normal(30) + 1j * rng.standard_normal(30)
    x = Factorization(K, spd=True).solve(b)
    assert np.allclose(K @ x, b)


def test_spd_rejects_indefinite():
    A = sp.diags([1.0, -2.0, 3.0]).tocsc()
    with pytest.raises(IndefiniteError) as exc:
        Factorization(A, spd=True)
    assert exc.value.pivot == 1


def test_singular_pivot_reported():
    A = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(FactorizationError):
        Factorization(A)


def test_zero_matrix_and_shape_errors():
    with pytest.raises(FactorizationError):
        Factorization(sp.csc_matrix((3, 3)))
    with pytest.raises(ValueError):
        Factorization(sp.csc_matrix(np.ones((2, 3))))
    with pytest.raises(ValueError):
        Factorization(sp.eye(3)).solve(np.ones(4))


def test_factor_solve_and_symmetry():
    K, _ = laplace_1d(10)
    assert is_symmetric(K)
    assert not is_symmetric(sp.csr_matrix(np.triu(np.ones((3, 3)))))
    assert np.allclose(K @ factor_solve(K, np.ones(10)), 1.0)


# -- eigenpairs --------------------------------------------------------------

def test_discrete_laplacian_spectrum():
    K, h = laplace_1d(100)
    e = smallest_eigenpairs(K, sp.eye(100), 6)
    exact = 2 / h ** 2 * (1 - np.cos(np.arange(1, 7) * np.pi * h))
    assert np.allclose(e.values, exact, rtol=1e-12)
    assert np.max(e.residuals) < 1e-8


@pytest.mark.parametrize("seed", range(8))
def test_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 120))
    A = rng.standard_normal((n, n))
    A = A @ A.T + 0.05 * n * np.eye(n)
    B = rng.standard_normal((n, n))
    B = B @ B.T / n + np.eye(n)
    if seed % 2:  # doubled spectrum
        A = np.kron(np.eye(2), A[: n // 2, : n // 2])
        B = np.kron(np.eye(2), B[: n // 2, : n // 2])
        n = A.shape[0]
    k = int(rng.integers(1, min(n - 1, 16)))
    ref = sla.eigh(A, B, eigvals_only=True)[:k]
    e = smallest_eigenpairs(sp.csr_matrix(A), sp.csr_matrix(B), k)
    assert np.allclose(e.values, ref, rtol=1e-10)
    G = e.vectors.T @ B @ e.vectors
    assert np.abs(G - np.eye(k)).max() < 1e-10
    assert np.all(np.abs(e.vectors).max(axis=0) == e.vectors.max(axis=0))  # sign convention


def test_multiplicity_recovered():
    # 2D Laplacian on a square: lambda_2 = lambda_3
    n = 12
    K1, _ = laplace_1d(n)
    I = sp.eye(n)
    K = sp.kron(K1, I) + sp.kron(I, K1)
    e = smallest_eigenpairs(K, sp.eye(n * n), 6)
    ref = np.sort(np.linalg.eigvalsh(K.toarray()))[:6]
    assert np.allclose(e.values, ref, rtol=1e-10)
    assert e.values[2] - e.values[1] < 1e-8 * e.values[1]


def test_invalid_k():
    K, _ = laplace_1d(5)
    with pytest.raises(ValueError):
        smallest_eigenpairs(K, sp.eye(5), 5)


def test_convergence_error_carries_residuals():
    err = ConvergenceError("no", residuals=[1.0])
    assert list(err.residuals) == [1.0]


# -- Gram-Schmidt ------------------------------------------------------------

def test_gram_schmidt_hand_case():
    res = modified_gram_schmidt(np.array([[1.0, 1.0], [1.0, 0.0]]))
    s = 1 / np.sqrt(2)
    assert np.allclose(res.basis, [[s, s], [s, -s]])
    res = modified_gram_schmidt(np.eye(2))
    assert np.allclose(res.basis, np.eye(2))


def test_gram_schmidt_drops_dependent_and_keeps_order(rng):
    V = rng.standard_normal((20, 4))
    V = np.column_stack([V, V[:, 0] + 2 * V[:, 2], V[:, 1]])
    res = modified_gram_schmidt(V)
    assert list(res.kept) == [0, 1, 2, 3]
    assert res.n_dropped == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_gram_schmidt_orthonormal_in_M(n, m, seed):
    rng = np.random.default_rng(seed)
    m = min(m, n)
    V = rng.standard_normal((n, m))
    C = rng.standard_normal((n, n))
    M = C @ C.T + n * np.eye(n)
    res = modified_gram_schmidt(V, M)
    Q = res.basis
    assert np.abs(Q.T @ M @ Q - np.eye(Q.shape[1])).max() < 1e-10
    # span preserved: V lies in span(Q)
    coef = Q.T @ M @ V
    assert np.allclose(Q @ coef, V, atol=1e-8 * np.abs(V).max())


# -- QCQP ----------------------------------------------------------------------

def test_qcqp_zero_feasible():
    assert np.all(qcqp_ball(np.eye(2), [0.3, 0.4], 0.5) == 0)


def test_qcqp_identity_hand_case():
    # minimizer of |b|^2 on the ball around gamma lies on the segment to zero
    b = qcqp_ball(np.eye(2), [3.0, 4.0], 1.0)
    assert np.allclose(b, [2.4, 3.2])


def test_qcqp_null_space_component():
    # second direction costs nothing, so only the first must shrink
    res = qcqp_ball(np.diag([1.0, 0.0]), [0.5, 2.0], 1.0, full_output=True)
    assert res.nu == 0.0
    assert np.allclose(res.beta, [0.0, 2.0])


def test_qcqp_rejects_bad_radius():
    with pytest.raises(ValueError):
        qcqp_ball(np.eye(2), [1.0, 1.0], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1), st.floats(0.05, 0.95))
def test_qcqp_kkt(n, seed, frac):
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((n, n))
    A = C @ C.T + 1e-3 * np.eye(n)
    gamma = rng.standard_normal(n)
    r = frac * np.linalg.norm(gamma)
    res = qcqp_ball(A, gamma, r, full_output=True)
    b = res.beta
    assert abs(np.linalg.norm(b - gamma) - r) <= 1e-9 * r
    assert res.nu > 0
    kkt = A @ b - res.nu * (gamma - b)
    assert np.linalg.norm(kkt) <= 1e-8 * max(1.0, np.linalg.norm(A @ b))
