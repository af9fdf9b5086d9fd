import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from svlab.linalg import (
    IterationError, SingularMatrixError, as_csr, dense_gen_eig_min, factorize, smallest_gen_eig,
)


def spd(n, rng, density=0.05):
    R = sp.random(n, n, density=density, random_state=rng)
    A = R + R.T
    return as_csr(A + sp.diags(np.abs(A).sum(axis=1).A1 + 1.0))


def laplace_1d(n):
    h = 1.0 / (n + 1)
    K = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]) / h
    M = sp.diags([np.ones(n - 1), 4 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) * h / 6
    return K.tocsr(), M.tocsr()


@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_csr_canonical(seed, n):
    rng = np.random.default_rng(seed)
    k = 3 * n
    rows, cols, vals = rng.integers(0, n, k), rng.integers(0, n, k), rng.normal(size=k)
    A = as_csr(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)))
    assert np.all(np.diff(A.indptr) >= 0)
    for i in range(n):
        assert np.all(np.diff(A.indices[A.indptr[i]:A.indptr[i + 1]]) > 0)
    dense = np.zeros((n, n))
    np.add.at(dense, (rows, cols), vals)
    assert np.allclose(A.toarray(), dense, atol=1e-14)


def test_identity_solve():
    b = np.random.default_rng(0).normal(size=7)
    assert np.array_equal(factorize(sp.identity(7, format="csc")).solve(b), b)


def test_two_by_two():
    x = factorize(sp.csc_matrix([[2.0, 1.0], [1.0, 2.0]])).solve([3.0, 3.0])
    assert np.allclose(x, [1.0, 1.0], atol=1e-12)


def test_random_spd_200(rng):
    A = spd(200, rng)
    b = rng.normal(size=200)
    x = factorize(A).solve(b)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_random_systems_left_inverse(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 120))
    A = sp.random(n, n, density=0.1, random_state=rng) + sp.diags(rng.uniform(2, 3, n) * n ** 0.5)
    b = rng.normal(size=n)
    F = factorize(as_csr(A))
    x = F.solve(b)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10


def test_dense_input_supported(rng):
    A = spd(30, rng).toarray()
    b = rng.normal(size=30)
    assert np.linalg.norm(A @ factorize(A).solve(b) - b) < 1e-10 * np.linalg.norm(b)


def test_singular_reports_pivot():
    A = np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(SingularMatrixError) as exc:
        factorize(A)
    assert exc.value.pivot is not None
    with pytest.raises(SingularMatrixError):
        factorize(sp.csc_matrix(A))


def test_nonsquare_rejected():
    with pytest.raises(ValueError):
        factorize(np.ones((2, 3)))


def test_gen_eig_examples():
    lam, _ = smallest_gen_eig(sp.diags([1.0, 2.0, 3.0]).tocsr(), sp.identity(3, format="csr"))
    assert lam == pytest.approx(1.0, rel=1e-10)
    lam, _ = smallest_gen_eig(sp.diags([4.0, 9.0]).tocsr(), sp.diags([2.0, 3.0]).tocsr())
    assert lam == pytest.approx(2.0, rel=1e-10)


def test_laplacian_pi_squared():
    K, M = laplace_1d(50)
    lam, x = smallest_gen_eig(K, M)
    assert abs(lam - np.pi ** 2) < 0.02 * np.pi ** 2
    assert lam == pytest.approx(dense_gen_eig_min(K, M)[0], rel=1e-8)
    assert np.linalg.norm(K @ x - lam * (M @ x)) < 1e-6 * np.linalg.norm(K @ x)


@given(seed=st.integers(0, 10_000), n=st.integers(2, 300))
def test_gen_eig_matches_dense(seed, n):
    rng = np.random.default_rng(seed)
    A = spd(n, rng, density=min(1.0, 4.0 / n))
    M = spd(n, rng, density=min(1.0, 2.0 / n))
    lam, _ = smallest_gen_eig(A, M)
    assert lam == pytest.approx(dense_gen_eig_min(A, M)[0], rel=1e-8)


def test_gen_eig_nonconvergence_carries_iterate():
    K, M = laplace_1d(50)
    with pytest.raises(IterationError) as exc:
        smallest_gen_eig(K, M, max_iter=1)
    lam, x = exc.value.last
    assert np.isfinite(lam) and x.shape == (50,)
