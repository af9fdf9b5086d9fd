"""Sparse direct solves and the smallest generalized eigenpair.

Sparse storage is scipy's CSR; factorization is SuperLU (partial pivoting with
a COLAMD fill-reducing ordering). Dense inputs are accepted everywhere and
routed to LAPACK.
"""
from __future__ import annotations

import logging
import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-14


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, msg, pivot=None):
        super().__init__(msg)
        self.pivot = pivot


class IterationError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


def as_csr(A) -> sp.csr_matrix:
    """Canonical CSR: sorted column indices, duplicates summed."""
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    return A


class Factorization:
    """Reusable LU factorization of a square matrix."""

    def __init__(self, A):
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.shape = A.shape
        self.dense = not sp.issparse(A)
        scale = abs(A).max() if A.size else 0.0
        if self.dense:
            A = np.asarray(A, dtype=float)
            with warnings.catch_warnings():
                # exact zero pivots are reported below as SingularMatrixError
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu, piv = sla.lu_factor(A, check_finite=True)
            diag = np.abs(np.diag(lu))
            self._lu = (lu, piv)
        else:
            A = sp.csc_matrix(A, dtype=float)
            try:
                self._lu = spla.splu(A)
            except RuntimeError as exc:
                raise SingularMatrixError(f"sparse LU failed: {exc}") from exc
            diag = np.abs(self._lu.U.diagonal())
        bad = np.flatnonzero(diag <= PIVOT_TOL * max(scale, np.finfo(float).tiny))
        if len(bad):
            raise SingularMatrixError(f"pivot {bad[0]} below {PIVOT_TOL:g} * max|A|", pivot=int(bad[0]))

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self.dense:
            return sla.lu_solve(self._lu, b)
        return self._lu.solve(b)


def factorize(A) -> Factorization:
    return Factorization(A)


def smallest_gen_eig(A, M, tol: float = 1e-10, max_iter: int = 20000, seed: int = 0):
    """Smallest eigenpair of A x = lam M x (A, M symmetric positive definite).

    Inverse iteration with Rayleigh-quotient estimates, reusing a single
    factorization of A. Stops when successive estimates agree to tol * lam
    and the relative eigen-residual is below 1e3 * tol, which guards against
    stalling on clustered spectra.
    """
    n = A.shape[0]
    if M.shape != A.shape:
        raise ValueError("A and M must have the same shape")
    F = factorize(A)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    Mx = M @ x
    x /= np.sqrt(x @ Mx)
    lam_old = np.inf
    for it in range(1, max_iter + 1):
        y = F.solve(M @ x)
        My = M @ y
        y /= np.sqrt(y @ My)
        Ay = A @ y
        lam = float(y @ Ay)
        x = y
        res = np.linalg.norm(Ay - lam * (M @ y)) / np.linalg.norm(Ay)
        if abs(lam - lam_old) < tol * abs(lam) and res < 1e3 * tol:
            log.debug("inverse iteration converged in %d steps", it)
            return lam, x
        lam_old = lam
    raise IterationError(f"inverse iteration did not converge in {max_iter} steps", last=(lam, x))


def dense_gen_eig_min(A, M):
    """Reference: smallest eigenvalue of the symmetric-definite pencil by LAPACK."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    M = M.toarray() if sp.issparse(M) else np.asarray(M)
    w, V = sla.eigh(A, M)
    return float(w[0]), V[:, 0]
