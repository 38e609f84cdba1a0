"""Dense linear-algebra kernels shared by the solvers and the sensitivity analysis."""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla

PIVOT_TOL = 1e-13
RANK_TOL = 1e-10


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix is singular to tolerance at pivot {pivot} (|u| = {value:.3e})")


class LUFactor:
    """LU factorisation with partial pivoting, reusable across right-hand sides.

    Raises
    ------
    SingularMatrixError
        If a pivot falls below ``PIVOT_TOL * max|A|``; the failing pivot index
        (0-based, in factorisation order) is reported.
    """

    def __init__(self, A, pivot_tol: float = PIVOT_TOL):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"square matrix required, got shape {A.shape}")
        self.n = A.shape[0]
        if self.n == 0:
            self._lu = None
            return
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            self._lu = sla.lu_factor(A, check_finite=True)
        diag = np.abs(np.diag(self._lu[0]))
        scale = max(np.abs(A).max(), 1e-300)
        bad = np.flatnonzero(diag <= pivot_tol * scale)
        if bad.size:
            raise SingularMatrixError(int(bad[0]), float(diag[bad[0]]))

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self._lu is None:
            return np.zeros_like(rhs)
        return sla.lu_solve(self._lu, rhs)


def lu_solve(A, rhs) -> np.ndarray:
    """Solve ``A @ X = rhs`` by LU with partial pivoting (see :class:`LUFactor`)."""
    return LUFactor(A).solve(rhs)


def qr_orthonormal(A, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the column span of ``A`` (n x r, r = numerical rank).

    Uses column-pivoted QR; columns whose ``|R_jj|`` fall below
    ``tol * ||A||_2`` are dropped.  A zero matrix gives an n x 0 result.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    n, k = A.shape
    if k == 0 or n == 0:
        return np.zeros((n, 0))
    norm = np.linalg.norm(A, 2)
    if norm == 0:
        return np.zeros((n, 0))
    Q, R, _ = sla.qr(A, mode="economic", pivoting=True)
    r = int(np.sum(np.abs(np.diag(R)) > tol * norm))
    return Q[:, :r]


def svd_small(A) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``A = U @ diag(s) @ V.T`` with ``s`` non-increasing.

    Returns ``(U, s, V)`` (note: ``V``, not ``V.T``).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError("2-D matrix required")
    m, n = A.shape
    if m == 0 or n == 0:
        k = min(m, n)
        return np.zeros((m, k)), np.zeros(k), np.zeros((n, k))
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(A) if np.all(np.isfinite(A)) else np.inf
        raise np.linalg.LinAlgError(f"SVD did not converge (cond ~ {cond:.3e})") from exc
    return U, s, Vt.T
