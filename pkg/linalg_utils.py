"""
EP State Evolution Toolkit - Linear Algebra Utilities
=====================================================
Dense complex linear algebra used by the engine and the Haar analysis.

CONVENTIONS:
-----------
- svd() returns full unitary factors; singular values are descending.
- For a tall full-rank M (rows > cols) the pseudo-inverse is (M^H M)^-1 M^H
  and P_parallel = M M^+ projects onto the column space (N x N).
- For a wide or square M (rows <= cols) the pseudo-inverse is M^H (M M^H)^-1
  and P_parallel = M^+ M projects onto the row space (cols x cols).
- A matrix with zero columns (the empty history of iteration 0) has an empty
  pseudo-inverse, P_parallel = 0 and P_perp = I.
"""

import logging

import numpy as np
import scipy.linalg

from models import SvdFactors
from validation import RankDeficientError, SvdConvergenceError, ValidationError

logger = logging.getLogger('epse.linalg')

RANK_TOL = 1e-10


def svd(A: np.ndarray) -> SvdFactors:
    """
    Full SVD A = U (Sigma, 0) V^H.

    gesdd is tried first; on non-convergence the slower but more robust
    gesvd driver is used before giving up.

    Args:
        A: M x N complex matrix with min(M, N) >= 1

    Returns:
        SvdFactors with unitary left (M x M) and right (N x N)

    Raises:
        ValidationError: non-finite entries or an empty dimension
        SvdConvergenceError: both LAPACK drivers failed
    """
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or min(A.shape) < 1:
        raise ValidationError(f"svd needs a 2-D matrix with both dimensions >= 1, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValidationError("svd input contains NaN or Inf")

    for driver in ('gesdd', 'gesvd'):
        try:
            u, s, vh = scipy.linalg.svd(A, full_matrices=True, lapack_driver=driver)
            return SvdFactors(left=u, singular=s, right=vh.conj().T)
        except np.linalg.LinAlgError:
            logger.warning(f"{driver} did not converge on a {A.shape[0]}x{A.shape[1]} matrix")
    raise SvdConvergenceError(*A.shape)


def _check_full_rank(singular, shape):
    if singular.size == 0:
        return
    largest = float(singular[0])
    smallest = float(singular[-1])
    if largest == 0.0 or smallest <= RANK_TOL * largest:
        raise RankDeficientError(
            f"{shape[0]}x{shape[1]} matrix is rank deficient "
            f"(sigma_min={smallest:.3e}, sigma_max={largest:.3e})",
            shape=shape, smallest=smallest, largest=largest
        )


def pseudo_inverse(M: np.ndarray) -> np.ndarray:
    """
    Moore-Penrose inverse of a full-rank matrix.

    Evaluated from the SVD, which equals (M^H M)^-1 M^H for tall M and
    M^H (M M^H)^-1 otherwise.

    Raises:
        RankDeficientError: sigma_min <= 1e-10 sigma_max
    """
    M = np.asarray(M, dtype=complex)
    rows, cols = M.shape
    if rows == 0 or cols == 0:
        return np.zeros((cols, rows), dtype=complex)
    f = svd(M)
    _check_full_rank(f.singular, M.shape)
    k = len(f.singular)
    return (f.right[:, :k] / f.singular) @ f.left[:, :k].conj().T


def proj_parallel(M: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto the column space (tall) or row space (wide)."""
    M = np.asarray(M, dtype=complex)
    rows, cols = M.shape
    if cols == 0:
        return np.zeros((rows, rows), dtype=complex)
    if rows == 0:
        return np.zeros((cols, cols), dtype=complex)
    f = svd(M)
    _check_full_rank(f.singular, M.shape)
    k = len(f.singular)
    if rows > cols:
        basis = f.left[:, :k]
    else:
        basis = f.right[:, :k]
    return basis @ basis.conj().T


def proj_perp(M: np.ndarray) -> np.ndarray:
    """I - proj_parallel(M)."""
    P = proj_parallel(M)
    return np.eye(P.shape[0], dtype=complex) - P


def left_bases(M: np.ndarray):
    """
    Split the left singular vectors of a tall (or empty) matrix.

    Returns:
        (Phi, Phi_parallel, Phi_perp) with Phi_parallel holding rank(M)
        columns. For an N x 0 matrix Phi = I_N and Phi_parallel is empty.
    """
    M = np.asarray(M, dtype=complex)
    rows, cols = M.shape
    if cols == 0:
        Phi = np.eye(rows, dtype=complex)
        return Phi, Phi[:, :0], Phi
    f = svd(M)
    _check_full_rank(f.singular, M.shape)
    k = min(rows, cols)
    return f.left, f.left[:, :k], f.left[:, k:]


def right_bases(M: np.ndarray):
    """
    Split the right singular vectors of a wide (or empty) matrix.

    Returns:
        (Psi, Psi_parallel, Psi_perp); for a 0 x N matrix Psi = I_N.
    """
    M = np.asarray(M, dtype=complex)
    rows, cols = M.shape
    if rows == 0:
        Psi = np.eye(cols, dtype=complex)
        return Psi, Psi[:, :0], Psi
    f = svd(M)
    _check_full_rank(f.singular, M.shape)
    k = min(rows, cols)
    return f.right, f.right[:, :k], f.right[:, k:]


def relative_residual(lhs: np.ndarray, rhs: np.ndarray) -> float:
    """||lhs - rhs||_F / max(||rhs||_F, ||lhs||_F, tiny)."""
    scale = max(np.linalg.norm(lhs), np.linalg.norm(rhs), np.finfo(float).tiny)
    return float(np.linalg.norm(lhs - rhs) / scale)
