"""Dense small-matrix kernels shared by the mixing optimizers.

Everything here operates on matrices whose order is at most a few tens
(history Gram matrices and the 2m x 2m safeguard eigenproblem), so plain
dense numpy routines are the right tool. Symmetric inputs are mirrored
before factorization so roundoff asymmetry can never leak into results.
"""

from dataclasses import dataclass

import numpy as np

# relative eigenvalue cutoff below which a PSD matrix is treated as singular
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class EigenDecomp:
    """Symmetric eigendecomposition with eigenvalues sorted descending.

    eigenvectors holds the matching orthonormal columns, so
    eigenvectors @ diag(eigenvalues) @ eigenvectors.T reconstructs the input.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _check_finite(A, name):
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")


def sym(A):
    """Mirror a square matrix into exact symmetry, (A + A.T)/2."""
    A = np.asarray(A, dtype=float)
    return (A + A.T) / 2.0


def gram(A, B):
    """Gram product A^T B of two column matrices with matching row count.

    When called with the same array for both arguments the result is made
    exactly symmetric (bitwise) so downstream eigensolves are stable.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("gram expects 2-d column matrices")
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"row mismatch: {A.shape[0]} vs {B.shape[0]}")
    G = A.T @ B
    if A is B:
        G = (G + G.T) / 2.0
    return G


def sym_eig(A):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    The input is mirrored first; non-finite entries raise. Repeated calls
    on the same input return bitwise-identical results.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("sym_eig expects a square matrix")
    _check_finite(A, "sym_eig input")
    if A.shape[0] == 0:
        return EigenDecomp(np.zeros(0), np.zeros((0, 0)))
    w, Q = np.linalg.eigh(sym(A))
    # eigh returns ascending order
    return EigenDecomp(w[::-1].copy(), Q[:, ::-1].copy())


def _clamped_inverse_eigenvalues(w, rank_rtol):
    # negative roundoff eigenvalues of PSD inputs clamp to zero, tiny
    # eigenvalues below the relative cutoff invert as zero
    w = np.where(w < 0.0, 0.0, w)
    wmax = float(w[0]) if w.size else 0.0
    cutoff = rank_rtol * max(wmax, 0.0)
    inv = np.zeros_like(w)
    keep = w > cutoff
    inv[keep] = 1.0 / w[keep]
    return inv


def pinv_solve(Z, rhs, rank_rtol=RANK_RTOL):
    """Least-norm solution of Z x = rhs for symmetric PSD Z.

    Computed as Q pinv(L) Q^T rhs from the eigendecomposition; eigenvalues
    at or below rank_rtol * lambda_max are inverted as zero.
    """
    rhs = np.asarray(rhs, dtype=float)
    _check_finite(rhs, "pinv_solve rhs")
    dec = sym_eig(Z)
    inv = _clamped_inverse_eigenvalues(dec.eigenvalues, rank_rtol)
    Q = dec.eigenvectors
    return Q @ (inv * (Q.T @ rhs))


def pinv_matrix(Z, rank_rtol=RANK_RTOL):
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix as a dense array."""
    dec = sym_eig(Z)
    inv = _clamped_inverse_eigenvalues(dec.eigenvalues, rank_rtol)
    Q = dec.eigenvectors
    return (Q * inv) @ Q.T


def lambda_max_product(W, S):
    """Largest eigenvalue of W @ S for PSD W and symmetric S.

    Computed through the symmetric similarity W^(1/2) S W^(1/2), which has
    the same nonzero spectrum as W S but needs no nonsymmetric eigensolver.
    Negative roundoff eigenvalues of W are clamped to zero before the root.
    """
    W = np.asarray(W, dtype=float)
    S = np.asarray(S, dtype=float)
    if W.shape != S.shape or W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"order mismatch: W {W.shape}, S {S.shape}")
    if W.shape[0] == 0:
        return 0.0
    dec = sym_eig(W)
    w = np.where(dec.eigenvalues < 0.0, 0.0, dec.eigenvalues)
    Q = dec.eigenvectors
    W_half = (Q * np.sqrt(w)) @ Q.T
    inner = sym(W_half @ S @ W_half)
    return float(sym_eig(inner).eigenvalues[0])
