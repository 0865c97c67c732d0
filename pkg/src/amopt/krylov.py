"""Reference GMRES solvers used as equivalence oracles.

Dense, desk-scale only: the point of this module is to certify mixing
iterates against Krylov minimal-residual iterates, not to solve large
systems. Arnoldi runs modified Gram-Schmidt; the small least-squares
problem is kept triangular with Givens plane rotations.
"""

from dataclasses import dataclass, field

import numpy as np

from .smallmat import sym_eig

# subdiagonal threshold below which the Krylov space is considered closed
HAPPY_BREAKDOWN_TOL = 1e-14


@dataclass
class LinearSystem:
    """Dense symmetric positive definite system A x = b."""

    A: np.ndarray
    b: np.ndarray
    lambda_min: float = field(init=False)
    lambda_max: float = field(init=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        d = self.A.shape[0]
        if self.b.shape != (d,):
            raise ValueError(f"b must have length {d}")
        scale = max(np.max(np.abs(self.A)), 1.0)
        if np.max(np.abs(self.A - self.A.T)) > 1e-10 * scale:
            raise ValueError("A must be symmetric")
        w = sym_eig(self.A).eigenvalues
        if w[-1] <= 0.0:
            raise ValueError(f"A must be positive definite (lambda_min={w[-1]:g})")
        self.lambda_min = float(w[-1])
        self.lambda_max = float(w[0])

    @property
    def dim(self):
        return self.A.shape[0]


def _gmres_core(apply_op, map_back, x0, r0, max_k, tol):
    # returns (iterates including x0 at index 0, orthonormal basis columns)
    d = r0.shape[0]
    xs = [x0.copy()]
    beta = float(np.linalg.norm(r0))
    if beta == 0.0 or beta <= tol:
        return xs, np.zeros((d, 0))
    V = [r0 / beta]
    H = np.zeros((max_k + 1, max_k))
    cs = np.zeros(max_k)
    sn = np.zeros(max_k)
    g = np.zeros(max_k + 1)
    g[0] = beta
    for j in range(max_k):
        w = apply_op(V[j])
        for i in range(j + 1):
            H[i, j] = V[i] @ w
            w = w - H[i, j] * V[i]
        h_next = float(np.linalg.norm(w))
        H[j + 1, j] = h_next
        happy = h_next <= HAPPY_BREAKDOWN_TOL
        if not happy:
            V.append(w / h_next)
        # rotate the new column through the accumulated reflections
        for i in range(j):
            hi, hj = H[i, j], H[i + 1, j]
            H[i, j] = cs[i] * hi + sn[i] * hj
            H[i + 1, j] = -sn[i] * hi + cs[i] * hj
        denom = float(np.hypot(H[j, j], H[j + 1, j]))
        if denom == 0.0:
            xs.append(xs[-1].copy())
            break
        cs[j] = H[j, j] / denom
        sn[j] = H[j + 1, j] / denom
        H[j, j] = denom
        H[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]
        # back substitution on the triangular leading block
        y = np.zeros(j + 1)
        for i in range(j, -1, -1):
            y[i] = (g[i] - H[i, i + 1 : j + 1] @ y[i + 1 : j + 1]) / H[i, i]
        Vk = np.column_stack(V[: j + 1])
        xs.append(x0 + map_back(Vk @ y))
        if happy or abs(g[j + 1]) <= tol:
            break
    return xs, np.column_stack(V)


def gmres(sys, x0, max_k, tol, return_basis=False):
    """GMRES iterates for A x = b starting from x0.

    Returns the list [x0, x_1, ..., x_K]; iterate k minimizes the residual
    norm over x0 + K_k(A, r0). Stops early on convergence (residual <= tol)
    or happy breakdown of the Arnoldi process.
    """
    x0 = np.asarray(x0, dtype=float)
    r0 = sys.b - sys.A @ x0
    xs, V = _gmres_core(lambda v: sys.A @ v, lambda u: u, x0, r0, max_k, tol)
    if return_basis:
        return xs, V
    return xs


def gmres_right_precond(sys, M, x0, max_k, tol, return_basis=False):
    """Right-preconditioned GMRES: minimizes ||b - A x|| over
    x0 + M^-1 K_k(A M^-1, r0).

    M must be nonsingular; it is inverted once up front (desk scale).
    """
    M = np.asarray(M, dtype=float)
    if M.shape != sys.A.shape:
        raise ValueError("M must match the system dimension")
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise ValueError("M is singular") from exc
    if not np.all(np.isfinite(Minv)):
        raise ValueError("M is numerically singular")
    x0 = np.asarray(x0, dtype=float)
    r0 = sys.b - sys.A @ x0
    xs, V = _gmres_core(
        lambda v: sys.A @ (Minv @ v), lambda u: Minv @ u, x0, r0, max_k, tol
    )
    if return_basis:
        return xs, V
    return xs
