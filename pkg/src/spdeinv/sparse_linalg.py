"""Small sparse linear algebra kernel.

Matrices are plain :mod:`scipy.sparse` CSR matrices; this module adds the
handful of operations the discretization needs on top of them: checked
products, factor-once SPD solves, and dense products of chains that may
contain inverse factors.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "DimensionError",
    "IndefiniteMatrixError",
    "NonConvergenceError",
    "Inverse",
    "SPDSolver",
    "LUSolver",
    "finalize",
    "identity",
    "is_symmetric",
    "spmv",
    "solve_spd",
    "pcg",
    "dense_from_products",
]

# Dense Cholesky is used up to this many unknowns; PCG above it.
DENSE_LIMIT = 3000
DEFAULT_TOL = 1e-10


class DimensionError(ValueError):
    pass


class IndefiniteMatrixError(np.linalg.LinAlgError):
    pass


class NonConvergenceError(RuntimeError):
    """Raised by iterative solves; ``residual`` holds the final relative residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def finalize(rows, cols, vals, shape) -> sp.csr_matrix:
    """Assemble triplets into CSR, summing duplicate entries."""
    m = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def identity(n: int) -> sp.csr_matrix:
    return sp.identity(n, format="csr")


def is_symmetric(m, tol: float = 1e-12) -> bool:
    """Entrywise check ``|m_ij - m_ji| <= tol * max|m|``."""
    m = sp.csr_matrix(m)
    if m.shape[0] != m.shape[1]:
        return False
    if m.nnz == 0:
        return True
    scale = abs(m).max()
    diff = abs(m - m.T)
    return diff.nnz == 0 or diff.max() <= tol * scale


def spmv(m, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if m.shape[1] != x.shape[0]:
        raise DimensionError(f"matrix has {m.shape[1]} columns, vector has length {x.shape[0]}")
    return np.asarray(m @ x)


def pcg(m, rhs, tol=DEFAULT_TOL, maxiter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients with a curvature check.

    Raises
    ------
    IndefiniteMatrixError
        If a search direction with non-positive curvature is met.
    NonConvergenceError
        If ``maxiter`` iterations do not reach ``tol`` relative residual.
    """
    b = np.asarray(rhs, dtype=float)
    n = b.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    maxiter = maxiter or 10 * n
    diag = m.diagonal()
    if np.any(diag <= 0):
        raise IndefiniteMatrixError("non-positive diagonal entry")
    dinv = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - m @ x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        q = m @ p
        curv = p @ q
        if curv <= 0:
            raise IndefiniteMatrixError("non-positive curvature in PCG")
        step = rz / curv
        x += step * p
        r -= step * q
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(r) / bnorm
    if res <= tol:
        return x
    raise NonConvergenceError(f"PCG did not converge in {maxiter} iterations", res)


class SPDSolver:
    """Factor-once solver for a symmetric positive definite matrix.

    Dense Cholesky below :data:`DENSE_LIMIT` unknowns, PCG otherwise.
    ``solve`` accepts a vector or a 2-D block of right-hand sides.
    """

    def __init__(self, m, tol: float = DEFAULT_TOL):
        m = sp.csr_matrix(m)
        if m.shape[0] != m.shape[1]:
            raise DimensionError("SPD solve needs a square matrix")
        self.matrix = m
        self.tol = tol
        self.n = m.shape[0]
        self._chol = None
        if self.n <= DENSE_LIMIT:
            try:
                self._chol = la.cho_factor(m.toarray(), lower=True, check_finite=True)
            except la.LinAlgError as exc:
                raise IndefiniteMatrixError("matrix is not positive definite") from exc

    def solve(self, rhs) -> np.ndarray:
        b = np.asarray(rhs, dtype=float)
        if b.shape[0] != self.n:
            raise DimensionError(f"rhs has {b.shape[0]} rows, matrix is {self.n}x{self.n}")
        if self._chol is not None:
            return la.cho_solve(self._chol, b, check_finite=False)
        if b.ndim == 1:
            return pcg(self.matrix, b, self.tol)
        return np.column_stack([pcg(self.matrix, col, self.tol) for col in b.T])


class LUSolver:
    """Factor-once solver for a general square matrix (dense LU or SuperLU)."""

    def __init__(self, m):
        m = sp.csc_matrix(m)
        if m.shape[0] != m.shape[1]:
            raise DimensionError("LU solve needs a square matrix")
        self.n = m.shape[0]
        if self.n <= DENSE_LIMIT:
            self._lu = la.lu_factor(m.toarray())
            self._splu = None
        else:
            self._lu = None
            self._splu = spla.splu(m)

    def solve(self, rhs) -> np.ndarray:
        b = np.asarray(rhs, dtype=float)
        if b.shape[0] != self.n:
            raise DimensionError(f"rhs has {b.shape[0]} rows, matrix is {self.n}x{self.n}")
        if self._lu is not None:
            return la.lu_solve(self._lu, b, check_finite=False)
        return self._splu.solve(b)


def solve_spd(m, rhs, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Solve ``m x = rhs`` for SPD ``m`` to relative residual ``tol``."""
    x = SPDSolver(m, tol).solve(rhs)
    b = np.asarray(rhs, dtype=float)
    bnorm = np.linalg.norm(b)
    res = np.linalg.norm(m @ x - b)
    if res > tol * bnorm:
        # one step of iterative refinement for the direct path
        x = x + SPDSolver(m, tol).solve(b - m @ x)
        res = np.linalg.norm(m @ x - b)
        if res > tol * bnorm:
            raise NonConvergenceError("SPD solve missed the residual tolerance", res / bnorm)
    return x


class Inverse:
    """Marks a factor of :func:`dense_from_products` to be applied by solves.

    ``solver`` may be given to reuse an existing factorization.
    """

    def __init__(self, matrix, solver=None, spd: bool = True):
        self.matrix = matrix
        self.shape = matrix.shape
        if solver is None:
            solver = SPDSolver(matrix) if spd else LUSolver(matrix)
        self.solver = solver


def dense_from_products(factors) -> np.ndarray:
    """Evaluate a chain of sparse/dense/:class:`Inverse` factors as a dense matrix.

    The product is accumulated from the right, so every inverse factor is
    applied to a dense block by columnwise solves and never formed.
    """
    factors = list(factors)
    if not factors:
        raise ValueError("empty product")
    for left, right in zip(factors[:-1], factors[1:]):
        if left.shape[1] != right.shape[0]:
            raise DimensionError(f"cannot chain {left.shape} with {right.shape}")
    last = factors[-1]
    if isinstance(last, Inverse):
        acc = last.solver.solve(np.eye(last.shape[0]))
    elif sp.issparse(last):
        acc = last.toarray()
    else:
        acc = np.array(last, dtype=float)
    for f in reversed(factors[:-1]):
        if isinstance(f, Inverse):
            acc = f.solver.solve(acc)
        else:
            acc = np.asarray(f @ acc)
    return acc
