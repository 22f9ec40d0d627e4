"""Deterministic representation of the discrete backward (adjoint) equation.

Along any forward trajectory the backward solution is affine in the state,
``Y^m = A_Y[m] U^m + V[m]``, with ``A_Y[M] = I`` and ``V[M] = -data``.  The
matrices and vectors are obtained backward in time from

    A_Y[m] = L1 A_Y[m+1] R1 + k L2 A_Y[m+1] R2
    V[m]   = L1 V[m+1] + k L1 A_Y[m+1] P^{-1} F_m + k L2 A_Y[m+1] P^{-1} G_m

with ``R1 = P^{-1} A``, ``R2 = P^{-1} Mb3`` and ``P = Mass + k Stiff``.  The
conditional expectations of the backward scheme are eliminated exactly, so
nothing here depends on a Brownian sample.

Two choices of the left factors are available:

``"printed"``
    ``L1 = B^{-1} Mass``, ``L2 = B^{-1} Mb3`` with
    ``B = Mass - Mb2 + k Stiff + k MG``, the algebraic backward scheme as
    usually written.
``"consistent"``
    ``L1 = Mass^{-1} A^T P^{-1} Mass``, ``L2 = Mass^{-1} Mb3 P^{-1} Mass``,
    the exact discrete adjoint of the forward scheme.

Both coincide when ``b1 = 0`` and ``b2 = 0``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fem import Coefficients, FemSpace
from .sparse_linalg import Inverse, dense_from_products
from .spde_forward import SchemeOperators, TimeGrid

__all__ = [
    "AdjointRecursion",
    "build_recursion",
    "eval_Y",
    "eval_Z",
    "adjoint_state_at_zero",
    "write_recursion_norms_csv",
]

SCHEMES = ("printed", "consistent")
# Above this many interior dofs only A_Y[0] is kept; other steps are recomputed.
DENSE_STORE_LIMIT = 2000


@dataclass(eq=False)
class AdjointRecursion:
    ops: SchemeOperators
    data: np.ndarray
    scheme: str
    A0: np.ndarray  # A_Y[0]
    V_seq: np.ndarray  # (M + 1, L)
    A_seq: Optional[np.ndarray] = None  # (M + 1, L, L) when stored
    _factors: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> TimeGrid:
        return self.ops.grid

    @property
    def M(self) -> int:
        return self.ops.grid.M

    def A(self, m: int) -> np.ndarray:
        """``A_Y[m]``, recomputed from the terminal step when not stored."""
        _check_index(m, self.M)
        if self.A_seq is not None:
            return self.A_seq[m]
        if m == 0:
            return self.A0
        A = np.eye(self.ops.L)
        L1, L2, R1, R2 = self._factors["L1"], self._factors["L2"], self._factors["R1"], self._factors["R2"]
        k = self.grid.k
        for _ in range(self.M, m, -1):
            A = _step_A(A, L1, L2, R1, R2, k)
        return A

    def with_data(self, data) -> "AdjointRecursion":
        """Same matrices ``A_Y``, vectors ``V`` rebuilt for new terminal data."""
        V = _v_sequence(self, np.asarray(data, dtype=float))
        return AdjointRecursion(self.ops, np.asarray(data, dtype=float), self.scheme, self.A0, V, self.A_seq,
                                self._factors)


def _check_index(m, M):
    if not 0 <= m <= M:
        raise IndexError(f"step {m} outside 0..{M}")


def _step_A(A_next, L1, L2, R1, R2, k):
    out = L1(A_next @ R1)
    if R2 is not None:
        out = out + k * L2(A_next @ R2)
    return out


def _left_factors(ops: SchemeOperators, scheme: str):
    """``L1`` and ``L2`` as callables on dense blocks."""
    mass = ops.mass
    if scheme == "printed":
        def L1(X):
            return ops.B_solver.solve(mass @ X)

        def L2(X):
            return ops.B_solver.solve(ops.mb3 @ X)
        return L1, L2
    if scheme == "consistent":
        msolve = ops.space.mass_solver.solve
        At = ops.A.T.tocsr()

        def L1(X):
            return msolve(At @ ops.P_solver.solve(mass @ X))

        def L2(X):
            return msolve(ops.mb3 @ ops.P_solver.solve(mass @ X))
        return L1, L2
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def _v_sequence(rec: AdjointRecursion, data: np.ndarray) -> np.ndarray:
    ops = rec.ops
    M, k = rec.M, rec.grid.k
    f = rec._factors
    L1, L2 = f["L1"], f["L2"]
    V = np.empty((M + 1, ops.L))
    V[M] = -data
    forced = ops.coeffs.has_sources
    if forced:
        F, G = ops.loads
    for m in range(M - 1, -1, -1):
        v = L1(V[m + 1])
        if forced:
            A_next = rec.A(m + 1)
            v = v + k * L1(A_next @ ops.P_solver.solve(F[m]))
            if f["R2"] is not None:
                v = v + k * L2(A_next @ ops.P_solver.solve(G[m]))
        V[m] = v
    return V


def build_recursion(space: FemSpace, coeffs: Coefficients, grid: TimeGrid, data, scheme: str = "printed",
                    ops: Optional[SchemeOperators] = None, store: Optional[bool] = None) -> AdjointRecursion:
    """Compute ``A_Y[m]`` and ``V[m]`` for ``m = M..0``.

    Parameters
    ----------
    data : array
        Terminal measurement ``u_T^delta`` on interior dofs, so that
        ``Y^M = U^M - data`` is the terminal residual.
    scheme : {"printed", "consistent"}
        Choice of left factors, see the module docstring.
    store : bool, optional
        Keep the whole sequence ``A_Y[0..M]``.  Defaults to True up to
        ``DENSE_STORE_LIMIT`` interior dofs.
    """
    ops = ops or SchemeOperators(space, coeffs, grid)
    data = np.asarray(data, dtype=float)
    if data.shape != (ops.L,):
        raise ValueError(f"data must have {ops.L} interior entries")
    if store is None:
        store = ops.L <= DENSE_STORE_LIMIT
    L1, L2 = _left_factors(ops, scheme)
    Pinv = Inverse(ops.P, solver=ops.P_solver)
    R1 = dense_from_products([Pinv, ops.A])
    R2 = None if ops.noise_free else dense_from_products([Pinv, ops.mb3])
    factors = {"L1": L1, "L2": L2, "R1": R1, "R2": R2}

    M, k = grid.M, grid.k
    A = np.eye(ops.L)
    A_seq = None
    if store:
        A_seq = np.empty((M + 1, ops.L, ops.L))
        A_seq[M] = A
    for m in range(M - 1, -1, -1):
        A = _step_A(A, L1, L2, R1, R2, k)
        if not np.all(np.isfinite(A)):
            raise FloatingPointError(f"non-finite A_Y at step {m}")
        if store:
            A_seq[m] = A
    rec = AdjointRecursion(ops, data, scheme, A, np.empty(0), A_seq, factors)
    rec.V_seq = _v_sequence(rec, data)
    return rec


def eval_Y(rec: AdjointRecursion, m: int, U_m) -> np.ndarray:
    """Backward state ``Y^m = A_Y[m] U^m + V[m]``."""
    _check_index(m, rec.M)
    return rec.A(m) @ np.asarray(U_m, dtype=float) + rec.V_seq[m]


def eval_Z(rec: AdjointRecursion, m: int, U_m) -> np.ndarray:
    """Martingale part ``Z^m = A_Y[m+1] P^{-1} (Mb3 U^m + G_m)``."""
    if not 0 <= m < rec.M:
        raise IndexError(f"Z is defined for steps 0..{rec.M - 1}, got {m}")
    ops = rec.ops
    rhs = ops.mb3 @ np.asarray(U_m, dtype=float)
    if ops.coeffs.g is not None:
        rhs = rhs + ops.loads[1][m]
    return rec.A(m + 1) @ ops.P_solver.solve(rhs)


def adjoint_state_at_zero(rec: AdjointRecursion, y0) -> np.ndarray:
    """``Y^0`` for the trajectory started at ``y0``; deterministic."""
    return rec.A0 @ np.asarray(y0, dtype=float) + rec.V_seq[0]


def write_recursion_norms_csv(rec: AdjointRecursion, path) -> None:
    """Spectral norm of ``A_Y[m]`` and Euclidean norm of ``V[m]`` per step."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "t", "norm_A", "norm_V"])
        for m in range(rec.M + 1):
            w.writerow([m, repr(m * rec.grid.k), repr(float(np.linalg.norm(rec.A(m), 2))),
                        repr(float(np.linalg.norm(rec.V_seq[m])))])
