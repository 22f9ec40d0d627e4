"""Semi-implicit Euler stepping for the forward stochastic parabolic equation.

One step solves

    (Mass + k Stiff) U^{m+1} = A U^m + Mb3 U^m dW_{m+1} + k F_m + G_m dW_{m+1}

with ``A = -k MD + Mass + k Mb2``.  Diffusion is implicit; advection,
reaction and noise are explicit.  ``Mb2``/``Mb3`` are ``b2 Mass``/``b3 Mass``
for constant coefficients and weighted mass matrices otherwise; ``F_m`` and
``G_m`` are load vectors of ``f`` and ``g`` at the left time point.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .fem import (
    Coefficients,
    FemSpace,
    assemble_mass,
    assemble_md,
    assemble_mg,
    assemble_stiffness,
    load_vector,
)
from .sparse_linalg import LUSolver, SPDSolver

__all__ = [
    "TimeGrid",
    "BrownianPath",
    "Trajectory",
    "SchemeOperators",
    "BlowUpError",
    "sample_path",
    "forward_solve",
    "forward_terminal_batch",
    "apply_forward_map",
    "apply_linear_map",
    "write_trajectory_csv",
]

BLOWUP_NORM = 1e12


class BlowUpError(FloatingPointError):
    def __init__(self, step: int, norm: float):
        super().__init__(f"state norm {norm:.3e} exceeded threshold at step {step}")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_m = m k`` on ``[0, T]`` with ``M`` steps."""

    T: float
    M: int

    def __post_init__(self):
        if self.M < 1 or not self.T > 0:
            raise ValueError("need T > 0 and at least one step")

    @classmethod
    def from_step(cls, T: float, k: float) -> "TimeGrid":
        """Grid with step ``T / ceil(T / k)``, i.e. the largest uniform step <= k."""
        M = max(1, math.ceil(T / k - 1e-9))
        return cls(T, M)

    @classmethod
    def h_squared_rule(cls, T: float, h: float) -> "TimeGrid":
        return cls.from_step(T, h * h)

    @property
    def k(self) -> float:
        return self.T / self.M

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.k

    def check_step(self, h: float) -> bool:
        """Warn if ``k > h**2``; returns whether the rule holds."""
        ok = self.k <= h * h * (1 + 1e-12)
        if not ok:
            warnings.warn(f"time step {self.k:.3g} exceeds h^2 = {h * h:.3g}", RuntimeWarning, stacklevel=2)
        return ok


@dataclass(frozen=True, eq=False)
class BrownianPath:
    grid: TimeGrid
    increments: np.ndarray  # (M,), increments[m] = W(t_{m+1}) - W(t_m)
    seed: object = None

    @property
    def W(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.increments)])


def sample_path(grid: TimeGrid, seed) -> BrownianPath:
    """Draw i.i.d. ``N(0, k)`` increments from ``numpy.random.default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    inc = rng.normal(0.0, math.sqrt(grid.k), size=grid.M)
    return BrownianPath(grid, inc, seed)


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: TimeGrid
    states: np.ndarray  # (M + 1, L) interior coefficients

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def _weighted_mass(space: FemSpace, weight) -> sp.csr_matrix:
    if callable(weight):
        return space.restrict_matrix(assemble_mass(space, weight))
    return float(weight) * space.mass


class SchemeOperators:
    """Interior-dof matrices and factorizations of the scheme for one grid.

    Attributes follow the algebraic form of the scheme: ``mass``, ``stiff``
    (``a``-weighted), ``mg``, ``md``, ``mb2``, ``mb3``, ``A`` and ``B``
    (the latter for the backward equation), ``P = mass + k stiff``.
    """

    def __init__(self, space: FemSpace, coeffs: Coefficients, grid: TimeGrid):
        self.space = space
        self.coeffs = coeffs
        self.grid = grid
        k = grid.k
        self.mass = space.mass
        if coeffs.a is None:
            self.stiff = space.stiffness
        else:
            self.stiff = space.restrict_matrix(assemble_stiffness(space, coeffs.a))
        self.mg = space.restrict_matrix(assemble_mg(space, coeffs.b1))
        self.md = space.restrict_matrix(assemble_md(space, coeffs.b1))
        self.mb2 = _weighted_mass(space, coeffs.b2)
        self.mb3 = _weighted_mass(space, coeffs.b3)
        self.A = (-k * self.md + self.mass + k * self.mb2).tocsr()
        self.P = (self.mass + k * self.stiff).tocsr()
        self.B = (self.mass - self.mb2 + k * self.stiff + k * self.mg).tocsr()
        self.P_solver = SPDSolver(self.P)

    @property
    def L(self) -> int:
        return self.space.L

    @cached_property
    def B_solver(self) -> LUSolver:
        return LUSolver(self.B)

    @cached_property
    def noise_free(self) -> bool:
        return self.mb3.nnz == 0 or abs(self.mb3).max() == 0.0

    def source_loads(self, m: int):
        """Interior load vectors ``(F_m, G_m)`` of ``f`` and ``g`` at ``t_m``; None if absent."""
        t = m * self.grid.k
        space = self.space
        F = G = None
        if self.coeffs.f is not None:
            F = space.restrict(load_vector(space, lambda x: self.coeffs.f(t, x)))
        if self.coeffs.g is not None:
            G = space.restrict(load_vector(space, lambda x: self.coeffs.g(t, x)))
        return F, G

    @cached_property
    def loads(self):
        """All source loads as two ``(M, L)`` arrays (zeros when absent)."""
        M, L = self.grid.M, self.L
        F = np.zeros((M, L))
        G = np.zeros((M, L))
        if self.coeffs.has_sources:
            for m in range(M):
                Fm, Gm = self.source_loads(m)
                if Fm is not None:
                    F[m] = Fm
                if Gm is not None:
                    G[m] = Gm
        return F, G

    def step(self, U, m: int, dW, homogeneous: bool = False):
        """Advance ``U`` (vector or ``(L, P)`` block) from ``t_m`` to ``t_{m+1}``."""
        rhs = self.A @ U + (self.mb3 @ U) * dW
        if not homogeneous and self.coeffs.has_sources:
            F, G = self.loads
            if U.ndim == 1:
                rhs = rhs + self.grid.k * F[m] + G[m] * dW
            else:
                rhs = rhs + self.grid.k * F[m][:, None] + np.outer(G[m], dW)
        return self.P_solver.solve(rhs)

    def homogeneous(self) -> "SchemeOperators":
        """Operators of the same scheme with ``f = g = 0`` (shares matrices)."""
        if not self.coeffs.has_sources:
            return self
        twin = object.__new__(SchemeOperators)
        twin.__dict__.update({k: v for k, v in self.__dict__.items() if k != "loads"})
        twin.coeffs = self.coeffs.homogeneous()
        return twin


def _check_state(U, m):
    norm = float(np.max(np.abs(U))) if U.size else 0.0
    if not np.isfinite(norm) or norm > BLOWUP_NORM:
        raise BlowUpError(m, norm)


def forward_solve(space: FemSpace, coeffs: Coefficients, grid: TimeGrid, y0, path: BrownianPath,
                  ops: Optional[SchemeOperators] = None) -> Trajectory:
    """Run the scheme from interior coefficients ``y0`` along ``path``.

    Raises
    ------
    BlowUpError
        If the state becomes non-finite or exceeds :data:`BLOWUP_NORM`.
    """
    ops = ops or SchemeOperators(space, coeffs, grid)
    if path.grid.M != grid.M or not math.isclose(path.grid.T, grid.T):
        raise ValueError("path grid does not match time grid")
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (space.L,):
        raise ValueError(f"y0 must have {space.L} interior entries")
    states = np.empty((grid.M + 1, space.L))
    states[0] = y0
    U = y0
    for m in range(grid.M):
        U = ops.step(U, m, path.increments[m])
        _check_state(U, m + 1)
        states[m + 1] = U
    return Trajectory(grid, states)


def forward_terminal_batch(ops: SchemeOperators, y0, increments: np.ndarray, homogeneous: bool = False) -> np.ndarray:
    """Terminal states for many paths at once.

    ``increments`` has shape ``(P, M)``; ``y0`` is an interior vector or an
    ``(L, P)`` block.  Returns an ``(L, P)`` array.
    """
    increments = np.atleast_2d(increments)
    P = increments.shape[0]
    y0 = np.asarray(y0, dtype=float)
    U = np.repeat(y0[:, None], P, axis=1) if y0.ndim == 1 else y0.copy()
    for m in range(ops.grid.M):
        U = ops.step(U, m, increments[:, m], homogeneous=homogeneous)
    _check_state(U, ops.grid.M)
    return U


def apply_forward_map(space, coeffs, grid, y0, path, ops=None) -> np.ndarray:
    """Terminal state of :func:`forward_solve` (the affine forward map)."""
    return forward_solve(space, coeffs, grid, y0, path, ops).terminal


def apply_linear_map(space, coeffs, grid, y0, path, ops=None) -> np.ndarray:
    """Terminal state of the homogeneous scheme (``f = g = 0``)."""
    if ops is None:
        ops = SchemeOperators(space, coeffs.homogeneous(), grid)
    else:
        ops = ops.homogeneous()
    return forward_solve(space, ops.coeffs, grid, y0, path, ops).terminal


def write_trajectory_csv(traj: Trajectory, space: FemSpace, path) -> None:
    """One row per time step: ``t`` followed by values at every vertex."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"v{i}" for i in range(space.dof_count)])
        for t, U in zip(traj.grid.times, traj.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in space.extend(U)])
