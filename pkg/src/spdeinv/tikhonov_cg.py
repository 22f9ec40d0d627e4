"""Tikhonov functional, adjoint gradient and conjugate-gradient minimization.

The functional is

    J(y0) = E || A y0 - data ||_Mass^2 + alpha |y0|_{H2}^2,

where ``A`` is the discrete forward map and ``|v|_{H2} = ||Lh v||_Mass``
with ``Lh = Mass^{-1} Stiff``.  The expectation is taken over the Brownian
driver with the measured data held fixed.  By default it is evaluated
exactly by propagating first and second moments of the scheme
(:class:`MomentModel`), which needs no sampling and does not use the
adjoint recursion.  Passing ``paths`` replaces it with a sample mean over
those paths.

The gradient is the H2-Riesz representative obtained from the adjoint
state at ``t = 0``:

    J'(y0) = 2 [ (-Delta_h)^{-2} Y^0 + alpha y0 ],

so that ``<J'(y0), v>_{H2}`` is the directional derivative of ``J``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fbspde_adjoint import AdjointRecursion, adjoint_state_at_zero, build_recursion
from .fem import Coefficients, FemSpace, inv_dirichlet_laplacian
from .sparse_linalg import Inverse, dense_from_products
from .spde_forward import BrownianPath, SchemeOperators, TimeGrid, forward_terminal_batch

__all__ = [
    "MomentModel",
    "TikhonovProblem",
    "RegularizationConfig",
    "IterationRecord",
    "CgResult",
    "CurvatureError",
    "Certificate",
    "eval_functional",
    "eval_gradient",
    "cg_minimize",
    "minimizer_certificate",
    "write_iteration_log",
]


class CurvatureError(ArithmeticError):
    pass


class MomentModel:
    """Exact mean and variance of the terminal state as functions of ``y0``.

    With ``z = (y0, 1)`` the scheme is linear in ``z`` with a random step
    matrix ``Gbar_m + dW_{m+1} S_m``.  The mean is ``E U^M = R y0 + c``.  The
    variance part ``E ||U^M - E U^M||_Mass^2 = z^T D_0 z`` follows from

        D_m = Gbar_m^T D_{m+1} Gbar_m + k S_m^T X_{m+1} S_m,   D_M = 0,
        X_m = Gbar_m^T X_{m+1} Gbar_m + k S_m^T X_{m+1} S_m,   X_M = diag(Mass, 0),

    a sum of positive semidefinite terms, so the misfit is evaluated without
    cancellation between the second moment and the squared mean.
    """

    def __init__(self, ops: SchemeOperators):
        self.ops = ops
        L, M, k = ops.L, ops.grid.M, ops.grid.k
        Pinv = Inverse(ops.P, solver=ops.P_solver)
        R1 = dense_from_products([Pinv, ops.A])
        R2 = None if ops.noise_free else dense_from_products([Pinv, ops.mb3])
        F, G = ops.loads
        pf = ops.P_solver.solve(F.T).T if ops.coeffs.f is not None else None
        pg = ops.P_solver.solve(G.T).T if ops.coeffs.g is not None else None

        D = np.zeros((L + 1, L + 1))
        if R2 is not None or pg is not None:
            X = np.zeros((L + 1, L + 1))
            X[:L, :L] = ops.mass.toarray()
            for m in range(M - 1, -1, -1):
                Gbar = np.zeros((L + 1, L + 1))
                Gbar[:L, :L] = R1
                Gbar[L, L] = 1.0
                if pf is not None:
                    Gbar[:L, L] = k * pf[m]
                S = np.zeros((L + 1, L + 1))
                if R2 is not None:
                    S[:L, :L] = R2
                if pg is not None:
                    S[:L, L] = pg[m]
                noise = k * (S.T @ X @ S)
                D = Gbar.T @ D @ Gbar + noise
                X = Gbar.T @ X @ Gbar + noise
                D = 0.5 * (D + D.T)
                X = 0.5 * (X + X.T)
        self.D0 = D

        R = np.eye(L)
        c = np.zeros(L)
        for m in range(M):
            R = R1 @ R
            c = R1 @ c
            if pf is not None:
                c = c + k * pf[m]
        self.R = R
        self.c = c

    def mean_terminal(self, y0) -> np.ndarray:
        return self.R @ y0 + self.c

    def variance(self, y0) -> float:
        z = np.append(y0, 1.0)
        return float(z @ self.D0 @ z)

    def misfit(self, y0, data) -> float:
        """``E || U^M(y0) - data ||_Mass^2``."""
        r = self.mean_terminal(y0) - data
        return float(r @ (self.ops.mass @ r)) + self.variance(y0)

    def line_terms(self, y0, d, data):
        """``(E <A y0 - data, B d>_Mass, E ||B d||_Mass^2)`` for a direction ``d``."""
        L = len(d)
        r = self.mean_terminal(y0) - data
        Rd = self.R @ d
        MRd = self.ops.mass @ Rd
        Dd = self.D0[:, :L] @ d
        z = np.append(y0, 1.0)
        return float(r @ MRd + z @ Dd), float(Rd @ MRd + d @ Dd[:L])


def _increments(paths) -> np.ndarray:
    if isinstance(paths, BrownianPath):
        paths = [paths]
    return np.array([p.increments for p in paths])


class TikhonovProblem:
    """Everything needed to evaluate ``J``, its gradient and CG line searches.

    Parameters
    ----------
    data : array
        Terminal measurement on interior dofs.
    paths : BrownianPath or sequence, optional
        If given, expectations are replaced by sample means over these
        paths; otherwise they are exact.
    scheme : {"printed", "consistent"}
        Left factors of the adjoint recursion.
    recursion, moments, ops :
        Precomputed objects for the same space, coefficients and grid, to
        share work between problems that differ only in ``data`` or
        ``alpha``.
    """

    def __init__(self, space: FemSpace, coeffs: Coefficients, grid: TimeGrid, data, alpha: float = 0.0,
                 paths=None, scheme: str = "printed", ops: Optional[SchemeOperators] = None,
                 recursion: Optional[AdjointRecursion] = None, moments: Optional[MomentModel] = None):
        self.space = space
        self.coeffs = coeffs
        self.grid = grid
        self.data = np.asarray(data, dtype=float)
        self.alpha = float(alpha)
        self.ops = ops or (recursion.ops if recursion is not None else SchemeOperators(space, coeffs, grid))
        if recursion is None:
            recursion = build_recursion(space, coeffs, grid, self.data, scheme, ops=self.ops)
        elif not np.array_equal(recursion.data, self.data):
            recursion = recursion.with_data(self.data)
        self.recursion = recursion
        self._increments = None if paths is None else _increments(paths)
        self._moments = moments
        self._lap = space.stiffness

    @property
    def moments(self) -> MomentModel:
        if self._moments is None:
            self._moments = MomentModel(self.ops)
        return self._moments

    # norms -----------------------------------------------------------------
    def h2_inner(self, u, v) -> float:
        """``<Lh u, Lh v>_Mass = (Stiff u)^T Mass^{-1} (Stiff v)``."""
        return float((self._lap @ u) @ self.space.mass_solver.solve(self._lap @ v))

    def l2_inner(self, u, v) -> float:
        return float(u @ (self.space.mass @ v))

    # forward map -------------------------------------------------------------
    def _terminal_samples(self, y0, homogeneous=False):
        return forward_terminal_batch(self.ops, y0, self._increments, homogeneous=homogeneous)

    def misfit(self, y0) -> float:
        y0 = np.asarray(y0, dtype=float)
        if self._increments is None:
            return self.moments.misfit(y0, self.data)
        r = self._terminal_samples(y0) - self.data[:, None]
        return float(np.mean(np.einsum("ip,ip->p", r, self.space.mass @ r)))

    def discrepancy(self, y0) -> float:
        """``|| E[A y0] - data ||_Mass`` (root mean square over paths if sampling)."""
        y0 = np.asarray(y0, dtype=float)
        if self._increments is None:
            r = self.moments.mean_terminal(y0) - self.data
            return math.sqrt(max(self.l2_inner(r, r), 0.0))
        return math.sqrt(max(self.misfit(y0), 0.0))

    def functional(self, y0) -> float:
        y0 = np.asarray(y0, dtype=float)
        return self.misfit(y0) + self.alpha * self.h2_inner(y0, y0)

    def adjoint_state(self, y0) -> np.ndarray:
        return adjoint_state_at_zero(self.recursion, y0)

    def gradient(self, y0) -> np.ndarray:
        y0 = np.asarray(y0, dtype=float)
        Y0 = self.adjoint_state(y0)
        smooth = inv_dirichlet_laplacian(self.space, inv_dirichlet_laplacian(self.space, Y0))
        return 2.0 * (smooth + self.alpha * y0)

    def line_terms(self, y0, d):
        """Numerator and denominator pieces of the exact step along ``d``.

        Returns ``(E<A y0 - data, B d> + alpha <y0, d>_H2,
        E||B d||^2 + alpha |d|_H2^2)`` where ``B`` is the homogeneous
        (sensitivity) map.
        """
        if self._increments is None:
            cross, curv = self.moments.line_terms(y0, d, self.data)
        else:
            r = self._terminal_samples(y0) - self.data[:, None]
            s = self._terminal_samples(d, homogeneous=True)
            Ms = self.space.mass @ s
            cross = float(np.mean(np.einsum("ip,ip->p", r, Ms)))
            curv = float(np.mean(np.einsum("ip,ip->p", s, Ms)))
        return cross + self.alpha * self.h2_inner(y0, d), curv + self.alpha * self.h2_inner(d, d)


def eval_functional(space, coeffs, grid, y0, data, alpha, paths=None, **kw) -> float:
    return TikhonovProblem(space, coeffs, grid, data, alpha, paths=paths, **kw).functional(y0)


def eval_gradient(space, coeffs, grid, y0, data, alpha, paths=None, **kw) -> np.ndarray:
    return TikhonovProblem(space, coeffs, grid, data, alpha, paths=paths, **kw).gradient(y0)


@dataclass
class RegularizationConfig:
    """Regularization parameter and stopping rule for :func:`cg_minimize`.

    With ``alpha_rule="delta_squared"`` the parameter is the square of the
    absolute noise bound ``delta * data_scale * |G|^{1/2}``, where
    ``delta`` is the relative noise level and ``data_scale`` the sup norm
    of the exact terminal state (the data's sup norm if not given).  The
    same bound, times ``tau``, is the discrepancy target.
    """

    alpha: float = 0.0
    alpha_rule: str = "fixed"
    delta: float = 0.0
    data_scale: Optional[float] = None
    max_iters: int = 200
    stop: str = "discrepancy"
    tau: float = 1.01
    grad_tol: float = 1e-8
    gamma_norm: str = "h2"

    def __post_init__(self):
        if self.alpha_rule not in ("fixed", "delta_squared"):
            raise ValueError(f"unknown alpha rule {self.alpha_rule!r}")
        if self.stop not in ("discrepancy", "gradient_norm", "max_iters"):
            raise ValueError(f"unknown stopping rule {self.stop!r}")
        if self.gamma_norm not in ("l2", "h2"):
            raise ValueError(f"unknown gamma norm {self.gamma_norm!r}")
        if self.alpha < 0 or self.delta < 0:
            raise ValueError("alpha and delta must be non-negative")

    def noise_bound(self, data, measure: float) -> float:
        scale = self.data_scale if self.data_scale is not None else float(np.max(np.abs(data), initial=0.0))
        return self.delta * scale * math.sqrt(measure)

    def resolve_alpha(self, data, measure: float) -> float:
        if self.alpha_rule == "delta_squared":
            return self.noise_bound(data, measure) ** 2
        return self.alpha


@dataclass
class IterationRecord:
    k: int
    J: float
    grad_norm: float
    beta: float
    gamma: float
    discrepancy: float


@dataclass
class CgResult:
    y0: np.ndarray
    log: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.log) - 1


def cg_minimize(problem: TikhonovProblem, config: RegularizationConfig, y0_init=None) -> CgResult:
    """Conjugate-gradient minimization of ``problem.functional``.

    ``problem.alpha`` is overwritten by ``config.resolve_alpha``.  Each
    iteration takes the Fletcher-Reeves direction built from the adjoint
    gradient and the exact minimizing step along it.  With
    ``gamma_norm="h2"`` the ratio uses the inner product in which the
    gradient is a Riesz representative, which keeps successive directions
    conjugate; ``"l2"`` uses the mass-weighted L2 norm instead.  A step that
    would increase ``J`` (possible only through rounding) is rejected and
    ends the iteration with reason ``"stagnation"``.  Running out of
    iterations or stagnating is reported through ``converged=False``, not
    raised.

    Raises
    ------
    CurvatureError
        If the step denominator is not positive and finite for a nonzero
        direction.
    """
    space = problem.space
    problem.alpha = config.resolve_alpha(problem.data, space.mesh.measure)
    norm2 = problem.l2_inner if config.gamma_norm == "l2" else problem.h2_inner
    target = config.tau * config.noise_bound(problem.data, space.mesh.measure)
    use_discrepancy = config.stop == "discrepancy" and config.delta > 0

    y = np.zeros(space.L) if y0_init is None else np.array(y0_init, dtype=float)
    g = problem.gradient(y)
    gg = norm2(g, g)
    g0 = math.sqrt(gg)
    J = problem.functional(y)
    d = None
    result = CgResult(y)

    for k in range(config.max_iters + 1):
        disc = problem.discrepancy(y)
        gnorm = math.sqrt(gg)
        if use_discrepancy and disc <= target:
            result.converged, result.reason = True, "discrepancy"
        elif config.stop != "max_iters" and not use_discrepancy and gnorm <= config.grad_tol * g0:
            result.converged, result.reason = True, "gradient_norm"
        elif gnorm == 0.0:
            result.converged, result.reason = True, "zero_gradient"
        elif k == config.max_iters:
            result.reason = "max_iters"
            result.converged = config.stop == "max_iters"
        if result.reason:
            result.log.append(IterationRecord(k, J, gnorm, math.nan, math.nan, disc))
            break

        gamma = 0.0 if d is None else gg / gg_prev
        d = -g if d is None else -g + gamma * d
        num, den = problem.line_terms(y, d)
        if not (den > 0 and math.isfinite(den) and math.isfinite(num)):
            raise CurvatureError(f"step denominator {den!r} at iteration {k}")
        beta = -num / den
        y_new = y + beta * d
        J_new = problem.functional(y_new)
        if J_new > J:
            # rounding dominates the decrease; keep the last accepted iterate
            result.reason = "stagnation"
            result.log.append(IterationRecord(k, J, gnorm, math.nan, math.nan, disc))
            break
        result.log.append(IterationRecord(k, J, gnorm, beta, gamma, disc))
        y, J = y_new, J_new
        g = problem.gradient(y)
        gg_prev, gg = gg, norm2(g, g)

    result.y0 = y
    return result


@dataclass
class Certificate:
    J_candidate: float
    J_reference: float
    holds: bool


def minimizer_certificate(problem: TikhonovProblem, y_hat, u0, tol: float = 0.0) -> Certificate:
    """Check ``J(y_hat) <= J(u0) + tol`` for a known true initial state ``u0``."""
    Jh = problem.functional(y_hat)
    Jr = problem.functional(u0)
    return Certificate(Jh, Jr, bool(Jh <= Jr + tol))


def write_iteration_log(result: CgResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "J", "grad_norm", "beta", "gamma", "discrepancy"])
        for r in result.log:
            w.writerow([r.k, repr(r.J), repr(r.grad_norm), repr(r.beta), repr(r.gamma), repr(r.discrepancy)])
