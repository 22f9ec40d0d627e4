"""Carleman-weight diagnostics, stability sweeps and error statistics.

Weighted quantities use ``psi(t) = (t + 1)**lam`` and ``phi = exp(psi)``
with ``v = phi * w``.  Since ``phi**2`` overflows for moderate ``lam``, all
weighted terms are reported multiplied by ``exp(-2 psi(T))``; the common
factor is returned as ``log_scale`` and cancels in every ratio.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .fem import Coefficients, FemSpace
from .spde_forward import SchemeOperators, TimeGrid, Trajectory, apply_forward_map, sample_path
from .fbspde_adjoint import build_recursion
from .tikhonov_cg import MomentModel, RegularizationConfig, TikhonovProblem, cg_minimize

__all__ = [
    "CarlemanWeight",
    "CarlemanTerms",
    "CarlemanFit",
    "StabilityCurve",
    "homogeneous_trajectories",
    "carleman_lhs_rhs",
    "fit_carleman_constant",
    "h1_interval_error",
    "stability_exponent",
    "lambda_of_delta",
    "stability_experiment",
    "rmse",
    "write_carleman_csv",
    "write_stability_csv",
]


@dataclass(frozen=True)
class CarlemanWeight:
    lam: float

    def __post_init__(self):
        if not self.lam >= 1:
            raise ValueError(f"weight parameter must be >= 1, got {self.lam}")

    def psi(self, t):
        return (np.asarray(t, dtype=float) + 1.0) ** self.lam

    def phi(self, t):
        return np.exp(self.psi(t))


@dataclass
class CarlemanTerms:
    """Scaled sample-mean Carleman quantities; multiply by ``exp(log_scale)`` to unscale."""

    lam: float
    eps: float
    lhs: float
    terminal: float  # lam (T+1)^(lam-1) E||v(T)||^2
    initial: float  # E||v(eps)||^2
    source: float  # zero for homogeneous trajectories
    lhs_se: float
    rhs_se: float
    log_scale: float
    n_paths: int

    @property
    def rhs(self) -> float:
        return self.terminal + self.initial + self.source

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else math.inf if self.lhs > 0 else 0.0


def homogeneous_trajectories(ops: SchemeOperators, y0, increments) -> np.ndarray:
    """States of the source-free scheme for each path; shape ``(P, M + 1, L)``."""
    increments = np.atleast_2d(increments)
    P, M = increments.shape
    y0 = np.asarray(y0, dtype=float)
    out = np.empty((P, M + 1, ops.L))
    U = np.repeat(y0[:, None], P, axis=1) if y0.ndim == 1 else y0.copy()
    out[:, 0] = U.T
    for m in range(M):
        U = ops.step(U, m, increments[:, m], homogeneous=True)
        out[:, m + 1] = U.T
    return out


def _as_states(w) -> np.ndarray:
    if isinstance(w, Trajectory):
        return w.states[None]
    if isinstance(w, (list, tuple)) and w and isinstance(w[0], Trajectory):
        return np.stack([t.states for t in w])
    w = np.asarray(w, dtype=float)
    return w[None] if w.ndim == 2 else w


def _window(grid: TimeGrid, eps: float):
    """First index of the window ``[eps, T]`` (eps rounded to the grid) and trapezoid weights."""
    if not 0 <= eps < grid.T:
        raise ValueError(f"eps must lie in [0, T), got {eps}")
    m0 = int(round(eps / grid.k))
    n = grid.M + 1 - m0
    wts = np.full(n, grid.k)
    wts[0] = wts[-1] = grid.k / 2
    return m0, wts


def _sq_norms(space: FemSpace, states):
    """Per path and step ``||w||_Mass^2`` and ``|grad w|^2`` for states ``(P, n, L)``."""
    l2 = np.einsum("pni,pni->pn", states, states @ space.mass.T.toarray())
    h1 = np.einsum("pni,pni->pn", states, states @ space.stiffness.T.toarray())
    return l2, h1


def carleman_lhs_rhs(space: FemSpace, grid: TimeGrid, w, lam: float, eps: float = 0.0) -> CarlemanTerms:
    """Weighted-norm sides of the Carleman inequality for homogeneous solutions.

    ``w`` holds the trajectories of one solution along several paths,
    ``(P, M + 1, L)`` or a list of :class:`Trajectory`; the expectation is
    their sample mean.  The left side is

        E int_eps^T [lam^2 (t+1)^(lam-2) ||v||^2 + lam (t+1)^(-1) |grad v|^2] dt

    by the trapezoid rule, the right side the terminal and ``t = eps``
    terms.  The source term is zero for source-free trajectories.
    """
    weight = CarlemanWeight(lam)
    states = _as_states(w)
    m0, wts = _window(grid, eps)
    t = grid.times[m0:]
    T = grid.T
    log_scale = 2 * float(weight.psi(T))
    scaled_phi2 = np.exp(2 * weight.psi(t) - log_scale)
    l2, h1 = _sq_norms(space, states[:, m0:])
    dens = lam ** 2 * (t + 1) ** (lam - 2) * l2 + lam / (t + 1) * h1
    lhs_p = (dens * scaled_phi2) @ wts
    rhs_p = lam * (T + 1) ** (lam - 1) * l2[:, -1] + scaled_phi2[0] * l2[:, 0]
    P = states.shape[0]
    se = (lambda x: float(np.std(x, ddof=1) / math.sqrt(P))) if P > 1 else (lambda x: 0.0)
    return CarlemanTerms(lam, eps, float(lhs_p.mean()), float(np.mean(lam * (T + 1) ** (lam - 1) * l2[:, -1])),
                         float(np.mean(scaled_phi2[0] * l2[:, 0])), 0.0, se(lhs_p), se(rhs_p), log_scale, P)


@dataclass
class CarlemanFit:
    lam: float
    C: float
    calibration: CarlemanTerms
    checks: dict = field(default_factory=dict)  # lam -> list of CarlemanTerms

    def pass_fraction(self, lam: float) -> float:
        terms = self.checks[lam]
        return float(np.mean([t.lhs <= self.C * t.rhs for t in terms]))


def fit_carleman_constant(space, grid, calibration, held_out: Sequence, lam: float, eps: float = 0.0,
                          check_lams: Optional[Sequence[float]] = None) -> CarlemanFit:
    """Fit ``C = lhs / rhs`` on one calibration solution and evaluate held-out solutions.

    ``calibration`` and each entry of ``held_out`` are trajectory sets as
    accepted by :func:`carleman_lhs_rhs`.  Held-out solutions are evaluated
    at every ``check_lams`` value (default ``lam`` and ``2 lam``) with the
    same ``C``.
    """
    cal = carleman_lhs_rhs(space, grid, calibration, lam, eps)
    fit = CarlemanFit(lam, cal.ratio, cal)
    for lv in check_lams or (lam, 2 * lam):
        fit.checks[lv] = [carleman_lhs_rhs(space, grid, w, lv, eps) for w in held_out]
    return fit


def h1_interval_error(space: FemSpace, grid: TimeGrid, w, eps: float, t0: Optional[float] = None):
    """``L2(eps, T; H1)`` norm of each trajectory, and optionally the time-slice bound at ``t0``.

    The slice value is ``((t0 - eps)^{-1} int_eps^t0 ||w||_{H1}^2)^{1/2}``,
    the interval average that bounds ``||w(t0)||_{H1}`` up to a constant.
    Returns arrays over paths.
    """
    states = _as_states(w)
    m0, wts = _window(grid, eps)
    l2, h1 = _sq_norms(space, states[:, m0:])
    dens = l2 + h1
    total = np.sqrt(dens @ wts)
    if t0 is None:
        return total, None
    if not eps < t0 <= grid.T:
        raise ValueError("need eps < t0 <= T")
    m1 = int(round(t0 / grid.k)) - m0
    if m1 < 1:
        raise ValueError("t0 too close to eps for the time grid")
    w1 = np.full(m1 + 1, grid.k)
    w1[0] = w1[-1] = grid.k / 2
    slice_ = np.sqrt((dens[:, : m1 + 1] @ w1) / (m1 * grid.k))
    return total, slice_


def stability_exponent(eps: float, T: float) -> float:
    """``c = ln(eps + 1) / ln(T + 1)``."""
    return math.log(eps + 1) / math.log(T + 1)


def lambda_of_delta(delta: float, T: float) -> float:
    """Weight parameter matched to noise level ``delta``; ``-inf`` where the double log is undefined."""
    inner = math.log(delta ** (-1.0 / 3.0))
    if inner <= 0:
        return -math.inf
    return math.log(inner ** (1.0 / math.log(T + 1)))


@dataclass
class StabilityCurve:
    deltas: np.ndarray
    errors: np.ndarray  # (n_delta, runs), L2(eps,T;H1)
    slice_errors: Optional[np.ndarray]
    eps: float
    T: float
    c: float
    spearman_rho: float
    spearman_ci: tuple
    slope: float
    intercept: float
    r_squared: float
    delta0_ok: bool
    failures: int = 0

    @property
    def mean_errors(self) -> np.ndarray:
        return np.nanmean(self.errors, axis=1)

    @property
    def ci_halfwidth(self) -> np.ndarray:
        n = np.sum(np.isfinite(self.errors), axis=1)
        return 1.96 * np.nanstd(self.errors, axis=1, ddof=1) / np.sqrt(n)

    @property
    def monotone_at_95(self) -> bool:
        return self.spearman_ci[0] >= 0


def _spearman_ci(x, y, level=0.95):
    rho = stats.spearmanr(x, y).statistic
    n = len(x)
    if n <= 3 or not np.isfinite(rho):
        return float(rho), (-1.0, 1.0)
    # Fisher z with the Bonett-Wright variance for rank correlation
    se = math.sqrt((1 + rho ** 2 / 2) / (n - 3))
    z = math.atanh(min(max(rho, -0.999999), 0.999999))
    q = stats.norm.ppf(0.5 + level / 2)
    return float(rho), (math.tanh(z - q * se), math.tanh(z + q * se))


def stability_experiment(space: FemSpace, coeffs: Coefficients, grid: TimeGrid, u0, deltas, runs: int, eps: float,
                         seed: int = 0, lambda0: float = 1.0, t0: Optional[float] = None,
                         config: Optional[RegularizationConfig] = None, noise=None) -> StabilityCurve:
    """Reconstruction error versus noise level in the ``L2(eps, T; H1)`` norm.

    For every ``delta`` and run a path is sampled, noisy terminal data are
    generated from ``u0``, the initial state is reconstructed, and the
    difference of the two solutions along the same path is measured.
    ``noise(uT, delta, rng)`` perturbs the data (uniform by default).
    Reports, never asserts: the rank correlation of error with ``delta``
    and the fit of ``log(error)`` against ``-3^-c (ln 1/delta)^c``.
    """
    deltas = np.asarray(deltas, dtype=float)
    if np.any(deltas <= 0):
        raise ValueError("stability sweep needs positive noise levels")
    c = stability_exponent(eps, grid.T)
    delta0_ok = lambda_of_delta(float(deltas.max()), grid.T) >= lambda0
    if not delta0_ok:
        warnings.warn("largest noise level violates the small-noise condition for the given lambda0",
                      RuntimeWarning, stacklevel=2)
    if noise is None:
        def noise(uT, d, rng):
            return uT + d * np.max(np.abs(uT)) * 2 * (rng.random(uT.shape) - 0.5)

    u0 = np.asarray(u0, dtype=float)
    ops = SchemeOperators(space, coeffs, grid)
    rec = build_recursion(space, coeffs, grid, np.zeros(space.L), ops=ops)
    mom = MomentModel(ops)
    errors = np.full((len(deltas), runs), np.nan)
    slices = np.full((len(deltas), runs), np.nan) if t0 is not None else None
    failures = 0
    base = config or RegularizationConfig(alpha_rule="delta_squared")
    for i, d in enumerate(deltas):
        for r in range(runs):
            ss = np.random.SeedSequence([seed, i, r])
            path_seed, noise_seed = ss.spawn(2)
            path = sample_path(grid, path_seed)
            try:
                uT = apply_forward_map(space, coeffs, grid, u0, path, ops)
                data = noise(uT, d, np.random.default_rng(noise_seed))
                cfg = RegularizationConfig(**{**base.__dict__, "delta": float(d),
                                              "data_scale": float(np.max(np.abs(uT)))})
                prob = TikhonovProblem(space, coeffs, grid, data, ops=ops, recursion=rec, moments=mom)
                y_hat = cg_minimize(prob, cfg).y0
                w = homogeneous_trajectories(ops, y_hat - u0, path.increments[None])
                tot, sl = h1_interval_error(space, grid, w, eps, t0)
                errors[i, r] = tot[0]
                if slices is not None:
                    slices[i, r] = sl[0]
            except (ArithmeticError, np.linalg.LinAlgError, FloatingPointError):
                failures += 1

    ok = np.isfinite(errors)
    x_all = np.repeat(deltas[:, None], runs, axis=1)[ok]
    rho, ci = _spearman_ci(x_all, errors[ok])
    mean = np.nanmean(errors, axis=1)
    xs = -(3.0 ** -c) * np.log(1 / deltas) ** c
    if len(deltas) > 2 and np.all(mean > 0):
        fit = stats.linregress(xs, np.log(mean))
        slope, intercept, r2 = float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)
    else:
        slope = intercept = r2 = math.nan
    return StabilityCurve(deltas, errors, slices, eps, grid.T, c, rho, ci, slope, intercept, r2, delta0_ok, failures)


def rmse(u, u_ref):
    """Root-mean-square and relative l2 errors over vertex samples.

    Raises
    ------
    ValueError
        On length mismatch, or if ``u_ref`` is identically zero.
    """
    u = np.asarray(u, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    if u.shape != u_ref.shape:
        raise ValueError("u and u_ref must have the same length")
    diff2 = float(np.sum((u - u_ref) ** 2))
    ref2 = float(np.sum(u_ref ** 2))
    if ref2 == 0.0:
        raise ValueError("relative error undefined for a zero reference")
    return math.sqrt(diff2 / u.size), math.sqrt(diff2 / ref2)


def write_carleman_csv(fit: CarlemanFit, path) -> None:
    """One row per held-out solution and weight parameter."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "solution", "lhs", "rhs", "ratio", "fitted_C", "holds", "log_scale"])
        cal = fit.calibration
        w.writerow([repr(fit.lam), "calibration", repr(cal.lhs), repr(cal.rhs), repr(cal.ratio), repr(fit.C), 1,
                    repr(cal.log_scale)])
        for lam, terms in fit.checks.items():
            for j, t in enumerate(terms):
                w.writerow([repr(float(lam)), j, repr(t.lhs), repr(t.rhs), repr(t.ratio), repr(fit.C),
                            int(t.lhs <= fit.C * t.rhs), repr(t.log_scale)])


def write_stability_csv(curve: StabilityCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "mean_error", "ci_low", "ci_high", "runs"])
        half = curve.ci_halfwidth
        for d, m, hw, row in zip(curve.deltas, curve.mean_errors, half, curve.errors):
            w.writerow([repr(float(d)), repr(float(m)), repr(float(m - hw)), repr(float(m + hw)),
                        int(np.sum(np.isfinite(row)))])
