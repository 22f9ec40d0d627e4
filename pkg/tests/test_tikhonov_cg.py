import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdeinv import tikhonov_cg as tc
from spdeinv.fem import Coefficients, FemSpace, build_interval_mesh, interpolate
from spdeinv.sparse_linalg import Inverse, dense_from_products
from spdeinv.spde_forward import BrownianPath, SchemeOperators, TimeGrid, apply_forward_map, sample_path
from spdeinv.tikhonov_cg import (
    CurvatureError,
    RegularizationConfig,
    TikhonovProblem,
    cg_minimize,
    eval_functional,
    eval_gradient,
    minimizer_certificate,
    write_iteration_log,
)


def small(n=6, T=0.05, M=5, **kw):
    space = FemSpace(build_interval_mesh(n))
    return space, Coefficients(**kw), TimeGrid(T, M)


def fd_relative_error(prob, y, v, eps=1e-5):
    fd = (prob.functional(y + eps * v) - prob.functional(y - eps * v)) / (2 * eps)
    ad = prob.h2_inner(prob.gradient(y), v)
    return abs(fd - ad) / abs(fd)


def enumerated_misfit(space, coeffs, grid, y, data):
    total = 0.0
    for signs in itertools.product((-1.0, 1.0), repeat=grid.M):
        U = apply_forward_map(space, coeffs, grid, y, BrownianPath(grid, np.array(signs) * math.sqrt(grid.k)))
        r = U - data
        total += r @ (space.mass @ r)
    return total / 2 ** grid.M


@pytest.mark.parametrize("kw", [dict(b3=0.5), dict(b3=0.3, b2=0.4, b1=lambda x: 1 + x,
                                                   f=lambda t, x: np.sin(3 * x[:, 0]) + t,
                                                   g=lambda t, x: x[:, 0] ** 2)])
def test_exact_misfit_matches_enumeration(kw, rng):
    # the misfit is a quadratic function of Gaussian increments, so two-point increments
    # reproduce its expectation exactly
    space, coeffs, grid = small(**kw)
    y, d = rng.normal(size=space.L), rng.normal(size=space.L)
    prob = TikhonovProblem(space, coeffs, grid, d)
    assert prob.misfit(y) == pytest.approx(enumerated_misfit(space, coeffs, grid, y, d), rel=1e-12)


def test_mean_terminal_matches_noise_free_solve(rng):
    space, coeffs, grid = small(b3=0.5, f=lambda t, x: np.ones(len(x)))
    y = rng.normal(size=space.L)
    prob = TikhonovProblem(space, coeffs, grid, np.zeros(space.L))
    zero = BrownianPath(grid, np.zeros(grid.M))
    np.testing.assert_allclose(prob.moments.mean_terminal(y), apply_forward_map(space, coeffs, grid, y, zero),
                               atol=1e-14)


@pytest.mark.parametrize("n", [4, 8, 11])
def test_gradient_fd_deterministic(n, rng):
    space, coeffs, grid = small(n=n, b3=0.0)
    d = rng.normal(size=space.L)
    prob = TikhonovProblem(space, coeffs, grid, d, alpha=1e-3)
    y, v = rng.normal(size=space.L), rng.normal(size=space.L)
    assert fd_relative_error(prob, y, v) < 1e-5


@pytest.mark.parametrize("scheme", ["printed", "consistent"])
def test_gradient_fd_stochastic_expected(scheme, rng):
    space, coeffs, grid = small(b3=0.1)
    prob = TikhonovProblem(space, coeffs, grid, rng.normal(size=space.L), alpha=1e-3, scheme=scheme)
    y, v = rng.normal(size=space.L), rng.normal(size=space.L)
    assert fd_relative_error(prob, y, v) < 1e-5


def test_consistent_scheme_gradient_with_drift(rng):
    space, coeffs, grid = small(b3=0.3, b2=0.5, b1=lambda x: 2 + x)
    prob = TikhonovProblem(space, coeffs, grid, rng.normal(size=space.L), scheme="consistent")
    assert fd_relative_error(prob, rng.normal(size=space.L), rng.normal(size=space.L)) < 1e-6


def test_gradient_alpha_linearity(rng):
    space, coeffs, grid = small(b3=0.1)
    d, y = rng.normal(size=space.L), rng.normal(size=space.L)
    g1 = eval_gradient(space, coeffs, grid, y, d, 0.1)
    g2 = eval_gradient(space, coeffs, grid, y, d, 0.35)
    np.testing.assert_allclose(g2 - g1, 2 * 0.25 * y, atol=1e-12)


def test_functional_monotone_in_alpha(rng):
    space, coeffs, grid = small(b3=0.1)
    d, y = rng.normal(size=space.L), rng.normal(size=space.L)
    assert eval_functional(space, coeffs, grid, y, d, 0.2) > eval_functional(space, coeffs, grid, y, d, 0.1)


def test_exact_data_zero_misfit_and_gradient(rng):
    space, coeffs, grid = small(b3=0.0)
    y = rng.normal(size=space.L)
    d = apply_forward_map(space, coeffs, grid, y, BrownianPath(grid, np.zeros(grid.M)))
    prob = TikhonovProblem(space, coeffs, grid, d)
    assert prob.functional(y) < 1e-28
    assert np.linalg.norm(prob.gradient(y)) < 1e-12 * np.linalg.norm(y)


def test_h2_inner_is_laplacian_norm():
    space = FemSpace(build_interval_mesh(32))
    v = interpolate(space, lambda p: np.sin(np.pi * p[:, 0]))
    prob = TikhonovProblem(space, Coefficients(), TimeGrid(0.01, 1), np.zeros(space.L))
    # |sin(pi x)''|^2 over [0,1] = pi^4 / 2
    assert prob.h2_inner(v, v) == pytest.approx(np.pi ** 4 / 2, rel=1e-2)


def test_path_mode_is_sample_mean(rng):
    space, coeffs, grid = small(b3=0.4)
    d, y = rng.normal(size=space.L), rng.normal(size=space.L)
    paths = [sample_path(grid, s) for s in range(3)]
    prob = TikhonovProblem(space, coeffs, grid, d, paths=paths)
    single = [TikhonovProblem(space, coeffs, grid, d, paths=p).misfit(y) for p in paths]
    assert prob.misfit(y) == pytest.approx(np.mean(single), rel=1e-13)
    assert prob.discrepancy(y) == pytest.approx(math.sqrt(np.mean(single)), rel=1e-13)


def dense_normal_solution(space, grid, d, alpha):
    ops = SchemeOperators(space, Coefficients(), grid)
    R1 = dense_from_products([Inverse(ops.P), ops.A])
    Phi = np.linalg.matrix_power(R1, grid.M)
    M = space.mass.toarray()
    S = space.stiffness.toarray()
    H = Phi.T @ M @ Phi + alpha * S @ np.linalg.solve(M, S)
    return np.linalg.solve(H, Phi.T @ M @ d)


def test_cg_matches_normal_equations(rng):
    space, coeffs, grid = small(n=4, T=0.01, M=4, b3=0.0)
    d = rng.normal(size=space.L)
    alpha = 1e-4
    prob = TikhonovProblem(space, coeffs, grid, d, alpha=alpha)
    cfg = RegularizationConfig(alpha=alpha, stop="gradient_norm", grad_tol=1e-14, max_iters=3 * space.L)
    res = cg_minimize(prob, cfg)
    ref = dense_normal_solution(space, grid, d, alpha)
    assert np.linalg.norm(res.y0 - ref) <= 1e-8 * np.linalg.norm(ref)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), b3=st.sampled_from([0.0, 0.1, 0.5]), alpha=st.sampled_from([0.0, 1e-6, 1e-3]),
       gamma_norm=st.sampled_from(["l2", "h2"]))
def test_cg_functional_non_increasing(seed, b3, alpha, gamma_norm):
    rng = np.random.default_rng(seed)
    space, coeffs, grid = small(n=7, b3=b3)
    prob = TikhonovProblem(space, coeffs, grid, rng.normal(size=space.L))
    res = cg_minimize(prob, RegularizationConfig(alpha=alpha, stop="max_iters", max_iters=15, gamma_norm=gamma_norm))
    J = [r.J for r in res.log]
    assert all(b <= a for a, b in zip(J, J[1:]))


def test_first_direction_is_steepest_descent(rng):
    space, coeffs, grid = small(b3=0.1)
    prob = TikhonovProblem(space, coeffs, grid, rng.normal(size=space.L))
    res = cg_minimize(prob, RegularizationConfig(stop="max_iters", max_iters=3))
    assert res.log[0].gamma == 0.0
    y1 = -res.log[0].beta * TikhonovProblem(space, coeffs, grid, prob.data).gradient(np.zeros(space.L))
    prob2 = TikhonovProblem(space, coeffs, grid, prob.data)
    res1 = cg_minimize(prob2, RegularizationConfig(stop="max_iters", max_iters=1))
    np.testing.assert_allclose(res1.y0, y1, rtol=1e-12)


def test_max_iters_is_flagged_not_raised(rng):
    space, coeffs, grid = small(b3=0.1)
    prob = TikhonovProblem(space, coeffs, grid, rng.normal(size=space.L))
    res = cg_minimize(prob, RegularizationConfig(stop="gradient_norm", grad_tol=1e-30, max_iters=2))
    assert not res.converged and res.reason == "max_iters" and res.iterations == 2


def test_discrepancy_stop(rng):
    space, coeffs, grid = small(b3=0.0)
    y = interpolate(space, lambda p: np.sin(np.pi * p[:, 0]))
    uT = apply_forward_map(space, coeffs, grid, y, BrownianPath(grid, np.zeros(grid.M)))
    d = uT + 0.05 * np.max(np.abs(uT)) * rng.uniform(-1, 1, size=space.L)
    prob = TikhonovProblem(space, coeffs, grid, d)
    cfg = RegularizationConfig(delta=0.05, data_scale=float(np.max(np.abs(uT))))
    res = cg_minimize(prob, cfg)
    assert res.converged and res.reason == "discrepancy"
    assert res.log[-1].discrepancy <= 1.01 * cfg.noise_bound(d, 1.0)
    assert all(r.discrepancy > 1.01 * cfg.noise_bound(d, 1.0) for r in res.log[:-1])


def test_increasing_step_is_rejected(rng, monkeypatch):
    space, coeffs, grid = small(b3=0.1)
    prob = TikhonovProblem(space, coeffs, grid, rng.normal(size=space.L))
    monkeypatch.setattr(prob, "line_terms", lambda y, d: (1.0, 1.0))  # step of the wrong sign
    res = cg_minimize(prob, RegularizationConfig(stop="max_iters", max_iters=3))
    assert res.reason == "stagnation" and not res.converged
    assert np.all(res.y0 == 0) and len(res.log) == 1


def test_zero_curvature_raises(rng, monkeypatch):
    space, coeffs, grid = small(b3=0.1)
    prob = TikhonovProblem(space, coeffs, grid, rng.normal(size=space.L))
    monkeypatch.setattr(prob, "line_terms", lambda y, d: (1.0, 0.0))
    with pytest.raises(CurvatureError):
        cg_minimize(prob, RegularizationConfig(stop="max_iters", max_iters=3))


def test_config_validation():
    with pytest.raises(ValueError):
        RegularizationConfig(stop="never")
    with pytest.raises(ValueError):
        RegularizationConfig(alpha_rule="other")
    with pytest.raises(ValueError):
        RegularizationConfig(alpha=-1.0)
    cfg = RegularizationConfig(alpha_rule="delta_squared", delta=0.1, data_scale=2.0)
    assert cfg.resolve_alpha(np.ones(3), 4.0) == pytest.approx((0.1 * 2.0 * 2.0) ** 2)


def test_certificate(rng):
    space, coeffs, grid = small(b3=0.1)
    u0 = interpolate(space, lambda p: np.sin(np.pi * p[:, 0]))
    d = apply_forward_map(space, coeffs, grid, u0, sample_path(grid, 0))
    prob = TikhonovProblem(space, coeffs, grid, d, alpha=1e-6)
    res = cg_minimize(prob, RegularizationConfig(alpha=1e-6, stop="gradient_norm", grad_tol=1e-10))
    assert minimizer_certificate(prob, res.y0, u0).holds
    bad = minimizer_certificate(prob, u0 + rng.normal(size=space.L), u0)
    assert not bad.holds and bad.J_candidate > bad.J_reference


def test_iteration_log_csv(tmp_path, rng):
    space, coeffs, grid = small(b3=0.1)
    res = cg_minimize(TikhonovProblem(space, coeffs, grid, rng.normal(size=space.L)),
                      RegularizationConfig(stop="max_iters", max_iters=4))
    f = tmp_path / "log.csv"
    write_iteration_log(res, f)
    lines = f.read_text().splitlines()
    assert lines[0] == "k,J,grad_norm,beta,gamma,discrepancy"
    assert len(lines) == 6 and lines[-1].split(",")[3] == "nan"


def test_cg_deterministic(rng):
    space, coeffs, grid = small(b3=0.1)
    d = rng.normal(size=space.L)
    run = lambda: cg_minimize(TikhonovProblem(space, coeffs, grid, d), RegularizationConfig(stop="max_iters",
                                                                                           max_iters=6))
    a, b = run(), run()
    assert np.array_equal(a.y0, b.y0) and [r.J for r in a.log] == [r.J for r in b.log]


def test_certificate_sweep_parabola():
    # alpha = delta^2 run on the parabola example at delta = 0.05: J(y_hat) <= J(u0) for every seed
    from spdeinv import cli

    cfg = cli.ExperimentConfig(deltas=[0.05], runs=100)
    ctx = cli._Context(cfg, 1.0)
    held = 0
    for r in range(cfg.runs):
        ps, ns = cli.run_seeds(cfg.seed, cfg.example, 0, r)
        uT = apply_forward_map(ctx.space, ctx.ex.coeffs, ctx.grid, ctx.u0, sample_path(ctx.grid, ps), ctx.ops)
        data = cli.add_noise(uT, 0.05, np.random.default_rng(ns))
        reg = cfg.regularization(0.05, data_scale=float(np.max(np.abs(uT))))
        prob = TikhonovProblem(ctx.space, ctx.ex.coeffs, ctx.grid, data, ops=ctx.ops, recursion=ctx.rec,
                               moments=ctx.moments)
        res = cg_minimize(prob, reg)  # sets prob.alpha from the rule
        held += minimizer_certificate(prob, res.y0, ctx.u0).holds
    assert held == cfg.runs
