"""Batch experiments: synthetic data, Monte-Carlo reconstruction sweeps, CSV output.

Configuration is an INI file with an ``[experiment]`` section and optional
``[carleman]`` and ``[stability]`` sections; see README for the keys.
Every run draws its Brownian path and noise from streams derived from the
master seed and the run's ``(example, delta index, run index)`` key, so
results do not depend on execution order or worker count.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import os
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import diagnostics
from .fbspde_adjoint import build_recursion
from .fem import Coefficients, FemSpace, build_interval_mesh, build_rect_mesh, interpolate
from .spde_forward import SchemeOperators, TimeGrid, apply_forward_map, sample_path
from .tikhonov_cg import MomentModel, RegularizationConfig, TikhonovProblem, cg_minimize, write_iteration_log

__all__ = [
    "ConfigError",
    "Example",
    "ExperimentConfig",
    "RunRecord",
    "make_example",
    "add_noise",
    "run_seeds",
    "run_sweep",
    "run_carleman",
    "run_stability",
    "main",
]

EXAMPLES = ("parabola_1d", "hat_1d", "sine_2d", "custom")


class ConfigError(ValueError):
    pass


@dataclass
class Example:
    name: str
    u0: Callable
    coeffs: Coefficients
    dim: int
    bounds: tuple


def _safe_field(expr: str, dim: int) -> Callable:
    """Compile a numpy expression in ``x`` (and ``y``) into a field callable."""
    code = compile(expr, "<field>", "eval")
    names = {k: getattr(np, k) for k in ("sin", "cos", "exp", "sqrt", "abs", "where", "minimum", "maximum", "pi")}

    def fn(pts):
        env = dict(names, x=pts[:, 0])
        if dim == 2:
            env["y"] = pts[:, 1]
        return np.broadcast_to(np.asarray(eval(code, {"__builtins__": {}}, env), dtype=float), (len(pts),))
    return fn


def make_example(name: str, b3: Optional[float] = None, u0_expr: Optional[str] = None, dim: int = 1,
                 b2: float = 0.0) -> Example:
    """Exact initial field and coefficients of a named example.

    ``parabola_1d``: ``4x(1-x)`` on ``[0, 1]``; ``hat_1d``: the tent of
    height 1 at ``x = 0.5``; ``sine_2d``: ``sin(pi x) sin(pi y)`` on
    ``[-1, 1]^2``.  All use ``b1 = b2 = 0`` and ``b3 = 0.1`` unless
    overridden.  ``custom`` needs ``u0_expr``, a numpy expression in ``x``
    (and ``y`` when ``dim = 2``) on the unit interval or ``[-1, 1]^2``.
    """
    b3 = 0.1 if b3 is None else float(b3)
    if name == "parabola_1d":
        return Example(name, lambda p: 4 * p[:, 0] * (1 - p[:, 0]), Coefficients(b3=b3, b2=b2), 1, (0.0, 1.0))
    if name == "hat_1d":
        return Example(name, lambda p: np.where(p[:, 0] <= 0.5, 2 * p[:, 0], 2 - 2 * p[:, 0]),
                       Coefficients(b3=b3, b2=b2), 1, (0.0, 1.0))
    if name == "sine_2d":
        return Example(name, lambda p: np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1]),
                       Coefficients(b3=b3, b2=b2), 2, (-1.0, 1.0, -1.0, 1.0))
    if name == "custom":
        if not u0_expr:
            raise ConfigError("custom example needs an initial-field expression (u0)")
        if dim not in (1, 2):
            raise ConfigError("custom example dimension must be 1 or 2")
        bounds = (0.0, 1.0) if dim == 1 else (-1.0, 1.0, -1.0, 1.0)
        return Example(name, _safe_field(u0_expr, dim), Coefficients(b3=b3, b2=b2), dim, bounds)
    raise ConfigError(f"unknown example {name!r}; expected one of {EXAMPLES}")


def add_noise(u_T, delta: float, rng) -> np.ndarray:
    """Add i.i.d. uniform noise on ``[-delta |u_T|_inf, delta |u_T|_inf]`` per entry."""
    if delta < 0:
        raise ValueError("noise level must be non-negative")
    u_T = np.asarray(u_T, dtype=float)
    if delta == 0:
        return u_T.copy()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return u_T + delta * np.max(np.abs(u_T)) * 2 * (rng.random(u_T.shape) - 0.5)


def run_seeds(master: int, example: str, delta_index: int, run: int):
    """Path and noise seed sequences for one run.

    The key ``(crc32(example), delta_index, run)`` is the spawn key of a
    ``SeedSequence`` with entropy ``master``; the two children feed the
    Brownian path and the noise draw.
    """
    ss = np.random.SeedSequence(master, spawn_key=(zlib.crc32(example.encode()), delta_index, run))
    return tuple(ss.spawn(2))


def _floats(text: str) -> list:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _fmt_list(values) -> str:
    return ", ".join(repr(float(v)) for v in values)


@dataclass
class ExperimentConfig:
    """Experiment settings; round-trips through :meth:`to_ini`/:meth:`from_ini`."""

    example: str = "parabola_1d"
    n_cells: int = 20
    nx: int = 20
    ny: int = 20
    T: list = field(default_factory=lambda: [1.0])
    k: str = "0.00125"  # a number or "h2"
    deltas: list = field(default_factory=lambda: [0.0, 0.004, 0.02, 0.05, 0.1])
    runs: int = 100
    seed: int = 20240601
    b3: float = 0.1
    u0: str = ""
    dim: int = 1
    alpha_rule: str = "delta_squared"
    alpha: float = 0.0
    stop: str = "discrepancy"
    tau: float = 1.01
    grad_tol: float = 1e-8
    max_iters: int = 200
    gamma_norm: str = "h2"
    scheme: str = "printed"
    iterlogs: int = 1
    workers: int = 1
    output: str = "results"
    # diagnostics
    carleman_lambda: float = 1.0
    carleman_eps: float = 0.0
    carleman_solutions: int = 100
    carleman_paths: int = 100
    stability_deltas: list = field(default_factory=lambda: [0.001, 0.00316, 0.01, 0.0316, 0.1])
    stability_runs: int = 100
    stability_eps: float = 0.1
    stability_t0: float = 0.5
    stability_lambda0: float = 1.0

    def __post_init__(self):
        for name in _LIST_KEYS:
            setattr(self, name, [float(v) for v in getattr(self, name)])
        self.validate()

    def validate(self):
        if self.example not in EXAMPLES:
            raise ConfigError(f"unknown example {self.example!r}")
        if self.runs < 1 or self.stability_runs < 1:
            raise ConfigError("runs must be at least 1")
        if any(d < 0 for d in self.deltas):
            raise ConfigError("noise levels must be non-negative")
        if not self.T or any(t <= 0 for t in self.T):
            raise ConfigError("final times must be positive")
        if self.k != "h2":
            try:
                if float(self.k) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"time step must be positive or 'h2', got {self.k!r}") from None
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        try:
            self.regularization(0.0)
            self.regularization(1.0, data_scale=1.0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # sections and conversions ------------------------------------------------
    _SECTIONS = {"carleman": ("carleman_lambda", "carleman_eps", "carleman_solutions", "carleman_paths"),
                 "stability": ("stability_deltas", "stability_runs", "stability_eps", "stability_t0",
                               "stability_lambda0")}

    def _section_of(self, name):
        for sec, keys in self._SECTIONS.items():
            if name in keys:
                return sec, name[len(sec) + 1:]
        return "experiment", name

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in ("experiment", *self._SECTIONS):
            cp[sec] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            sec, key = self._section_of(f.name)
            cp[sec][key] = _fmt_list(v) if isinstance(v, list) else repr(v) if isinstance(v, float) else str(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for sec in cp.sections():
            for key, raw in cp[sec].items():
                name = key if sec == "experiment" else f"{sec}_{key}"
                if name not in known:
                    raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                kwargs[name] = raw
        return cls(**_coerce(kwargs))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return cls.from_ini(text)

    def dump(self, path) -> None:
        Path(path).write_text(self.to_ini())

    # derived objects ---------------------------------------------------------
    def example_obj(self) -> Example:
        return make_example(self.example, b3=self.b3, u0_expr=self.u0 or None, dim=self.dim)

    def space(self, ex: Example) -> FemSpace:
        if ex.dim == 1:
            return FemSpace(build_interval_mesh(self.n_cells, *ex.bounds))
        return FemSpace(build_rect_mesh(self.nx, self.ny, ex.bounds))

    def grid(self, T: float, space: FemSpace) -> TimeGrid:
        if self.k == "h2":
            return TimeGrid.h_squared_rule(T, space.mesh.h)
        grid = TimeGrid.from_step(T, float(self.k))
        grid.check_step(space.mesh.h)
        return grid

    def regularization(self, delta: float, data_scale: Optional[float] = None) -> RegularizationConfig:
        stop = self.stop if delta > 0 or self.stop == "max_iters" else "gradient_norm"
        return RegularizationConfig(alpha=self.alpha, alpha_rule=self.alpha_rule, delta=delta, data_scale=data_scale,
                                    max_iters=self.max_iters, stop=stop, tau=self.tau, grad_tol=self.grad_tol,
                                    gamma_norm=self.gamma_norm)


_LIST_KEYS = ("T", "deltas", "stability_deltas")


def _coerce(raw: dict) -> dict:
    out = {}
    for name, text in raw.items():
        kind = type(ExperimentConfig.__dataclass_fields__[name].default)
        try:
            if name in _LIST_KEYS:
                out[name] = _floats(text)
            elif kind in (int, float):
                out[name] = kind(text)
            else:
                out[name] = text.strip()
        except ValueError:
            raise ConfigError(f"bad value for {name}: {text!r}") from None
    return out


@dataclass
class RunRecord:
    T: float
    delta_index: int
    delta: float
    run: int
    iterations: int
    converged: bool
    reason: str
    RMSE: float
    rmse_rel: float
    J_final: float
    discrepancy: float
    iterlog: str
    status: str
    wall_time: float = 0.0
    y0: Optional[np.ndarray] = None


class _Context:
    """Per-final-time objects shared by all runs of a sweep."""

    def __init__(self, cfg: ExperimentConfig, T: float):
        self.cfg = cfg
        self.ex = cfg.example_obj()
        self.space = cfg.space(self.ex)
        self.grid = cfg.grid(T, self.space)
        self.ops = SchemeOperators(self.space, self.ex.coeffs, self.grid)
        self.rec = build_recursion(self.space, self.ex.coeffs, self.grid, np.zeros(self.space.L), cfg.scheme,
                                   ops=self.ops)
        self.moments = MomentModel(self.ops)
        self.u0 = interpolate(self.space, self.ex.u0)
        self.u0_full = self.space.extend(self.u0)
        self.u0_full[self.space.boundary] = self.ex.u0(self.space.mesh.vertices[self.space.boundary])


_WORKER_CTX: dict = {}


def _worker_init(cfg_text: str, T: float):
    _WORKER_CTX["ctx"] = _Context(ExperimentConfig.from_ini(cfg_text), T)


def _worker_run(args):
    return _run_one(_WORKER_CTX["ctx"], *args)


def _run_one(ctx: _Context, T_index: int, i: int, r: int, iterlog_path: Optional[str]) -> RunRecord:
    cfg = ctx.cfg
    delta = cfg.deltas[i]
    tic = time.perf_counter()
    path_seed, noise_seed = run_seeds(cfg.seed, cfg.example, i, r)
    try:
        path = sample_path(ctx.grid, path_seed)
        uT = apply_forward_map(ctx.space, ctx.ex.coeffs, ctx.grid, ctx.u0, path, ctx.ops)
        data = add_noise(uT, delta, np.random.default_rng(noise_seed))
        prob = TikhonovProblem(ctx.space, ctx.ex.coeffs, ctx.grid, data, ops=ctx.ops, recursion=ctx.rec,
                               moments=ctx.moments)
        reg = cfg.regularization(delta, data_scale=float(np.max(np.abs(uT))))
        res = cg_minimize(prob, reg)
        RMSE, rel = diagnostics.rmse(ctx.space.extend(res.y0), ctx.u0_full)
        if iterlog_path:
            write_iteration_log(res, iterlog_path)
        last = res.log[-1]
        rec = RunRecord(ctx.grid.T, i, delta, r, res.iterations, res.converged, res.reason, RMSE, rel, last.J,
                        last.discrepancy, os.path.basename(iterlog_path) if iterlog_path else "", "ok", y0=res.y0)
    except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        nan = math.nan
        rec = RunRecord(ctx.grid.T, i, delta, r, 0, False, "", nan, nan, nan, nan, "", type(exc).__name__)
    rec.wall_time = time.perf_counter() - tic
    return rec


@dataclass
class SweepResult:
    records: list
    table: dict  # (T, delta_index) -> (mean RMSE, mean rmse)
    failures: int


def run_sweep(cfg: ExperimentConfig, output: Optional[str] = None) -> SweepResult:
    """Monte-Carlo reconstruction sweep over final times and noise levels.

    Writes ``summary.csv``, ``runs.csv``, ``profile.csv``, ``timing.csv``
    and ``iterlog_<run>.csv`` files into ``output`` (default
    ``cfg.output``).  Per-run failures are recorded and counted; they do not
    stop the sweep.
    """
    out = Path(output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    profiles = []
    for ti, T in enumerate(cfg.T):
        tasks = []
        for i in range(len(cfg.deltas)):
            for r in range(cfg.runs):
                log = str(out / f"iterlog_T{ti}_d{i}_r{r}.csv") if r < cfg.iterlogs else None
                tasks.append((ti, i, r, log))
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers, initializer=_worker_init, initargs=(cfg.to_ini(), T)) as pool:
                recs = list(pool.map(_worker_run, tasks, chunksize=max(1, len(tasks) // (4 * cfg.workers))))
            ctx = _Context(cfg, T)
        else:
            ctx = _Context(cfg, T)
            recs = [_run_one(ctx, *t) for t in tasks]
        recs.sort(key=lambda rec: (rec.delta_index, rec.run))
        records.extend(recs)
        for rec in recs:
            if rec.run == 0 and rec.y0 is not None:
                profiles.append((T, rec.delta, ctx.space, ctx.u0_full, ctx.space.extend(rec.y0)))

    table = {}
    for ti, T in enumerate(cfg.T):
        for i in range(len(cfg.deltas)):
            sel = [r for r in records if r.T == T and r.delta_index == i and r.status == "ok"]
            table[(T, i)] = (float(np.mean([r.RMSE for r in sel])) if sel else math.nan,
                             float(np.mean([r.rmse_rel for r in sel])) if sel else math.nan)
    failures = sum(r.status != "ok" for r in records)
    _write_outputs(cfg, out, records, table, profiles)
    return SweepResult(records, table, failures)


def _write_outputs(cfg, out: Path, records, table, profiles):
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "metric"] + [f"delta={d!r}" for d in cfg.deltas])
        for T in cfg.T:
            w.writerow([repr(T), "RMSE"] + [repr(table[(T, i)][0]) for i in range(len(cfg.deltas))])
            w.writerow([repr(T), "rmse"] + [repr(table[(T, i)][1]) for i in range(len(cfg.deltas))])
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "delta_index", "delta", "run", "iterations", "converged", "reason", "RMSE", "rmse_rel",
                    "J_final", "discrepancy", "iterlog", "status"])
        for r in records:
            w.writerow([repr(r.T), r.delta_index, repr(r.delta), r.run, r.iterations, int(r.converged), r.reason,
                        repr(r.RMSE), repr(r.rmse_rel), repr(r.J_final), repr(r.discrepancy), r.iterlog, r.status])
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "delta_index", "run", "wall_seconds"])
        for r in records:
            w.writerow([repr(r.T), r.delta_index, r.run, f"{r.wall_time:.6f}"])
    with open(out / "profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        dim = profiles[0][2].mesh.dim if profiles else 1
        coords = ["x"] if dim == 1 else ["x", "y"]
        w.writerow(["T", "delta", "vertex"] + coords + ["u0_exact", "u0_reconstructed"])
        for T, d, space, exact, recon in profiles:
            for v, (p, e, u) in enumerate(zip(space.mesh.vertices, exact, recon)):
                w.writerow([repr(T), repr(d), v] + [repr(float(c)) for c in p] + [repr(float(e)), repr(float(u))])


def _carleman_setup(cfg: ExperimentConfig):
    ex = cfg.example_obj()
    space = cfg.space(ex)
    grid = cfg.grid(cfg.T[0], space)
    ops = SchemeOperators(space, ex.coeffs.homogeneous(), grid)
    return ex, space, grid, ops


def top_eigenmode(space: FemSpace) -> np.ndarray:
    """Most oscillatory discrete Dirichlet eigenfunction, ``Stiff v = mu Mass v`` with largest ``mu``."""
    from scipy.linalg import eigh

    _, vecs = eigh(space.stiffness.toarray(), space.mass.toarray())
    v = vecs[:, -1]
    return v / np.max(np.abs(v))


def run_carleman(cfg: ExperimentConfig, output: Optional[str] = None) -> diagnostics.CarlemanFit:
    """Fit the Carleman constant on the top eigenmode; check random initial states.

    Held-out solutions start from i.i.d. standard normal interior values;
    each solution's expectation uses ``carleman_paths`` paths.
    """
    ex, space, grid, ops = _carleman_setup(cfg)
    P = cfg.carleman_paths

    def increments(j):
        ss = np.random.SeedSequence(cfg.seed, spawn_key=(zlib.crc32(b"carleman"), j))
        rng = np.random.default_rng(ss)
        return rng.normal(0.0, math.sqrt(grid.k), size=(P, grid.M))

    cal = diagnostics.homogeneous_trajectories(ops, top_eigenmode(space), increments(0))
    held = []
    for j in range(1, cfg.carleman_solutions + 1):
        ss = np.random.SeedSequence(cfg.seed, spawn_key=(zlib.crc32(b"carleman-init"), j))
        y0 = np.random.default_rng(ss).normal(size=space.L)
        held.append(diagnostics.homogeneous_trajectories(ops, y0, increments(j)))
    fit = diagnostics.fit_carleman_constant(space, grid, cal, held, cfg.carleman_lambda, cfg.carleman_eps)
    out = Path(output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    diagnostics.write_carleman_csv(fit, out / "carleman.csv")
    return fit


def run_stability(cfg: ExperimentConfig, output: Optional[str] = None) -> diagnostics.StabilityCurve:
    ex = cfg.example_obj()
    space = cfg.space(ex)
    grid = cfg.grid(cfg.T[0], space)
    u0 = interpolate(space, ex.u0)
    reg = cfg.regularization(1.0)
    curve = diagnostics.stability_experiment(space, ex.coeffs, grid, u0, cfg.stability_deltas, cfg.stability_runs,
                                             cfg.stability_eps, seed=cfg.seed, lambda0=cfg.stability_lambda0,
                                             t0=cfg.stability_t0, config=reg)
    out = Path(output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    diagnostics.write_stability_csv(curve, out / "stability.csv")
    return curve


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if args.runs is not None:
        changes["runs"] = args.runs
        changes["stability_runs"] = args.runs
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.deltas is not None:
        changes["deltas"] = _floats(args.deltas)
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.output is not None:
        changes["output"] = args.output
    if not changes:
        return cfg
    return ExperimentConfig(**{**cfg.__dict__, **changes})


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spdeinv", description="Initial-state reconstruction experiments.")
    p.add_argument("command", choices=("run", "carleman", "stability", "dump-config"))
    p.add_argument("config", nargs="?", help="INI config file (defaults are used when omitted)")
    p.add_argument("-o", "--output", help="output directory")
    p.add_argument("--runs", type=int, help="Monte-Carlo runs per noise level")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--deltas", help="comma-separated noise levels")
    p.add_argument("--workers", type=int, help="worker processes")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        cfg = _apply_overrides(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "dump-config":
        sys.stdout.write(cfg.to_ini())
        return 0
    if args.command == "run":
        res = run_sweep(cfg)
        for (T, i), (R, rel) in res.table.items():
            print(f"T={T:g} delta={cfg.deltas[i]:g}: RMSE={R:.4f} rmse={rel:.4f}")
        print(f"{len(res.records)} runs, {res.failures} failed; output in {cfg.output}")
        return 1 if res.records and res.failures == len(res.records) else 0
    if args.command == "carleman":
        fit = run_carleman(cfg)
        for lam in fit.checks:
            print(f"lambda={lam:g}: C={fit.C:.4g}, holds for {100 * fit.pass_fraction(lam):.0f}% of held-out")
        return 0
    curve = run_stability(cfg)
    for d, m in zip(curve.deltas, curve.mean_errors):
        print(f"delta={d:g}: mean error {m:.4g}")
    print(f"Spearman rho={curve.spearman_rho:.3f} CI=({curve.spearman_ci[0]:.3f}, {curve.spearman_ci[1]:.3f}); "
          f"R^2={curve.r_squared:.3f}")
    return 1 if curve.failures == curve.errors.size else 0


if __name__ == "__main__":
    sys.exit(main())
