import csv

import numpy as np
import pytest

from spdeinv import cli
from spdeinv.fem import FemSpace, build_interval_mesh, interpolate
from spdeinv.spde_forward import TimeGrid, apply_forward_map, sample_path


def _pt(*c):
    return np.array([c], dtype=float)


def test_examples_hand_values():
    assert cli.make_example("parabola_1d").u0(_pt(0.5))[0] == pytest.approx(1.0)
    hat = cli.make_example("hat_1d").u0
    assert hat(_pt(0.5))[0] == pytest.approx(1.0) and hat(_pt(0.25))[0] == pytest.approx(0.5)
    assert cli.make_example("sine_2d").u0(_pt(0.5, 0.5))[0] == pytest.approx(1.0)
    ex = cli.make_example("parabola_1d")
    assert ex.coeffs.b3 == 0.1 and ex.bounds == (0.0, 1.0)


def test_custom_example():
    ex = cli.make_example("custom", u0_expr="sin(pi*x)*y", dim=2)
    assert ex.u0(_pt(0.5, 2.0))[0] == pytest.approx(2.0)
    with pytest.raises(cli.ConfigError):
        cli.make_example("custom")
    with pytest.raises(cli.ConfigError):
        cli.make_example("nope")
    with pytest.raises(Exception):
        cli.make_example("custom", u0_expr="__import__('os')").u0(_pt(0.1))


def test_add_noise_identity_and_bounds():
    u = np.linspace(-2, 1, 50)
    assert np.array_equal(cli.add_noise(u, 0.0, 0), u)
    e = cli.add_noise(u, 0.1, np.random.default_rng(1)) - u
    assert np.max(np.abs(e)) <= 0.1 * 2.0
    with pytest.raises(ValueError):
        cli.add_noise(u, -0.1, 0)


def test_add_noise_variance():
    u = np.full(100_000, 3.0)
    e = cli.add_noise(u, 0.05, np.random.default_rng(7)) - u
    expect = (0.05 * 3.0) ** 2 / 3
    assert abs(e.var() / expect - 1) < 0.05
    assert abs(e.mean()) < 0.01 * 0.15


def test_run_seeds_distinct_and_stable():
    a = cli.run_seeds(1, "parabola_1d", 0, 0)
    b = cli.run_seeds(1, "parabola_1d", 0, 0)
    c = cli.run_seeds(1, "parabola_1d", 0, 1)
    draw = [np.random.default_rng(s).random() for s in (*a, *b, *c)]
    assert draw[0] == draw[2] and draw[1] == draw[3]
    assert len({draw[0], draw[1], draw[4], draw[5]}) == 4


def test_config_ini_round_trip(tmp_path):
    cfg = cli.ExperimentConfig(T=[0.5, 1.0], deltas=[0.0, 0.01], runs=3, k="h2", carleman_lambda=2.0)
    text = cfg.to_ini()
    assert "[experiment]" in text and "[carleman]" in text and "T = 0.5, 1.0" in text
    back = cli.ExperimentConfig.from_ini(text)
    assert back == cfg
    cfg.dump(tmp_path / "c.ini")
    assert cli.ExperimentConfig.load(tmp_path / "c.ini") == cfg


@pytest.mark.parametrize("text", [
    "[experiment]\nexample = moon\n",
    "[experiment]\nruns = many\n",
    "[experiment]\nbogus = 1\n",
    "[experiment]\nk = -1\n",
    "[experiment]\ndeltas = 0.1, -0.2\n",
    "[experiment]\nstop = sometimes\n",
    "not an ini",
])
def test_bad_config_rejected(text):
    with pytest.raises(cli.ConfigError):
        cli.ExperimentConfig.from_ini(text)


def test_main_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[experiment]\nexample = moon\n")
    assert cli.main(["run", str(p)]) == 2
    assert "config error" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.ini")]) == 2


def test_dump_config(capsys):
    assert cli.main(["dump-config", "--runs", "7"]) == 0
    out = capsys.readouterr().out
    assert cli.ExperimentConfig.from_ini(out).runs == 7


def _small_cfg(tmp_path, **kw):
    base = dict(n_cells=8, T=[0.1], k="0.005", deltas=[0.0, 0.05], runs=3, max_iters=30, output=str(tmp_path))
    base.update(kw)
    return cli.ExperimentConfig(**base)


def _read(path):
    return path.read_bytes()


def test_sweep_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ra = cli.run_sweep(_small_cfg(a))
    cli.run_sweep(_small_cfg(b))
    for name in ("summary.csv", "runs.csv", "profile.csv", "iterlog_T0_d0_r0.csv", "iterlog_T0_d1_r0.csv"):
        assert _read(a / name) == _read(b / name), name
    assert not (a / "iterlog_T0_d0_r1.csv").exists()
    assert ra.failures == 0 and len(ra.records) == 6
    rows = list(csv.reader(open(a / "summary.csv")))
    assert rows[0] == ["T", "metric", "delta=0.0", "delta=0.05"]
    assert [r[1] for r in rows[1:]] == ["RMSE", "rmse"]
    runs = list(csv.DictReader(open(a / "runs.csv")))
    assert {r["status"] for r in runs} == {"ok"}
    assert (a / "timing.csv").exists()


def test_workers_match_serial(tmp_path):
    cli.run_sweep(_small_cfg(tmp_path / "s", workers=1))
    cli.run_sweep(_small_cfg(tmp_path / "p", workers=2))
    for name in ("summary.csv", "runs.csv", "profile.csv"):
        assert _read(tmp_path / "s" / name) == _read(tmp_path / "p" / name)


def test_sweep_noise_free_b3_zero_recovers_well(tmp_path):
    # without noise in the equation or the data the fit is limited only by the smoothing of the forward map
    cfg = _small_cfg(tmp_path, b3=0.0, deltas=[0.0], runs=2, max_iters=200)
    res = cli.run_sweep(cfg)
    r0, r1 = res.records
    assert r0.RMSE == pytest.approx(r1.RMSE, rel=1e-12)
    space = FemSpace(build_interval_mesh(8))
    grid = TimeGrid.from_step(0.1, 0.005)
    ex = cli.make_example("parabola_1d", b3=0.0)
    uT = apply_forward_map(space, ex.coeffs, grid, interpolate(space, ex.u0), sample_path(grid, 0))
    fwd = apply_forward_map(space, ex.coeffs, grid, r0.y0, sample_path(grid, 1))
    assert np.max(np.abs(fwd - uT)) < 1e-4 * np.max(np.abs(uT))


def test_main_run_prints_table(tmp_path, capsys):
    cfg = _small_cfg(tmp_path / "o", runs=1, deltas=[0.02])
    p = tmp_path / "c.ini"
    cfg.dump(p)
    assert cli.main(["run", str(p)]) == 0
    out = capsys.readouterr().out
    assert "delta=0.02" in out and "0 failed" in out


def test_main_carleman_and_stability_small(tmp_path, capsys):
    cfg = _small_cfg(tmp_path / "o", carleman_solutions=3, carleman_paths=4, stability_runs=2,
                     stability_deltas=[0.01, 0.1], stability_eps=0.02, stability_t0=0.05)
    p = tmp_path / "c.ini"
    cfg.dump(p)
    assert cli.main(["carleman", str(p)]) == 0
    assert (tmp_path / "o" / "carleman.csv").exists()
    with pytest.warns(RuntimeWarning):
        assert cli.main(["stability", str(p)]) == 0
    assert (tmp_path / "o" / "stability.csv").exists()
    assert "lambda=" in capsys.readouterr().out


def test_top_eigenmode_is_oscillatory():
    space = FemSpace(build_interval_mesh(10))
    v = cli.top_eigenmode(space)
    assert np.max(np.abs(v)) == pytest.approx(1.0)
    assert np.all(np.sign(v[1:]) != np.sign(v[:-1]))


def test_inline_comments_ignored():
    cfg = cli.ExperimentConfig.from_ini("[experiment]\nruns = 5   ; per level\nk = h2 # rule\n")
    assert cfg.runs == 5 and cfg.k == "h2"
