import csv
import json

import numpy as np
import pytest

from tvcontrol.cli import (EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVER, SUMMARY_FIELDS, fmt,
                           gamma_tag, main, plateau_fraction)
from tvcontrol.config import OUT_DIR_ENV, RunConfig, build_system, load_config, parse_config
from tvcontrol.dynamics import TimeGrid
from tvcontrol.errors import ConfigError
from tvcontrol.inner import ControlSignal
from tvcontrol.integrator import newmark_forward
from tvcontrol.outer import terminal_norm

SMALL = """
model = "two_mass"
[grid]
T = 2.6
K = 130
[weights]
gamma_list = {gammas}
[solver]
probes = 2
workers = {workers}
"""


def write_config(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def small_config(tmp_path, gammas="[0, 1000]", workers=1, name="run.toml"):
    return write_config(tmp_path, SMALL.format(gammas=gammas, workers=workers), name)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_array(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


@pytest.mark.parametrize("value, text", [
    (0.1, "0.1"), (1e-300, "1e-300"), (3, "3"), (True, "true"), (np.float64(2.5), "2.5"),
    (float("nan"), "nan"),
])
def test_fmt(value, text):
    assert fmt(value) == text


def test_fmt_round_trips(rng):
    for v in rng.standard_normal(100) * 10.0 ** rng.integers(-20, 20, 100):
        assert float(fmt(v)) == v


@pytest.mark.parametrize("gamma, tag", [(0.0, "0"), (20.0, "20"), (2.5, "2.5"), (1000, "1000")])
def test_gamma_tag(gamma, tag):
    assert gamma_tag(gamma) == tag


def test_plateau_fraction_of_flat_and_ramp():
    grid = TimeGrid(1.0, 10)
    assert plateau_fraction(ControlSignal.zeros(grid, 1)) == 1.0
    t = grid.nodes
    hat = ControlSignal(grid, np.clip(np.minimum(t, 1 - t), 0.0, 0.3)[:, None])
    assert plateau_fraction(hat) == pytest.approx(0.4)


def test_simulate_two_mass(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    rows = read_rows(tmp_path / "trajectory.csv")
    assert list(rows[0]) == ["t", "x_1", "x_2", "v_1", "v_2"]
    assert len(rows) == 521
    assert float(rows[0]["x_1"]) == 1.0


def test_simulate_zero_data(tmp_path):
    cfg = write_config(tmp_path, '[initial]\nx0 = [0, 0]\nx1 = [0, 0]\n[grid]\nK = 40\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    data = read_array(tmp_path / "trajectory.csv")
    assert not np.any(data[:, 1:])


def test_simulate_boat_heave(tmp_path):
    cfg = write_config(tmp_path, 'model = "boat"\nscenario = "heave_impact"\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    rows = read_rows(tmp_path / "trajectory.csv")
    assert float(rows[0]["x_2"]) == 0.0
    assert any(float(r["x_1"]) != 0.0 for r in rows)


def test_control_outputs_are_self_consistent(tmp_path):
    cfg_path = small_config(tmp_path)
    out = tmp_path / "out"
    assert main(["control", "--config", str(cfg_path), "--out", str(out), "--quiet"]) == EXIT_OK
    for tag in ("0", "1000"):
        assert (out / f"control_g{tag}.csv").exists()
        assert (out / f"trajectory_g{tag}.csv").exists()
    summary = read_rows(out / "summary.csv")
    assert tuple(summary[0]) == SUMMARY_FIELDS
    assert json.loads((out / "timing.json").read_text())["seconds"].keys() == {"0", "1000"}

    system = build_system(load_config(cfg_path))
    e0 = system.initial_energy()
    for row in summary:
        assert row["converged"] == "true"
        assert float(row["terminal_norm"]) <= 1e-8 * e0
        data = read_array(out / f"control_g{gamma_tag(float(row['gamma']))}.csv")
        traj = newmark_forward(system, data[:, 1:])
        assert abs(terminal_norm(traj) - float(row["terminal_norm"])) <= 1e-10
    assert float(summary[1]["tv"]) < float(summary[0]["tv"])


def test_gamma_study_flatness(tmp_path):
    cfg_path = small_config(tmp_path, gammas="[0, 100, 1000]")
    out = tmp_path / "out"
    assert main(["gamma-study", "--config", str(cfg_path), "--out", str(out), "--quiet"]) == 0
    flat = read_rows(out / "flatness.csv")
    assert [r["gamma"] for r in flat] == ["0.0", "100.0", "1000.0"]
    assert float(flat[-1]["plateau_fraction"]) > float(flat[0]["plateau_fraction"])
    assert flat[0]["elements"] == "130"


def test_gamma_study_needs_three_values(tmp_path):
    cfg_path = small_config(tmp_path, gammas="[0, 10]")
    assert main(["gamma-study", "--config", str(cfg_path), "--out", str(tmp_path),
                 "--quiet"]) == EXIT_CONFIG


def test_outputs_are_byte_identical_across_runs_and_workers(tmp_path):
    runs = []
    for i, workers in enumerate((1, 1, 2)):
        cfg_path = small_config(tmp_path, workers=workers, name=f"run{i}.toml")
        out = tmp_path / f"out{i}"
        assert main(["control", "--config", str(cfg_path), "--out", str(out), "--seed", "5",
                     "--quiet"]) == EXIT_OK
        runs.append({p.name: p.read_bytes() for p in out.glob("*.csv")})
    assert len(runs[0]) == 5
    assert runs[0] == runs[1] == runs[2]


def test_solver_failure_exit_code(tmp_path):
    text = SMALL.format(gammas="[0, 1000]", workers=1) + "max_outer = 1\n"
    cfg_path = write_config(tmp_path, text)
    out = tmp_path / "out"
    assert main(["control", "--config", str(cfg_path), "--out", str(out), "--quiet"]) == EXIT_SOLVER
    rows = read_rows(out / "summary.csv")
    assert [r["converged"] for r in rows] == ["true", "false"]


def test_config_errors_exit_two(tmp_path):
    bad = write_config(tmp_path, 'model = "rocket"\n')
    assert main(["simulate", "--config", str(bad), "--quiet"]) == EXIT_CONFIG
    broken = write_config(tmp_path, "model = \n", name="broken.toml")
    assert main(["simulate", "--config", str(broken), "--quiet"]) == EXIT_CONFIG


def test_missing_config_file_is_io_error(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.toml"), "--quiet"]) == EXIT_IO


def test_output_path_occupied_by_file(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("x")
    assert main(["simulate", "--out", str(blocker), "--quiet"]) == EXIT_IO


def test_out_dir_precedence(tmp_path, monkeypatch):
    cfg = RunConfig(out_dir=tmp_path / "from_config")
    monkeypatch.delenv(OUT_DIR_ENV, raising=False)
    assert cfg.with_overrides().out_dir == tmp_path / "from_config"
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "from_env"))
    assert cfg.with_overrides().out_dir == tmp_path / "from_env"
    assert cfg.with_overrides(out_dir=tmp_path / "flag").out_dir == tmp_path / "flag"
    assert main(["simulate", "--quiet"]) == EXIT_OK
    assert (tmp_path / "from_env" / "trajectory.csv").exists()


def test_check_reports_trim_for_boat(tmp_path):
    cfg = write_config(tmp_path, 'model = "boat"\n')
    assert main(["check", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    rows = {r["quantity"]: r["value"] for r in read_rows(tmp_path / "check.csv")}
    assert rows["controllable"] == "true"
    assert float(rows["damping_sym_eig_min"]) < 0 < float(rows["damping_sym_eig_max"])
    assert float(rows["alpha0"]) > 0 and float(rows["beta0"]) > 0
    assert abs(float(rows["trim_lift_residual"])) < 1e-6


def test_file_model_round_trip(tmp_path, two_mass):
    from tvcontrol.dynamics import write_system_file
    write_system_file(two_mass, tmp_path / "sys.txt")
    cfg = load_config(write_config(tmp_path, 'model = "file:sys.txt"\n'))
    assert cfg.model_path == tmp_path / "sys.txt"
    system = build_system(cfg)
    np.testing.assert_array_equal(system.stiffness, two_mass.stiffness)
    assert system.grid == two_mass.grid


@pytest.mark.parametrize("data", [
    {"colour": "red"},
    {"weights": {"gamma": 1.0, "gamma_list": [1.0]}},
    {"weights": {"gamma_list": []}},
    {"weights": {"gamma_list": [1.0, 1.0]}},
    {"weights": {"gamma": -1.0}},
    {"weights": {"alpha": 0.0, "beta": 0.0}},
    {"grid": {"K": 2.5}},
    {"grid": {"T": 0}},
    {"solver": {"max_outer": True}},
    {"solver": {"speed": 3}},
    {"model": "boat", "scenario": "broach"},
    {"scenario": "heave_impact"},
    {"model": "boat", "scenario": "custom"},
    {"model": "file:"},
    {"model": "file:x.txt", "params": {"mass": 1.0}},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        parse_config(data)


@pytest.mark.parametrize("data", [
    {"initial": {"x0": [1.0, 2.0, 3.0]}},
    {"params": {"wingspan": 3.0}},
    {"model": "boat", "params": {"speed": -1.0}},
])
def test_invalid_model_inputs(data):
    with pytest.raises(ConfigError):
        build_system(parse_config(data))


def test_custom_boat_scenario():
    cfg = parse_config({"model": "boat", "scenario": "custom",
                        "initial": {"x0": [0.1, 0.0], "x1": [0.0, 0.0]}})
    system = build_system(cfg)
    np.testing.assert_array_equal(system.x0, [0.1, 0.0])
