import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvcontrol.dynamics import (TimeGrid, controllability_rank, first_order_form, make_system,
                                read_system_file, write_system_file)
from tvcontrol.errors import DimensionMismatch, MassNotSPD, ParseError
from tvcontrol.models import assemble_boat_system, default_boat_params

from conftest import random_spd


def test_time_grid_nodes():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25
    assert g.n_nodes == 9
    np.testing.assert_allclose(g.nodes, np.arange(9) * 0.25)


@pytest.mark.parametrize("horizon, steps", [(0.0, 10), (-1.0, 10), (1.0, 1), (1.0, 2.5)])
def test_time_grid_rejects_bad_values(horizon, steps):
    with pytest.raises(ValueError):
        TimeGrid(horizon, steps)


def test_make_system_valid():
    sys = make_system({"M": np.eye(2), "C": np.zeros((2, 2)), "K": [[2, -1], [-1, 1]],
                       "B": [[1], [0]]}, grid=TimeGrid(1.0, 10))
    assert sys.n_dof == 2 and sys.n_controls == 1
    assert sys.forcing.shape == (11, 2)
    assert not np.any(sys.x0) and not np.any(sys.x1)


@pytest.mark.parametrize("mass", [
    [[1.0, 0.0], [0.0, -1.0]],
    [[1.0, 0.5], [0.0, 1.0]],
    [[0.0, 0.0], [0.0, 0.0]],
])
def test_mass_must_be_spd(mass):
    with pytest.raises(MassNotSPD):
        make_system({"M": mass, "K": np.eye(2), "B": [[1], [0]]}, grid=TimeGrid(1.0, 4))


@pytest.mark.parametrize("override", [
    {"K": np.eye(3)},
    {"C": np.eye(1)},
    {"B": np.ones((3, 1))},
])
def test_dimension_mismatch(override):
    mats = {"M": np.eye(2), "C": np.zeros((2, 2)), "K": np.eye(2), "B": np.ones((2, 1))}
    mats.update(override)
    with pytest.raises(DimensionMismatch):
        make_system(mats, grid=TimeGrid(1.0, 4))


def test_forcing_sample_count_checked():
    with pytest.raises(DimensionMismatch):
        make_system({"M": [[1.0]], "K": [[1.0]], "B": [[1.0]]}, forcing=np.zeros((3, 1)),
                    grid=TimeGrid(1.0, 4))


def test_boat_system_has_indefinite_damping():
    sys = assemble_boat_system(default_boat_params(), grid=TimeGrid(1.0, 10))
    eig = np.linalg.eigvalsh(0.5 * (sys.damping + sys.damping.T))
    assert eig[0] < 0 < eig[-1]
    assert np.all(np.linalg.eigvalsh(sys.mass) > 0)


def test_first_order_form_identity_mass():
    sys = make_system({"M": np.eye(2), "K": np.eye(2), "B": np.eye(2)}, grid=TimeGrid(1.0, 4))
    expected = np.array([[0, 0, 1, 0], [0, 0, 0, 1], [-1, 0, 0, 0], [0, -1, 0, 0]], float)
    np.testing.assert_array_equal(first_order_form(sys).a, expected)


def test_first_order_form_scalar_division():
    sys = make_system({"M": [[2.0]], "C": [[4.0]], "K": [[6.0]], "B": [[2.0]]},
                      grid=TimeGrid(1.0, 4))
    form = first_order_form(sys)
    np.testing.assert_allclose(form.damping_block, [[-2.0]], rtol=1e-14)
    np.testing.assert_allclose(form.stiffness_block, [[-3.0]], rtol=1e-14)
    np.testing.assert_allclose(form.b, [[0.0], [1.0]], rtol=1e-14)


def test_first_order_form_residual_oracle(two_mass, rng):
    form = first_order_form(two_mass)
    for _ in range(10):
        x, v = rng.standard_normal(2), rng.standard_normal(2)
        z_dot = form.a @ np.concatenate([x, v])
        np.testing.assert_allclose(z_dot[:2], v, rtol=0, atol=0)
        acc = np.linalg.solve(two_mass.mass, -two_mass.damping @ v - two_mass.stiffness @ x)
        np.testing.assert_allclose(z_dot[2:], acc, rtol=1e-12, atol=1e-12 * np.abs(acc).max())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_first_order_form_recovers_matrices(n, seed):
    rng = np.random.default_rng(seed)
    M = random_spd(rng, n)
    C, K = rng.standard_normal((n, n)), rng.standard_normal((n, n))
    sys = make_system({"M": M, "C": C, "K": K, "B": rng.standard_normal((n, 1))},
                      grid=TimeGrid(1.0, 4))
    form = first_order_form(sys)
    np.testing.assert_array_equal(form.a[:n, :n], 0.0)
    np.testing.assert_array_equal(form.a[:n, n:], np.eye(n))
    np.testing.assert_allclose(M @ form.damping_block, -C, atol=1e-12 * np.abs(M).max() * n)
    np.testing.assert_allclose(M @ form.stiffness_block, -K, atol=1e-12 * np.abs(M).max() * n)


def test_cached_mass_solve_matches_dense(rng):
    M = random_spd(rng, 5)
    sys = make_system({"M": M, "K": np.eye(5), "B": np.ones((5, 1))}, grid=TimeGrid(1.0, 4))
    r = rng.standard_normal((5, 3))
    np.testing.assert_allclose(sys.solve_mass(r), np.linalg.solve(M, r), rtol=1e-12)


def test_controllability_without_actuation():
    sys = make_system({"M": np.eye(2), "K": np.eye(2), "B": np.zeros((2, 1))},
                      grid=TimeGrid(1.0, 4))
    result = controllability_rank(sys)
    assert not result.controllable
    assert result.numeric_rank < 4


def test_two_mass_is_controllable(two_mass):
    result = controllability_rank(two_mass)
    assert result.controllable and result.numeric_rank == 4


def test_identical_decoupled_oscillators_not_controllable():
    sys = make_system({"M": np.eye(2), "K": 3.0 * np.eye(2), "B": [[1.0], [1.0]]},
                      grid=TimeGrid(1.0, 4))
    result = controllability_rank(sys)
    assert not result.controllable
    assert result.numeric_rank == 2


def test_controllability_invariant_under_scaling(two_mass):
    big = make_system({"M": two_mass.mass, "C": two_mass.damping, "K": two_mass.stiffness,
                       "B": 1e3 * two_mass.control_map}, grid=two_mass.grid)
    assert controllability_rank(big).numeric_rank == controllability_rank(two_mass).numeric_rank


def test_system_file_round_trip(tmp_path, two_mass):
    path = tmp_path / "sys.txt"
    write_system_file(two_mass, path)
    back = read_system_file(path)
    for name in ("mass", "damping", "stiffness", "control_map", "forcing", "x0", "x1"):
        np.testing.assert_array_equal(getattr(back, name), getattr(two_mass, name))
    assert back.grid == two_mass.grid


def test_truncated_file_reports_line(tmp_path, two_mass):
    path = tmp_path / "sys.txt"
    write_system_file(two_mass, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:7]) + "\n")
    with pytest.raises(ParseError) as info:
        read_system_file(path)
    assert info.value.line == 7


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("1 1 4\n", 1),
    ("1 1 4 1.0\n1 x\n", 2),
    ("1 1 4 1.0\n1\n0\n1\n1\n0\n0\n0\n0\n0\n0\n0\n7\n", 13),
])
def test_malformed_files(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        read_system_file(path)
    assert info.value.line == line
