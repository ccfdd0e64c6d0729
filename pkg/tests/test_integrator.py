import numpy as np
import pytest

from tvcontrol.dynamics import TimeGrid, make_system
from tvcontrol.errors import GridMismatch, SingularEffectiveMatrix
from tvcontrol.integrator import (NewmarkParams, midpoint_inner, midpoint_load,
                                  newmark_adjoint_forward, newmark_forward, newmark_retrograde,
                                  trapezoid_inner)

from conftest import oscillator, random_spd


def cos_error(K, T=2 * np.pi):
    traj = newmark_forward(oscillator(T=T, K=K))
    return abs(traj.x[-1, 0] - np.cos(T))


def test_oscillator_matches_cosine():
    assert cos_error(2000) < 2e-5
    # away from a peak the phase error shows up at first order in the amplitude
    ratio = cos_error(2000, T=3.0) / cos_error(4000, T=3.0)
    assert 3.8 < ratio < 4.2


def test_convergence_order_at_least_second():
    errs = [cos_error(K, T=3.0) for K in (250, 500, 1000)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9)


def test_zero_data_gives_zero_trajectory():
    traj = newmark_forward(oscillator(x0=0.0))
    for arr in (traj.x, traj.v, traj.a):
        assert not np.any(arr)


def test_constant_acceleration_is_exact():
    T, K = 3.0, 7
    sys = oscillator(k=0.0, T=T, K=K, x0=0.0, forcing=np.ones((K + 1, 1)))
    traj = newmark_forward(sys)
    np.testing.assert_allclose(traj.x[:, 0], 0.5 * traj.t ** 2, rtol=1e-14, atol=1e-15)
    assert traj.x[-1, 0] == pytest.approx(T ** 2 / 2, rel=1e-15)


def test_initial_acceleration_balances_equation(rng):
    n, K = 3, 20
    M = random_spd(rng, n)
    C, Kmat, B = rng.standard_normal((n, n)), rng.standard_normal((n, n)), rng.standard_normal((n, 2))
    F = rng.standard_normal((K + 1, n))
    u = rng.standard_normal((K + 1, 2))     # the integrator does not require zero ends
    sys = make_system({"M": M, "C": C, "K": Kmat, "B": B}, forcing=F,
                      initial_data=(rng.standard_normal(n), rng.standard_normal(n)),
                      grid=TimeGrid(1.0, K))
    traj = newmark_forward(sys, u)
    lhs = M @ traj.a[0]
    rhs = F[0] + B @ u[0] - C @ traj.v[0] - Kmat @ traj.x[0]
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


def test_energy_conserved_over_many_steps(rng):
    n = 3
    M = random_spd(rng, n)
    Kmat = random_spd(rng, n)
    sys = make_system({"M": M, "K": Kmat, "B": np.ones((n, 1))},
                      initial_data=(rng.standard_normal(n), rng.standard_normal(n)),
                      grid=TimeGrid(100.0, 10_000))
    traj = newmark_forward(sys)
    energy = 0.5 * (np.einsum("ki,ij,kj->k", traj.v, M, traj.v)
                    + np.einsum("ki,ij,kj->k", traj.x, Kmat, traj.x))
    assert np.max(np.abs(energy - energy[0])) <= 1e-10 * energy[0]


def test_linear_in_control(two_mass, rng):
    sys = two_mass.with_data(x0=np.zeros(2), x1=np.zeros(2))
    u1, u2 = rng.standard_normal((2, sys.grid.n_nodes, 1))
    x12 = newmark_forward(sys, u1 + u2).x
    x_sum = newmark_forward(sys, u1).x + newmark_forward(sys, u2).x
    np.testing.assert_allclose(x12, x_sum, rtol=0, atol=1e-11 * np.abs(x12).max())


def test_control_shape_checked(two_mass):
    with pytest.raises(GridMismatch):
        newmark_forward(two_mass, np.zeros((5, 1)))


@pytest.mark.parametrize("beta, gamma_nm", [(0.1, 0.5), (0.25, 0.4), (0.3, 0.7)])
def test_newmark_params_stability_region(beta, gamma_nm):
    with pytest.raises(ValueError):
        NewmarkParams(beta, gamma_nm)


def test_singular_effective_matrix():
    K = 10
    dt = 1.0 / K
    sys = oscillator(k=-4.0 / dt ** 2, K=K)
    with pytest.raises(SingularEffectiveMatrix):
        newmark_forward(sys)


def test_adjoint_zero_phi():
    traj = newmark_adjoint_forward(oscillator(c=0.3), np.zeros(2))
    assert not np.any(traj.x)


def test_adjoint_equals_state_for_symmetric_system(rng):
    Kmat = random_spd(rng, 2)
    phi0, phi1 = rng.standard_normal(2), rng.standard_normal(2)
    sys = make_system({"M": np.eye(2), "K": Kmat, "B": np.ones((2, 1))},
                      initial_data=(phi0, phi1), grid=TimeGrid(2.0, 200))
    adj = newmark_adjoint_forward(sys, np.concatenate([phi0, phi1]))
    fwd = newmark_forward(sys)
    np.testing.assert_allclose(adj.x, fwd.x, rtol=0, atol=1e-12 * np.abs(fwd.x).max())


def test_adjoint_scalar_analytic():
    c, k = 0.5, 4.0
    phi0, phi1 = 1.0, -0.3
    sys = oscillator(k=k, c=c, T=1.0, K=1000)
    traj = newmark_adjoint_forward(sys, [phi0, phi1])
    omega = np.sqrt(k - c * c / 4)
    t = traj.t
    b = (phi1 - 0.5 * c * phi0) / omega
    exact = np.exp(0.5 * c * t) * (phi0 * np.cos(omega * t) + b * np.sin(omega * t))
    np.testing.assert_allclose(traj.x[:, 0], exact, rtol=0, atol=1e-4)


def test_retrograde_zero_data():
    traj = newmark_retrograde(oscillator(c=0.2), [0.0], [0.0])
    assert not np.any(traj.x)


def test_retrograde_recovers_cosine():
    T = 3.0
    sys = oscillator(T=T, K=2000)
    traj = newmark_retrograde(sys, [np.cos(T)], [-np.sin(T)])
    np.testing.assert_allclose(traj.x[:, 0], np.cos(traj.t), rtol=0, atol=2e-5)


def test_retrograde_round_trip(rng):
    n = 2
    sys = make_system({"M": random_spd(rng, n), "C": rng.standard_normal((n, n)),
                       "K": rng.standard_normal((n, n)), "B": np.ones((n, 1))},
                      grid=TimeGrid(1.0, 300))
    fwd = newmark_adjoint_forward(sys, rng.standard_normal(2 * n))
    back = newmark_retrograde(sys, fwd.x[-1], fwd.v[-1])
    scale = np.abs(fwd.x).max()
    np.testing.assert_allclose(back.x, fwd.x, rtol=0, atol=1e-8 * scale)
    np.testing.assert_allclose(back.v, fwd.v, rtol=0, atol=1e-8 * np.abs(fwd.v).max())


def test_discrete_duality_identity(rng):
    """``E(T) - E(0)`` equals the element-average pairing of the load with ``Q``."""
    n, p, K = 3, 2, 60
    M = random_spd(rng, n)
    C, Kmat, B = rng.standard_normal((n, n)), rng.standard_normal((n, n)), rng.standard_normal((n, p))
    F = rng.standard_normal((K + 1, n))
    sys = make_system({"M": M, "C": C, "K": Kmat, "B": B}, forcing=F,
                      initial_data=(rng.standard_normal(n), rng.standard_normal(n)),
                      grid=TimeGrid(1.5, K))
    u = rng.standard_normal((K + 1, p))
    x = newmark_forward(sys, u)
    q = newmark_adjoint_forward(sys, rng.standard_normal(2 * n))

    def pairing(k):
        return (M @ x.v[k] + C @ x.x[k]) @ q.x[k] - (M @ x.x[k]) @ q.v[k]

    lhs = pairing(K) - pairing(0)
    rhs = midpoint_inner(F + u @ B.T, q.x, sys.grid)
    assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-11)


@pytest.mark.parametrize("f, g, expected", [
    (lambda t: np.ones_like(t), lambda t: np.ones_like(t), 1.0),
    (lambda t: t, lambda t: np.ones_like(t), 0.5),
])
@pytest.mark.parametrize("K", [2, 7, 100])
def test_trapezoid_exact_cases(f, g, expected, K):
    grid = TimeGrid(1.0, K)
    t = grid.nodes
    assert trapezoid_inner(f(t), g(t), grid) == pytest.approx(expected, rel=1e-14)


def test_trapezoid_quadratic():
    grid = TimeGrid(1.0, 100)
    t = grid.nodes
    assert abs(trapezoid_inner(t, t, grid) - 1.0 / 3.0) < 2e-5


def test_quadrature_grid_mismatch():
    grid = TimeGrid(1.0, 10)
    with pytest.raises(GridMismatch):
        trapezoid_inner(np.ones(10), np.ones(10), grid)
    with pytest.raises(GridMismatch):
        midpoint_inner(np.ones(11), np.ones(12), grid)


def test_midpoint_load_represents_pairing(rng):
    grid = TimeGrid(2.0, 30)
    f, g = rng.standard_normal((2, 31, 2))
    load = midpoint_load(f, grid)
    assert np.sum(load * g) == pytest.approx(midpoint_inner(f, g, grid), rel=1e-13)
