"""Newmark time stepping for the state and adjoint equations, plus grid quadrature.

With the default average-acceleration parameters (beta=1/4, gamma=1/2) the
scheme coincides with the trapezoidal rule on the first-order system, which
gives an exact discrete duality between the state recurrence and the adjoint
recurrence: for any control,

    E(T) - E(0) = sum_e dt * mean_e(F + B u) . mean_e(Q)

where ``E = (M x' + C x, Q) - (M x, Q')`` and ``mean_e`` is the average of the
two nodal values of element ``e``. :func:`midpoint_inner` implements that
element-average pairing; :func:`trapezoid_inner` is the ordinary nodal rule.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .dynamics import SecondOrderSystem, TimeGrid
from .errors import GridMismatch, SingularEffectiveMatrix


@dataclass(frozen=True)
class NewmarkParams:
    beta: float = 0.25
    gamma_nm: float = 0.5

    def __post_init__(self):
        if not (2.0 * self.beta >= self.gamma_nm >= 0.5):
            raise ValueError(
                f"Newmark parameters outside the unconditional stability region: "
                f"beta={self.beta}, gamma={self.gamma_nm} (need 2*beta >= gamma >= 1/2)")


DEFAULT_PARAMS = NewmarkParams()


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Nodal displacements, velocities and accelerations, each ``(K+1, N)``."""

    grid: TimeGrid
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        n_nodes = self.grid.n_nodes
        for name in ("x", "v", "a"):
            if getattr(self, name).shape[0] != n_nodes:
                raise GridMismatch(f"{name} has {getattr(self, name).shape[0]} rows, "
                                   f"grid has {n_nodes} nodes")

    @property
    def t(self) -> np.ndarray:
        return self.grid.nodes

    def terminal(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[-1], self.v[-1]


def _effective_factor(sys, kind, damping, stiffness, params):
    dt = sys.grid.dt

    def build():
        eff = sys.mass + params.gamma_nm * dt * damping + params.beta * dt * dt * stiffness
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(eff, check_finite=False)
        diag = np.abs(np.diag(lu))
        if not np.all(np.isfinite(diag)) or diag.min() <= 1e3 * np.finfo(float).eps * diag.max():
            raise SingularEffectiveMatrix(
                f"Newmark effective matrix is singular for dt={dt:g}; refine the time step")
        return lu, piv

    return sys.cached(("newmark", kind, dt, params.beta, params.gamma_nm), build)


def _march(sys, damping, stiffness, rhs, x0, v0, params, factor):
    """Run the Newmark recurrence for a batch of right-hand sides.

    ``rhs`` has shape ``(K+1, N, m)`` (or ``None`` for homogeneous problems);
    ``x0``/``v0`` have shape ``(N, m)``. Returns three ``(K+1, N, m)`` arrays.
    """
    grid = sys.grid
    dt, beta, gam = grid.dt, params.beta, params.gamma_nm
    n_nodes = grid.n_nodes
    shape = (n_nodes,) + x0.shape
    x = np.empty(shape)
    v = np.empty(shape)
    a = np.empty(shape)
    x[0], v[0] = x0, v0
    r0 = -damping @ v0 - stiffness @ x0
    if rhs is not None:
        r0 = r0 + rhs[0]
    a[0] = sys.solve_mass(r0)
    c1 = dt * dt * (0.5 - beta)
    c2 = dt * (1.0 - gam)
    c3 = beta * dt * dt
    c4 = gam * dt
    for k in range(n_nodes - 1):
        xp = x[k] + dt * v[k] + c1 * a[k]
        vp = v[k] + c2 * a[k]
        r = -damping @ vp - stiffness @ xp
        if rhs is not None:
            r += rhs[k + 1]
        a[k + 1] = sla.lu_solve(factor, r, check_finite=False)
        x[k + 1] = xp + c3 * a[k + 1]
        v[k + 1] = vp + c4 * a[k + 1]
    return x, v, a


def _values(u):
    return np.asarray(getattr(u, "values", u), dtype=float)


def newmark_forward(sys: SecondOrderSystem, u=None,
                    params: NewmarkParams = DEFAULT_PARAMS) -> Trajectory:
    """Integrate ``M x'' + C x' + K x = F + B u`` from the system's initial data.

    ``u`` is a ControlSignal, a ``(K+1, p)`` array of nodal values, or ``None``
    for the uncontrolled system.
    """
    rhs = np.array(sys.forcing)
    if u is not None:
        vals = _values(u)
        if vals.ndim == 1:
            vals = vals.reshape(-1, 1)
        if vals.shape != (sys.grid.n_nodes, sys.n_controls):
            raise GridMismatch(f"control has shape {vals.shape}, expected "
                               f"{(sys.grid.n_nodes, sys.n_controls)}")
        rhs = rhs + vals @ sys.control_map.T
    factor = _effective_factor(sys, "state", sys.damping, sys.stiffness, params)
    x, v, a = _march(sys, sys.damping, sys.stiffness, rhs[:, :, None],
                     sys.x0[:, None], sys.x1[:, None], params, factor)
    return Trajectory(sys.grid, x[..., 0], v[..., 0], a[..., 0])


def _split_phi(phi, n):
    if hasattr(phi, "phi0"):
        return np.asarray(phi.phi0, dtype=float), np.asarray(phi.phi1, dtype=float)
    arr = np.asarray(phi, dtype=float).reshape(-1)
    if arr.shape != (2 * n,):
        raise ValueError(f"adjoint initial data must have length {2 * n}")
    return arr[:n], arr[n:]


def adjoint_forward_batch(sys: SecondOrderSystem, q0: np.ndarray, q1: np.ndarray,
                          params: NewmarkParams = DEFAULT_PARAMS):
    """Batched adjoint solve; ``q0``/``q1`` have shape ``(N, m)``.

    Returns ``(x, v, a)`` arrays of shape ``(K+1, N, m)``.
    """
    damping = -sys.damping.T
    stiffness = sys.stiffness.T
    factor = _effective_factor(sys, "adjoint", damping, stiffness, params)
    return _march(sys, damping, stiffness, None, q0, q1, params, factor)


def newmark_adjoint_forward(sys: SecondOrderSystem, phi,
                            params: NewmarkParams = DEFAULT_PARAMS) -> Trajectory:
    """Solve ``M q'' - C^T q' + K^T q = 0`` forward from ``q(0), q'(0) = phi``."""
    phi0, phi1 = _split_phi(phi, sys.n_dof)
    x, v, a = adjoint_forward_batch(sys, phi0[:, None], phi1[:, None], params)
    return Trajectory(sys.grid, x[..., 0], v[..., 0], a[..., 0])


def newmark_retrograde(sys: SecondOrderSystem, terminal_position, terminal_velocity,
                       params: NewmarkParams = DEFAULT_PARAMS) -> Trajectory:
    """Solve the adjoint equation backward from data prescribed at ``t = T``.

    With ``s = T - t`` the equation becomes ``M r'' + C^T r' + K^T r = 0``; it is
    marched forward in ``s`` and returned on the original time orientation.
    """
    qT = np.asarray(terminal_position, dtype=float).reshape(-1, 1)
    vT = np.asarray(terminal_velocity, dtype=float).reshape(-1, 1)
    damping = sys.damping.T
    stiffness = sys.stiffness.T
    factor = _effective_factor(sys, "retrograde", damping, stiffness, params)
    r, rd, rdd = _march(sys, damping, stiffness, None, qT, -vT, params, factor)
    return Trajectory(sys.grid, r[::-1, :, 0].copy(), -rd[::-1, :, 0].copy(),
                      rdd[::-1, :, 0].copy())


# -- quadrature ----------------------------------------------------------------

def _check_pair(f, g, grid):
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != g.shape:
        raise GridMismatch(f"sample shapes differ: {f.shape} vs {g.shape}")
    if grid is not None and f.shape[0] != grid.n_nodes:
        raise GridMismatch(f"{f.shape[0]} samples on a grid with {grid.n_nodes} nodes")
    if f.ndim == 1:
        f, g = f[:, None], g[:, None]
    return f.reshape(f.shape[0], -1), g.reshape(g.shape[0], -1)


def trapezoid_inner(f, g, grid: TimeGrid) -> float:
    """Trapezoidal approximation of ``int_0^T (f, g) dt`` from nodal samples."""
    f, g = _check_pair(f, g, grid)
    prod = np.einsum("ij,ij->i", f, g)
    return float(grid.dt * (prod.sum() - 0.5 * (prod[0] + prod[-1])))


def midpoint_inner(f, g, grid: TimeGrid) -> float:
    """Element-average pairing ``sum_e dt * mean_e(f) . mean_e(g)``.

    This is the quadrature under which the Newmark state and adjoint
    recurrences satisfy the integration-by-parts identity exactly.
    """
    f, g = _check_pair(f, g, grid)
    fm = 0.5 * (f[1:] + f[:-1])
    gm = 0.5 * (g[1:] + g[:-1])
    return float(grid.dt * np.einsum("ij,ij->", fm, gm))


def midpoint_load(f, grid: TimeGrid) -> np.ndarray:
    """Nodal vector ``l`` with ``l . g = midpoint_inner(f, g)`` for every ``g``."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] != grid.n_nodes:
        raise GridMismatch(f"{f.shape[0]} samples on a grid with {grid.n_nodes} nodes")
    fm = 0.5 * grid.dt * 0.5 * (f[1:] + f[:-1])
    load = np.zeros_like(f)
    load[:-1] += fm
    load[1:] += fm
    return load
