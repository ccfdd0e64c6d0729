"""Inner problem: the control associated with a fixed adjoint trajectory.

Given nodal samples ``g = B^T P`` of the adjoint on the grid, the control is

    u = argmin_{v in H^1_0}  1/2 a(v, v) + gamma * TV(v) + <g, v>

with ``a(v, v) = alpha |v|_{L2}^2 + beta |v'|_{L2}^2`` discretized by piecewise
linear finite elements and ``<g, v>`` the element-average pairing of
:mod:`tvcontrol.integrator`. The total variation is dualized with a
multiplier ``lam`` that is constant per element and lives in the unit ball:

    A u = -load(g) - gamma * D^T lam,       lam_e = slope_e / |slope_e| where slope_e != 0.

:func:`uzawa_solve` iterates this saddle point; :func:`regularized_solve`
replaces ``|v'|`` by ``sqrt(eta + |v'|^2)`` and serves as an independent oracle.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.optimize as optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import TimeGrid
from .errors import GridMismatch, MaxIterExceeded, WeightsError
from .integrator import Trajectory, midpoint_load

BALL_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Piecewise-linear control with nodal ``values`` of shape ``(K+1, p)``.

    Both end values must be exactly zero.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(-1, 1)
        if vals.shape[0] != self.grid.n_nodes:
            raise GridMismatch(f"control has {vals.shape[0]} nodes, grid has {self.grid.n_nodes}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("control contains non-finite values")
        if np.any(vals[0] != 0.0) or np.any(vals[-1] != 0.0):
            raise ValueError("control must vanish at both ends of the horizon")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid: TimeGrid, p: int) -> "ControlSignal":
        return cls(grid, np.zeros((grid.n_nodes, p)))

    @classmethod
    def from_interior(cls, grid: TimeGrid, interior: np.ndarray) -> "ControlSignal":
        interior = np.asarray(interior, dtype=float)
        if interior.ndim == 1:
            interior = interior.reshape(-1, 1)
        vals = np.zeros((grid.n_nodes, interior.shape[1]))
        vals[1:-1] = interior
        return cls(grid, vals)

    @property
    def n_controls(self) -> int:
        return self.values.shape[1]

    @property
    def slopes(self) -> np.ndarray:
        """Per-element derivative, shape ``(K, p)``."""
        return np.diff(self.values, axis=0) / self.grid.dt

    def __add__(self, other: "ControlSignal") -> "ControlSignal":
        return ControlSignal(self.grid, self.values + other.values)

    def __sub__(self, other: "ControlSignal") -> "ControlSignal":
        return ControlSignal(self.grid, self.values - other.values)

    def __mul__(self, scale: float) -> "ControlSignal":
        return ControlSignal(self.grid, scale * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "ControlSignal":
        return ControlSignal(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class MultiplierField:
    """Per-element multiplier, ``values`` of shape ``(K, p)``, each row in the unit ball."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(-1, 1)
        if vals.shape[0] != self.grid.steps:
            raise GridMismatch(f"multiplier has {vals.shape[0]} elements, grid has {self.grid.steps}")
        if np.any(np.linalg.norm(vals, axis=1) > 1.0 + BALL_SLACK):
            raise ValueError("multiplier leaves the unit ball")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid: TimeGrid, p: int) -> "MultiplierField":
        return cls(grid, np.zeros((grid.steps, p)))


@dataclass(frozen=True)
class CostWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    epsilon: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "epsilon"):
            if not np.isfinite(getattr(self, name)):
                raise WeightsError(f"{name} must be finite")
        if self.alpha < 0:
            raise WeightsError("alpha must be >= 0")
        if not self.beta > 0:
            raise WeightsError("beta must be > 0 for H1 coercivity")
        if self.gamma < 0:
            raise WeightsError("gamma must be >= 0")
        if not self.epsilon > 0:
            raise WeightsError("epsilon must be > 0")

    def with_gamma(self, gamma: float) -> "CostWeights":
        return CostWeights(self.alpha, self.beta, gamma, self.epsilon)


# -- finite-element operators ------------------------------------------------------

def _tridiag(grid: TimeGrid, alpha: float, element_stiffness) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal and super-diagonal of alpha*mass + stiffness on interior nodes.

    ``element_stiffness`` is a scalar or a per-element array ``w_e``; element
    ``e`` contributes ``w_e/dt * [[1, -1], [-1, 1]]``.
    """
    dt, steps = grid.dt, grid.steps
    w = np.broadcast_to(np.asarray(element_stiffness, dtype=float), (steps,)) / dt
    diag = alpha * 2.0 * dt / 3.0 + w[:-1] + w[1:]
    off = alpha * dt / 6.0 - w[1:-1]
    return diag, off


class H1Operator:
    """Banded SPD operator ``A`` of ``a(u, v)`` on the interior nodes.

    The same tridiagonal matrix acts on every control component, so a
    ``(K-1, p)`` right-hand side is solved in one banded back-substitution.
    """

    def __init__(self, grid: TimeGrid, p: int, weights: CostWeights):
        if grid.steps < 2:
            raise ValueError("need at least two elements")
        self.grid = grid
        self.p = int(p)
        self.weights = weights
        self.diag, self.off = _tridiag(grid, weights.alpha, weights.beta)
        self._banded = _upper_banded(self.diag, self.off)
        self._chol = sla.cholesky_banded(self._banded, lower=False)

    @property
    def size(self) -> int:
        return self.grid.steps - 1

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.cho_solve_banded((self._chol, False), rhs, check_finite=False)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return _tri_matvec(self.diag, self.off, x)

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1)

    def sparse(self) -> sp.csr_matrix:
        return sp.diags([self.off, self.diag, self.off], [-1, 0, 1], format="csr")


def _upper_banded(diag, off):
    ab = np.zeros((2, diag.size))
    ab[0, 1:] = off
    ab[1] = diag
    return ab


def _tri_matvec(diag, off, x):
    y = diag[:, None] * x if x.ndim == 2 else diag * x
    if off.size:
        o = off[:, None] if x.ndim == 2 else off
        y[:-1] += o * x[1:]
        y[1:] += o * x[:-1]
    return y


def assemble_h1_operators(grid: TimeGrid, p: int, weights: CostWeights) -> H1Operator:
    """Factorized ``alpha * mass + beta * stiffness`` with Dirichlet ends."""
    return H1Operator(grid, p, weights)


def h1_energy(u: ControlSignal, weights: CostWeights) -> float:
    """``a(u, u) = alpha |u|^2 + beta |u'|^2`` on piecewise linears."""
    diag, off = _tridiag(u.grid, weights.alpha, weights.beta)
    x = u.values[1:-1]
    return float(np.sum(x * _tri_matvec(diag, off, x)))


def h1_norm(u: ControlSignal) -> float:
    """Discrete ``H^1`` norm ``sqrt(|u|^2_{L2} + |u'|^2_{L2})``."""
    return float(np.sqrt(h1_energy(u, CostWeights(1.0, 1.0))))


def tv_seminorm(u: ControlSignal) -> float:
    """``int_0^T |u'(t)| dt`` for a piecewise-linear control."""
    return float(np.sum(np.linalg.norm(np.diff(u.values, axis=0), axis=1)))


def control_cost(u: ControlSignal, weights: CostWeights) -> float:
    """``1/2 a(u, u) + gamma * TV(u)``, the cost minimized among exact controls."""
    return 0.5 * h1_energy(u, weights) + weights.gamma * tv_seminorm(u)


def l2_cost(u: ControlSignal) -> float:
    """``int_0^T |u|^2 dt`` with the exact rule for piecewise linears."""
    x = u.values
    dt = u.grid.dt
    return float(dt / 3.0 * np.sum(x[:-1] ** 2 + x[:-1] * x[1:] + x[1:] ** 2))


# -- linear solve -----------------------------------------------------------------

def _adjoint_samples(adjP, control_map, grid) -> np.ndarray:
    """Nodal samples of ``B^T P`` from a trajectory or a ready array."""
    if isinstance(adjP, Trajectory):
        if adjP.grid != grid:
            raise GridMismatch("adjoint trajectory lives on a different grid")
        return adjP.x @ np.asarray(control_map, dtype=float)
    g = np.asarray(adjP, dtype=float)
    if g.ndim == 1:
        g = g.reshape(-1, 1)
    if g.shape[0] != grid.n_nodes:
        raise GridMismatch(f"adjoint samples have {g.shape[0]} rows, grid has {grid.n_nodes} nodes")
    return g


def _multiplier_load(lam: np.ndarray, gamma: float) -> np.ndarray:
    """Interior-node vector of ``gamma * int (lam, v')`` for hat functions ``v``."""
    return gamma * (lam[1:] - lam[:-1])


def _grid_of(adjP, grid):
    if grid is not None:
        return grid
    if isinstance(adjP, Trajectory):
        return adjP.grid
    raise ValueError("a grid is required when adjoint samples are given as an array")


def linear_inner_solve(adjP, lam, weights: CostWeights, control_map=None, *,
                       grid: TimeGrid = None, operator: H1Operator = None) -> ControlSignal:
    """Solve ``A u = -load(B^T P) - gamma D^T lam`` for fixed multiplier ``lam``.

    ``adjP`` is an adjoint :class:`Trajectory` (then ``control_map`` is needed)
    or an array of nodal ``B^T P`` samples.
    """
    grid = _grid_of(adjP, grid)
    g = _adjoint_samples(adjP, control_map, grid)
    p = g.shape[1]
    lam_vals = np.asarray(getattr(lam, "values", lam), dtype=float).reshape(grid.steps, p)
    op = operator or assemble_h1_operators(grid, p, weights)
    rhs = -midpoint_load(g, grid)[1:-1] + _multiplier_load(lam_vals, weights.gamma)
    return ControlSignal.from_interior(grid, op.solve(rhs))


# -- Uzawa ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class UzawaResult:
    u: ControlSignal
    lam: MultiplierField
    iters: int
    converged: bool
    complementarity: float


def _project_ball(lam: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(lam, axis=1)
    out = lam * np.where(norms > 1.0, 1.0 / np.maximum(norms, 1e-300), 1.0)[:, None]
    # rescaling can land one ulp outside; shrink those rows until they are inside
    over = np.linalg.norm(out, axis=1) > 1.0
    while np.any(over):
        out[over] *= 1.0 - np.finfo(float).eps
        over = np.linalg.norm(out, axis=1) > 1.0
    return out


def complementarity_residual(u: ControlSignal, lam) -> float:
    """``max_e | (lam_e, s_e) - |s_e| |`` over elements."""
    s = u.slopes
    lam = np.asarray(getattr(lam, "values", lam))
    return float(np.max(np.abs(np.sum(lam * s, axis=1) - np.linalg.norm(s, axis=1))))


def _element_hessian(steps, p, d, active, gamma):
    """Sparse ``gamma * sum_e G_e^T (I - n n^T) / |d_e| G_e`` over active elements.

    ``G_e`` maps interior nodal values to the jump ``d_e = u_{e+1} - u_e``;
    unknowns are flattened node-major (``node * p + component``).
    """
    n_int = steps - 1
    size = n_int * p
    elems = np.flatnonzero(active)
    if elems.size == 0:
        return sp.csr_matrix((size, size))
    de = d[elems]
    norm = np.linalg.norm(de, axis=1)
    unit = de / norm[:, None]
    q = gamma * (np.eye(p)[None] - unit[:, :, None] * unit[:, None, :]) / norm[:, None, None]
    comp = np.arange(p)
    rows, cols, vals = [], [], []
    for ia, sa in ((elems - 1, -1.0), (elems, 1.0)):     # interior indices of nodes e, e+1
        for ib, sb in ((elems - 1, -1.0), (elems, 1.0)):
            ok = (ia >= 0) & (ia < n_int) & (ib >= 0) & (ib < n_int)
            r = (ia[ok, None, None] * p + comp[None, :, None]).repeat(p, axis=2)
            c = (ib[ok, None, None] * p + comp[None, None, :]).repeat(p, axis=1)
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append((sa * sb * q[ok]).ravel())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(size, size))


def _enclosing_center(points: np.ndarray) -> np.ndarray:
    """Centre of the smallest ball containing the rows of ``points``."""
    mid = 0.5 * (points.max(axis=0) + points.min(axis=0))
    if points.shape[1] == 1:
        return mid
    p = points.shape[1]

    def gap(z):
        return z[-1] - np.sum((points - z[:p]) ** 2, axis=1)

    def gap_jac(z):
        jac = np.empty((points.shape[0], p + 1))
        jac[:, :p] = 2.0 * (points - z[:p])
        jac[:, -1] = 1.0
        return jac

    z0 = np.append(mid, np.max(np.sum((points - mid) ** 2, axis=1)))
    sol = optimize.minimize(lambda z: z[-1], z0, jac=lambda z: np.eye(p + 1)[-1],
                            constraints=[{"type": "ineq", "fun": gap, "jac": gap_jac}],
                            method="SLSQP", options={"ftol": 1e-15, "maxiter": 500})
    radius = lambda c: np.max(np.linalg.norm(points - c, axis=1))  # noqa: E731
    # SLSQP often stops on a line-search warning at the optimum; keep the better centre
    return sol.x[:p] if radius(sol.x[:p]) < radius(mid) else mid


def _active_set_candidate(op: H1Operator, load: np.ndarray, lam: np.ndarray, gamma: float,
                          x: np.ndarray, max_newton: int = 30):
    """Solve the optimality system exactly on the flat/active pattern read off ``lam``.

    Elements with ``|lam_e| < 1`` are taken as flat (zero slope), so nodes
    joined by flat elements share one value and groups touching either end
    are pinned to zero. On the remaining elements the total variation is
    smooth, and the reduced convex problem is solved by damped Newton
    (a single linear solve when p = 1). The multiplier on flat elements is
    then recovered from the node equations. Returns ``(x, lam)`` or ``None``
    when the pattern turns out inconsistent.
    """
    flat = np.linalg.norm(lam, axis=1) < 1.0 - 1e-12
    for _ in range(5):
        out = _solve_pattern(op, load, flat, gamma, x, max_newton)
        if out is None or isinstance(out, tuple):
            return out
        flat = flat | out                           # active elements that collapsed
    return None


def _solve_pattern(op, load, flat, gamma, x, max_newton):
    steps = flat.size
    p = x.shape[1]
    n_int = steps - 1
    active = ~flat
    # group id per node 0..K: a new group starts after every active element
    gid = np.concatenate(([0], np.cumsum(active)))
    pinned = {gid[0], gid[-1]}
    interior_gid = gid[1:-1]
    free_ids = [g for g in np.unique(interior_gid) if g not in pinned]
    pad = np.zeros((1, p))
    kkt_scale = np.abs(load).max() + gamma

    def jumps(u):
        return np.diff(np.vstack([pad, u, pad]), axis=0)

    if free_ids:
        col = {g: j for j, g in enumerate(free_ids)}
        rows = [i for i in range(n_int) if interior_gid[i] in col]
        cols = [col[interior_gid[i]] for i in rows]
        P = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_int, len(free_ids)))
        Pp = sp.kron(P, sp.eye(p), format="csr")
        A_red = (Pp.T @ sp.kron(op.sparse(), sp.eye(p)) @ Pp).tocsc()
        counts = np.asarray(P.sum(axis=0)).ravel()
        c = (P.T @ x) / counts[:, None]

        def objective(c_):
            u = P @ c_
            d = jumps(u)
            return (0.5 * np.sum(u * op.matvec(u)) + np.sum(load * u)
                    + gamma * np.sum(np.linalg.norm(d[active], axis=1)))

        for _ in range(max_newton):
            u = P @ c
            d = jumps(u)
            dn = np.linalg.norm(d, axis=1)
            if np.any(dn[active] == 0.0):
                return active & (dn == 0.0)
            unit = np.zeros_like(d)
            unit[active] = d[active] / dn[active, None]
            grad = P.T @ (op.matvec(u) + load + gamma * (unit[:-1] - unit[1:]))
            if np.abs(grad).max() <= 1e2 * np.finfo(float).eps * kkt_scale:
                break
            H = A_red
            if p > 1:
                H = (A_red + Pp.T @ _element_hessian(steps, p, d, active, gamma) @ Pp).tocsc()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", spla.MatrixRankWarning)
                step = np.asarray(spla.spsolve(H, grad.ravel())).reshape(c.shape)
            if not np.all(np.isfinite(step)):
                return None
            f0, t = objective(c), 1.0
            slope = -np.sum(grad * step)
            while objective(c - t * step) > f0 + 1e-4 * t * slope:
                t *= 0.5
                if t < 1e-3:                        # a slope is collapsing: wrong pattern
                    return None
            c = c - t * step
            if t * np.abs(step).max() <= 1e-15 * max(np.abs(c).max(), 1e-300):
                break
        x_new = P @ c
    else:
        x_new = np.zeros((n_int, p))

    d = jumps(x_new)
    dn = np.linalg.norm(d, axis=1)
    if np.any(dn[active] == 0.0):
        return active & (dn == 0.0)
    new = np.full((steps, p), np.nan)
    new[active] = d[active] / dn[active, None]
    # node k equation: lam_k - lam_{k-1} = (A u + load)_k / gamma
    r = (op.matvec(x_new) + load) / gamma
    e = 0
    while e < steps:
        if active[e]:
            e += 1
            continue
        start = e
        while e < steps and flat[e]:
            e += 1
        stop = e                                    # flat run covers elements start..stop-1
        if start > 0:
            for k in range(start, stop):            # node k links elements k-1 and k
                new[k] = new[k - 1] + r[k - 1]
        elif stop < steps:
            for k in range(stop - 1, start - 1, -1):
                new[k] = new[k + 1] - r[k]
        else:
            cum = np.vstack([pad, np.cumsum(r, axis=0)])
            new[:] = cum - _enclosing_center(cum)
    if np.any(np.linalg.norm(new, axis=1) > 1.0 + 1e-9):
        return None
    return x_new, _project_ball(new)


def uzawa_solve(adjP, weights: CostWeights, control_map=None, rho_uzawa: float = None,
                tol: float = 1e-8, max_iter: int = 100_000, *, grid: TimeGrid = None,
                lambda0=None, operator: H1Operator = None, polish_every: int = 10,
                raise_on_fail: bool = True) -> UzawaResult:
    """Projected Uzawa iteration for the mixed ``(u, lam)`` formulation.

    Each sweep updates ``lam_e <- Proj_ball(lam_e + rho * slope_e)`` and
    re-solves the linear problem. The step must satisfy
    ``rho < 2 beta / gamma``; the default is ``beta / gamma``.

    Every ``polish_every`` sweeps the current flat/active pattern is tried in
    an exact reduced solve. A candidate that is a fixed point of the sweep and
    satisfies the optimality conditions to roundoff is returned at once;
    otherwise the sweeps continue from it.

    Stops when the sup-norm change of ``lam`` and the relative change of ``u``
    are both ``<= tol`` and complementarity holds to ``10 * tol * max|u'|``.
    """
    grid = _grid_of(adjP, grid)
    g = _adjoint_samples(adjP, control_map, grid)
    p = g.shape[1]
    op = operator or assemble_h1_operators(grid, p, weights)
    load = midpoint_load(g, grid)[1:-1]
    gamma = weights.gamma
    if gamma == 0.0:
        u = ControlSignal.from_interior(grid, op.solve(-load))
        return UzawaResult(u, MultiplierField.zeros(grid, p), 1, True, 0.0)
    if rho_uzawa is None:
        rho_uzawa = weights.beta / gamma
    if not rho_uzawa > 0:
        raise ValueError("rho_uzawa must be > 0")
    dt = grid.dt

    lam = (np.zeros((grid.steps, p)) if lambda0 is None
           else _project_ball(np.array(getattr(lambda0, "values", lambda0), dtype=float)
                              .reshape(grid.steps, p)))
    pad = np.zeros((1, p))

    def solve(lam_):
        return op.solve(-load + _multiplier_load(lam_, gamma))

    def slopes(x):
        return np.diff(np.vstack([pad, x, pad]), axis=0) / dt

    def comp_of(x_, lam_):
        s_ = slopes(x_)
        return (float(np.max(np.abs(np.sum(lam_ * s_, axis=1) - np.linalg.norm(s_, axis=1)))),
                float(np.linalg.norm(s_, axis=1).max()))

    def kkt_residual(x_, lam_):
        return np.abs(op.matvec(x_) + load - _multiplier_load(lam_, gamma)).max()

    x = solve(lam)
    # floor for the relative change of u, so that u -> 0 is still detected
    u_floor = 1e-6 * max(np.abs(op.solve(-load)).max(), np.finfo(float).tiny)
    kkt_scale = np.abs(load).max() + gamma
    comp = np.inf
    for it in range(1, max_iter + 1):
        lam_new = _project_ball(lam + rho_uzawa * slopes(x))
        x_new = solve(lam_new)
        dlam = np.abs(lam_new - lam).max()
        du = np.abs(x_new - x).max() / max(np.abs(x_new).max(), u_floor)
        lam, x = lam_new, x_new
        comp, smax = comp_of(x, lam)
        if dlam <= tol and du <= tol and comp <= 10.0 * tol * smax:
            u = ControlSignal.from_interior(grid, x)
            return UzawaResult(u, MultiplierField(grid, lam), it, True, comp)
        if polish_every and it % polish_every == 0:
            cand = _active_set_candidate(op, load, lam, gamma, x)
            if cand is None:
                continue
            xc, lc = cand
            fixed = np.abs(_project_ball(lc + rho_uzawa * slopes(xc)) - lc).max()
            comp_c, smax_c = comp_of(xc, lc)
            if (fixed <= tol and kkt_residual(xc, lc) <= 1e3 * np.finfo(float).eps * kkt_scale
                    and comp_c <= 10.0 * tol * smax_c):
                u = ControlSignal.from_interior(grid, xc)
                return UzawaResult(u, MultiplierField(grid, lc), it, True, comp_c)
            x, lam = xc, lc
    u = ControlSignal.from_interior(grid, x)
    result = UzawaResult(u, MultiplierField(grid, lam), max_iter, False, float(comp))
    if raise_on_fail:
        raise MaxIterExceeded(f"Uzawa iteration did not converge in {max_iter} sweeps", result)
    return result


# -- regularized oracle -------------------------------------------------------------

def regularized_solve(adjP, weights: CostWeights, control_map=None, eta: float = 1e-10,
                      tol: float = 1e-12, max_iter: int = 50_000, *,
                      grid: TimeGrid = None) -> ControlSignal:
    """Minimize the smoothed functional with ``|u'|`` replaced by ``sqrt(eta + |u'|^2)``.

    Lagged diffusivity: each sweep solves the linear problem whose element
    stiffness is ``beta + gamma / sqrt(eta + |slope_e|^2)`` at the previous
    iterate. The sweep is a majorize-minimize step, so the smoothed objective
    decreases monotonically; iteration also stops once roundoff makes it rise.
    """
    if not eta > 0:
        raise ValueError("eta must be > 0")
    grid = _grid_of(adjP, grid)
    g = _adjoint_samples(adjP, control_map, grid)
    p = g.shape[1]
    load = midpoint_load(g, grid)[1:-1]
    op = assemble_h1_operators(grid, p, weights)
    x = op.solve(-load)
    if weights.gamma == 0.0:
        return ControlSignal.from_interior(grid, x)
    pad = np.zeros((1, p))

    def slopes(x_):
        return np.diff(np.vstack([pad, x_, pad]), axis=0) / grid.dt

    def objective(x_):
        smooth = np.sqrt(eta + np.sum(slopes(x_) ** 2, axis=1))
        return (0.5 * np.sum(x_ * op.matvec(x_)) + np.sum(load * x_)
                + weights.gamma * grid.dt * smooth.sum())

    f = objective(x)
    for _ in range(max_iter):
        s = slopes(x)
        w = weights.beta + weights.gamma / np.sqrt(eta + np.sum(s * s, axis=1))
        diag, off = _tridiag(grid, weights.alpha, w)
        x_new = sla.solveh_banded(_upper_banded(diag, off), -load, check_finite=False)
        change = np.abs(x_new - x).max()
        f_new = objective(x_new)
        if f_new > f:
            # no further decrease: the step is roundoff in the stiff flat elements
            return ControlSignal.from_interior(grid, x)
        x, f = x_new, f_new
        if change <= tol * max(np.abs(x).max(), np.finfo(float).tiny):
            return ControlSignal.from_interior(grid, x)
    raise MaxIterExceeded(f"lagged diffusivity did not converge in {max_iter} sweeps",
                          ControlSignal.from_interior(grid, x))
