"""Exact-control synthesis by a preconditioned fixed-point iteration on adjoint data.

For adjoint initial data ``Phi = (Phi0, Phi1)`` let ``Q(Phi)`` solve the
homogeneous adjoint equation and ``u(Phi)`` the inner problem driven by
``B^T Q(Phi)``. The operator

    Lambda(Phi)_i = -<B^T Q(e_i), u(Phi)>

is monotone, and ``Lambda(Phi) = L`` holds exactly when ``u(Phi)`` steers the
state to rest at ``T``. Because the Newmark recurrences satisfy a discrete
integration-by-parts identity, ``Lambda(Phi) - L`` can be read off the
terminal state of one forward solve (:func:`residual`).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .dynamics import SecondOrderSystem, TimeGrid, controllability_rank
from .errors import GridMismatch, MaxIterExceeded, MaxOuterExceeded, PrecondSingular
from .inner import (ControlSignal, CostWeights, H1Operator, MultiplierField,
                    assemble_h1_operators, control_cost, uzawa_solve)
from .integrator import (DEFAULT_PARAMS, NewmarkParams, Trajectory, adjoint_forward_batch,
                         midpoint_load, newmark_forward)


@dataclass(frozen=True, eq=False)
class PhiVector:
    """Adjoint initial data, flattened as ``(phi0, phi1)``."""

    phi0: np.ndarray
    phi1: np.ndarray

    def __post_init__(self):
        p0 = np.array(self.phi0, dtype=float).reshape(-1)
        p1 = np.array(self.phi1, dtype=float).reshape(-1)
        if p0.shape != p1.shape:
            raise ValueError("phi0 and phi1 must have the same length")
        if not (np.all(np.isfinite(p0)) and np.all(np.isfinite(p1))):
            raise ValueError("adjoint data must be finite")
        object.__setattr__(self, "phi0", p0)
        object.__setattr__(self, "phi1", p1)

    @classmethod
    def from_array(cls, arr) -> "PhiVector":
        arr = np.asarray(arr, dtype=float).reshape(-1)
        if arr.size % 2:
            raise ValueError("adjoint data must have even length 2N")
        n = arr.size // 2
        return cls(arr[:n], arr[n:])

    @classmethod
    def zeros(cls, n: int) -> "PhiVector":
        return cls(np.zeros(n), np.zeros(n))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.phi0, self.phi1])


def _phi_array(phi) -> np.ndarray:
    if isinstance(phi, PhiVector):
        return phi.as_array()
    return np.asarray(phi, dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class FundamentalCache:
    """Adjoint solutions for the 2N unit initial data.

    ``x``/``v`` have shape ``(K+1, N, 2N)``; column ``i`` is ``Q(e_i)``.
    ``btq`` holds ``B^T Q(e_i)`` as ``(K+1, p, 2N)`` and ``load`` the matching
    interior load vectors ``(K-1, p, 2N)`` of the element-average pairing.
    """

    grid: TimeGrid
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    btq: np.ndarray
    load: np.ndarray

    @property
    def dim(self) -> int:
        return self.x.shape[2]

    @property
    def terminal_snapshots(self) -> tuple[np.ndarray, np.ndarray]:
        """``(Q_i(T), Q_i'(T))`` stacked as two ``(N, 2N)`` arrays."""
        return self.x[-1], self.v[-1]

    @property
    def basis_trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.grid, self.x[..., i], self.v[..., i], self.a[..., i])
                for i in range(self.dim)]

    def adjoint(self, phi) -> Trajectory:
        c = _phi_array(phi)
        return Trajectory(self.grid, self.x @ c, self.v @ c, self.a @ c)

    def btq_of(self, phi) -> np.ndarray:
        return self.btq @ _phi_array(phi)


def build_cache(sys: SecondOrderSystem, grid: TimeGrid = None,
                params: NewmarkParams = DEFAULT_PARAMS) -> FundamentalCache:
    """Run the 2N unit adjoint solves (in one batched march) and memoize them."""
    if grid is not None and grid != sys.grid:
        raise GridMismatch("the cache must be built on the system grid")

    def build():
        n = sys.n_dof
        eye = np.eye(2 * n)
        x, v, a = adjoint_forward_batch(sys, eye[:n], eye[n:], params)
        btq = np.einsum("kni,nj->kji", x, sys.control_map)
        k1 = sys.grid.n_nodes
        load = midpoint_load(btq.reshape(k1, -1), sys.grid).reshape(btq.shape)[1:-1]
        for arr in (x, v, a, btq, load):
            arr.setflags(write=False)
        return FundamentalCache(sys.grid, x, v, a, btq, load)

    return sys.cached(("fundamental", params), build)


def _operator(sys, weights) -> H1Operator:
    return sys.cached(("h1", weights.alpha, weights.beta),
                      lambda: assemble_h1_operators(sys.grid, sys.n_controls, weights))


def inner_from_phi(cache: FundamentalCache, phi, weights: CostWeights, sys: SecondOrderSystem,
                   *, tol: float = 1e-10, max_iter: int = 100_000, lambda0=None):
    """Control and multiplier associated with adjoint data ``phi``.

    Returns the :class:`~tvcontrol.inner.UzawaResult`.
    """
    g = cache.btq_of(phi)
    return uzawa_solve(g, weights, grid=cache.grid, tol=tol, max_iter=max_iter,
                       lambda0=lambda0, operator=_operator(sys, weights))


def _pair_with_basis(cache, u: ControlSignal) -> np.ndarray:
    return -np.einsum("kji,kj->i", cache.load, u.values[1:-1])


def apply_lambda(cache: FundamentalCache, phi, weights: CostWeights, sys: SecondOrderSystem,
                 **inner_kw) -> np.ndarray:
    """``Lambda(phi)_i = -<B^T Q(e_i), u(phi)>`` in the element-average pairing."""
    u = inner_from_phi(cache, phi, weights, sys, **inner_kw).u
    return _pair_with_basis(cache, u)


def build_L(cache: FundamentalCache, sys: SecondOrderSystem) -> np.ndarray:
    """Right-hand side: forcing pairing plus the initial-data boundary terms."""
    forcing = np.einsum("kn,kni->i", midpoint_load(sys.forcing, sys.grid), cache.x)
    boundary = np.concatenate([sys.mass @ sys.x1 + sys.damping @ sys.x0,
                               -(sys.mass @ sys.x0)])
    return forcing + boundary


def terminal_residual(cache: FundamentalCache, sys: SecondOrderSystem,
                      trajectory: Trajectory) -> np.ndarray:
    xT, vT = trajectory.terminal()
    qT, qdT = cache.terminal_snapshots
    return -qT.T @ (sys.mass @ vT + sys.damping @ xT) + qdT.T @ (sys.mass @ xT)


def residual(cache: FundamentalCache, sys: SecondOrderSystem, u: ControlSignal,
             params: NewmarkParams = DEFAULT_PARAMS) -> np.ndarray:
    """``Lambda(phi) - L`` evaluated from the terminal state of one forward solve.

    Component ``i`` is ``-(M X'(T) + C X(T), Q_i(T)) + (M X(T), Q_i'(T))``;
    it vanishes for every ``i`` exactly when ``X(T) = X'(T) = 0``.
    """
    return terminal_residual(cache, sys, newmark_forward(sys, u, params))


def terminal_norm(trajectory: Trajectory) -> float:
    xT, vT = trajectory.terminal()
    return float(xT @ xT + vT @ vT)


@dataclass(frozen=True, eq=False)
class Preconditioner:
    """Assembled ``Lambda^0`` (the gamma = 0 operator) and its LU factors."""

    matrix: np.ndarray
    lu: tuple
    condition: float

    def solve(self, r: np.ndarray) -> np.ndarray:
        return sla.lu_solve(self.lu, r, check_finite=False)


def lambda0_matrix(cache: FundamentalCache, sys: SecondOrderSystem, weights: CostWeights
                   ) -> np.ndarray:
    """Columns ``Lambda^0(e_i)``; with gamma = 0 the inner map is linear."""
    op = _operator(sys, weights)
    steps, p, dim = cache.load.shape
    lin = cache.load.reshape(steps, p * dim)
    # op.solve acts per column, and every (control, basis) pair is a column
    u = -op.solve(lin).reshape(steps, p, dim)
    return -np.einsum("kji,kjl->il", cache.load, u)


def assemble_precond(cache: FundamentalCache, sys: SecondOrderSystem,
                     weights: CostWeights) -> Preconditioner:
    """Factorize ``Lambda^0`` with partial pivoting.

    Raises :class:`PrecondSingular` when the matrix is numerically singular,
    which happens for uncontrollable systems.
    """
    mat = lambda0_matrix(cache, sys, weights.with_gamma(0.0))
    sv = np.linalg.svd(mat, compute_uv=False)
    tol = mat.shape[0] * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    if sv.size == 0 or sv[0] == 0.0 or sv[-1] <= tol:
        raise PrecondSingular(
            "the gamma=0 operator is singular; the system is not controllable on this grid")
    return Preconditioner(mat, sla.lu_factor(mat), float(sv[0] / sv[-1]))


# sweep budget for warm-started inner solves before retrying from zero
WARM_SWEEPS = 5000


@dataclass(frozen=True)
class OuterOptions:
    rho: float = 1.0
    tol_phi: float = 1e-10
    tol_terminal: float = 1e-8
    max_outer: int = 500
    inner_tol: float = 1e-10
    inner_max_iter: int = 100_000
    check_identity: bool = False
    anderson_depth: int = 6
    max_expand: float = 2.0 ** 20


@dataclass(eq=False)
class OuterReport:
    phi: PhiVector
    control: ControlSignal
    multiplier: MultiplierField
    terminal_norm: float
    outer_iters: int
    residual_history: list = field(default_factory=list)
    converged: bool = True
    inner_iters: int = 0
    reference_energy: float = 0.0
    weights: CostWeights = None
    trajectory: Trajectory = None


def reference_energy(sys: SecondOrderSystem, params: NewmarkParams = DEFAULT_PARAMS) -> float:
    """Scale for the terminal tolerance: ``|X0|^2 + |X1|^2``.

    With zero initial data (forcing only) the uncontrolled terminal norm is
    used instead.
    """
    e0 = sys.initial_energy()
    if e0 > 0:
        return e0
    if not np.any(sys.forcing):
        return 0.0
    return terminal_norm(newmark_forward(sys, None, params))


def solve_direct_gamma0(sys: SecondOrderSystem, weights: CostWeights,
                        params: NewmarkParams = DEFAULT_PARAMS):
    """Exact control for gamma = 0 from one linear solve ``Lambda^0 Phi = L``.

    Returns ``(phi, control)``.
    """
    cache = build_cache(sys, params=params)
    pre = assemble_precond(cache, sys, weights)
    phi = pre.solve(build_L(cache, sys))
    w0 = weights.with_gamma(0.0)
    u = inner_from_phi(cache, phi, w0, sys).u
    return PhiVector.from_array(phi), u


def _merit(pre, r):
    if pre is None:
        return float(np.linalg.norm(r))
    return float(np.sqrt(max(r @ pre.solve(r), 0.0)))


def solve_exact_control(sys: SecondOrderSystem, grid: TimeGrid = None,
                        weights: CostWeights = CostWeights(),
                        opts: OuterOptions = OuterOptions(),
                        params: NewmarkParams = DEFAULT_PARAMS, *,
                        raise_on_fail: bool = True) -> OuterReport:
    """Preconditioned iteration ``Phi <- Phi - rho (Lambda^0)^-1 (Lambda(Phi) - L)``.

    A trial step is accepted when the residual measured in the
    ``(Lambda^0)^-1`` metric does not increase; otherwise ``rho`` is halved.
    After three accepted steps at a reduced ``rho`` the nominal value is
    restored. Accepted steps that leave the residual unchanged (the control
    is still identically zero) double ``rho`` up to ``max_expand`` times its
    nominal value. Steps are Anderson-accelerated when that helps. The loop stops when the step is below
    ``tol_phi * (1 + |Phi|)`` or the terminal norm is below
    ``tol_terminal`` times :func:`reference_energy`.
    """
    if grid is not None and grid != sys.grid:
        if np.any(sys.forcing):
            raise GridMismatch("forcing is sampled on the system grid; rebuild the system")
        sys = sys.with_data(grid=grid)
    if not controllability_rank(sys).controllable:
        warnings.warn("system fails the controllability rank test; continuing", RuntimeWarning)

    n = sys.n_dof
    cache = build_cache(sys, params=params)
    try:
        pre = assemble_precond(cache, sys, weights)
    except PrecondSingular as exc:
        warnings.warn(f"{exc}; falling back to the identity preconditioner", RuntimeWarning)
        pre = None
    precond = (lambda r: r) if pre is None else pre.solve
    L = build_L(cache, sys)
    e_ref = reference_energy(sys, params)
    target = opts.tol_terminal * e_ref

    inner_kw = dict(tol=opts.inner_tol, max_iter=opts.inner_max_iter)

    def evaluate(phi_arr, lam0):
        if lam0 is None:
            res = inner_from_phi(cache, phi_arr, weights, sys, **inner_kw)
        else:
            warm_kw = dict(inner_kw, max_iter=min(opts.inner_max_iter, WARM_SWEEPS))
            try:
                res = inner_from_phi(cache, phi_arr, weights, sys, lambda0=lam0, **warm_kw)
            except MaxIterExceeded:
                # a stale multiplier can trap the sweep; start over from zero
                res = inner_from_phi(cache, phi_arr, weights, sys, **inner_kw)
        traj = newmark_forward(sys, res.u, params)
        r = terminal_residual(cache, sys, traj)
        if opts.check_identity:
            direct = _pair_with_basis(cache, res.u) - L
            scale = max(np.abs(direct).max(), np.abs(L).max(), 1e-300)
            if np.abs(direct - r).max() > 1e-8 * scale:
                raise AssertionError("residual identity violated")
        return res, traj, r

    phi = np.zeros(2 * n)
    inner_total = 0
    res, traj, r = evaluate(phi, None)
    inner_total += res.iters
    tn = terminal_norm(traj)
    merit = _merit(pre, r)
    history = [merit]

    def report(it, converged):
        return OuterReport(PhiVector(phi[:n], phi[n:]), res.u, res.lam, tn, it, history,
                           converged, inner_total, e_ref, weights, traj)

    if tn <= target:
        return report(0, True)

    rho = opts.rho
    accepted_at_reduced = 0
    hist_phi, hist_f = [], []
    for it in range(1, opts.max_outer + 1):
        f = -rho * precond(r)
        candidates = []
        if opts.anderson_depth > 0 and hist_phi:
            dX = np.diff(np.array(hist_phi + [phi]), axis=0).T
            dF = np.diff(np.array(hist_f + [f]), axis=0).T
            theta = np.linalg.lstsq(dF, f, rcond=1e-12)[0]
            candidates.append(phi + f - (dX + dF) @ theta)
        candidates.append(phi + f)
        accepted = False
        for trial in candidates:
            res_t, traj_t, r_t = evaluate(trial, res.lam)
            inner_total += res_t.iters
            merit_t = _merit(pre, r_t)
            if merit_t <= merit:
                accepted = True
                break
        while not accepted:
            # plain step rejected too: halve rho and restart the history
            rho *= 0.5
            accepted_at_reduced = 0
            hist_phi, hist_f = [], []
            f = -rho * precond(r)
            trial = phi + f
            res_t, traj_t, r_t = evaluate(trial, res.lam)
            inner_total += res_t.iters
            merit_t = _merit(pre, r_t)
            accepted = merit_t <= merit or rho < 1e-12 * opts.rho
        step = trial - phi
        hist_phi.append(phi)
        hist_f.append(f)
        del hist_phi[:-opts.anderson_depth or None], hist_f[:-opts.anderson_depth or None]
        merit_prev = merit
        phi, res, traj, r, merit = trial, res_t, traj_t, r_t, merit_t
        tn = terminal_norm(traj)
        history.append(merit)
        if merit_t >= merit_prev * (1.0 - 1e-12) and rho >= opts.rho:
            # flat region of Lambda (u stays zero): widen the step
            rho = min(2.0 * rho, opts.max_expand * opts.rho)
            hist_phi, hist_f = [], []
        elif rho > opts.rho:
            rho = opts.rho
            hist_phi, hist_f = [], []
        elif rho < opts.rho:
            accepted_at_reduced += 1
            if accepted_at_reduced >= 3:
                rho, accepted_at_reduced = opts.rho, 0
                hist_phi, hist_f = [], []
        small_step = np.linalg.norm(step) <= opts.tol_phi * (1.0 + np.linalg.norm(phi))
        if tn <= target or small_step:
            return report(it, True)

    out = report(opts.max_outer, False)
    if raise_on_fail:
        raise MaxOuterExceeded(
            f"outer iteration did not converge in {opts.max_outer} steps "
            f"(terminal norm {tn:.3e}, target {target:.3e})", out)
    return out


def minimum_cost_certificate(report: OuterReport, sys: SecondOrderSystem,
                             weights: CostWeights = None, n_probes: int = 20, *,
                             scale: float = 1e-2, seed=0, modes: int = 8,
                             params: NewmarkParams = DEFAULT_PARAMS) -> float:
    """Smallest cost gap between exact perturbations of the report control and itself.

    Each probe adds a random smooth field ``w`` (a few sine modes, vanishing
    at the ends) and a gamma = 0 correction ``c`` that cancels the terminal
    effect of ``w``, so ``u + w + c`` reaches the same terminal state as
    ``u``. A nonnegative return value certifies minimality among the sampled
    exact controls.
    """
    weights = report.weights if weights is None else weights
    rng = np.random.default_rng(seed)
    grid = sys.grid
    cache = build_cache(sys, params=params)
    pre = assemble_precond(cache, sys, weights)
    homog = sys.with_data(forcing=np.zeros_like(sys.forcing),
                          x0=np.zeros(sys.n_dof), x1=np.zeros(sys.n_dof))
    homog_cache = build_cache(homog, params=params)
    base = control_cost(report.control, weights)
    amp = scale * max(np.abs(report.control.values).max(), 1.0)
    t = grid.nodes / grid.horizon
    sines = np.sin(np.pi * np.outer(t, np.arange(1, modes + 1)))
    sines[0] = sines[-1] = 0.0
    w0 = weights.with_gamma(0.0)
    gaps = []
    for _ in range(n_probes):
        coef = rng.standard_normal((modes, sys.n_controls)) / np.arange(1, modes + 1)[:, None]
        vals = sines @ coef
        vals *= amp / max(np.abs(vals).max(), 1e-300)
        w = ControlSignal(grid, vals)
        phi_c = -pre.solve(residual(homog_cache, homog, w, params))
        c = inner_from_phi(cache, phi_c, w0, sys).u
        gaps.append(control_cost(report.control + w + c, weights) - base)
    return float(min(gaps)) if gaps else 0.0
