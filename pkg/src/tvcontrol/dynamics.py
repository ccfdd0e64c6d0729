"""Linear second-order systems ``M x'' + C x' + K x = F + B u``.

The module owns model validation (dimensions, symmetric positive definite
inertia), the first-order reduction used for the controllability diagnostic,
and the plain-text matrix file format used to exchange models.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

from .errors import DimensionMismatch, MassNotSPD, ParseError

SPD_RTOL = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, horizon]`` into ``steps`` elements."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 2:
            raise ValueError(f"steps must be an integer >= 2, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def n_nodes(self) -> int:
        return self.steps + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_nodes) * self.dt


@dataclass(frozen=True, eq=False)
class SecondOrderSystem:
    """Validated linear model on a time grid.

    ``forcing`` holds nodal samples of F (shape ``(K+1, N)``), interpolated
    linearly between nodes. Damping and stiffness carry no definiteness
    requirement. Construction factorizes the inertia matrix once.
    """

    mass: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    control_map: np.ndarray
    forcing: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    grid: TimeGrid
    _mass_factor: tuple = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        as_float = lambda a: np.array(a, dtype=float)  # noqa: E731
        M = np.atleast_2d(as_float(self.mass))
        n = M.shape[0]
        C = np.atleast_2d(as_float(self.damping))
        K = np.atleast_2d(as_float(self.stiffness))
        B = as_float(self.control_map)
        if B.ndim == 1:
            B = B.reshape(n, -1)
        for name, mat in (("mass", M), ("damping", C), ("stiffness", K)):
            if mat.shape != (n, n):
                raise DimensionMismatch(f"{name} has shape {mat.shape}, expected {(n, n)}")
        if B.ndim != 2 or B.shape[0] != n or B.shape[1] < 1:
            raise DimensionMismatch(f"control_map has shape {B.shape}, expected ({n}, p)")
        F = as_float(self.forcing)
        if F.ndim == 1 and n == 1:
            F = F.reshape(-1, 1)
        if F.shape != (self.grid.n_nodes, n):
            raise DimensionMismatch(
                f"forcing has shape {F.shape}, expected {(self.grid.n_nodes, n)}")
        x0 = as_float(self.x0).reshape(-1)
        x1 = as_float(self.x1).reshape(-1)
        if x0.shape != (n,) or x1.shape != (n,):
            raise DimensionMismatch("initial displacement and velocity must be N-vectors")
        for name, arr in (("mass", M), ("damping", C), ("stiffness", K),
                          ("control_map", B), ("forcing", F), ("x0", x0), ("x1", x1)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

        scale = np.abs(M).max()
        if scale == 0 or np.abs(M - M.T).max() > SPD_RTOL * scale:
            raise MassNotSPD("mass matrix is not symmetric")
        M = 0.5 * (M + M.T)
        try:
            factor = sla.cho_factor(M, lower=True)
        except np.linalg.LinAlgError as exc:
            raise MassNotSPD("mass matrix is not positive definite") from exc
        if np.min(np.abs(np.diag(factor[0]))) ** 2 <= SPD_RTOL * scale:
            raise MassNotSPD("mass matrix is numerically singular")

        for name, arr in (("mass", M), ("damping", C), ("stiffness", K),
                          ("control_map", B), ("forcing", F), ("x0", x0), ("x1", x1)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_mass_factor", factor)

    @property
    def n_dof(self) -> int:
        return self.mass.shape[0]

    @property
    def n_controls(self) -> int:
        return self.control_map.shape[1]

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``M y = rhs`` with the cached Cholesky factor."""
        return sla.cho_solve(self._mass_factor, rhs, check_finite=False)

    def initial_energy(self) -> float:
        """``|X0|^2 + |X1|^2``, the initial counterpart of the terminal norm."""
        return float(self.x0 @ self.x0 + self.x1 @ self.x1)

    def with_data(self, *, forcing=None, x0=None, x1=None, grid=None) -> "SecondOrderSystem":
        """Copy of the system with replaced forcing, initial data or grid."""
        grid = self.grid if grid is None else grid
        if forcing is None:
            forcing = (self.forcing if grid == self.grid
                       else np.zeros((grid.n_nodes, self.n_dof)))
        return SecondOrderSystem(
            self.mass, self.damping, self.stiffness, self.control_map, forcing,
            self.x0 if x0 is None else x0, self.x1 if x1 is None else x1, grid)

    def cached(self, key, build):
        """Memoize ``build()`` under ``key`` for the lifetime of the system."""
        try:
            return self._cache[key]
        except KeyError:
            value = self._cache[key] = build()
            return value


def make_system(matrices, forcing=None, initial_data=None, grid: TimeGrid = None
                ) -> SecondOrderSystem:
    """Build a validated :class:`SecondOrderSystem`.

    ``matrices`` is a mapping with keys ``M``, ``C``, ``K``, ``B`` (``C``
    defaults to zero). ``forcing`` defaults to zero; ``initial_data`` is a
    pair ``(x0, x1)`` and defaults to zero.
    """
    if grid is None:
        raise ValueError("a TimeGrid is required")
    M = np.atleast_2d(np.asarray(matrices["M"], dtype=float))
    n = M.shape[0]
    C = matrices.get("C")
    C = np.zeros((n, n)) if C is None else C
    if forcing is None:
        forcing = np.zeros((grid.n_nodes, n))
    x0, x1 = (np.zeros(n), np.zeros(n)) if initial_data is None else initial_data
    return SecondOrderSystem(M, C, matrices["K"], matrices["B"], forcing, x0, x1, grid)


@dataclass(frozen=True, eq=False)
class FirstOrderForm:
    """``z' = a z + b u`` acting on ``z = (x, x')``.

    The top row of blocks is ``[0, I]``; the bottom row holds
    ``stiffness_block = -M^-1 K`` and ``damping_block = -M^-1 C``.
    """

    a: np.ndarray
    b: np.ndarray

    @property
    def n_dof(self) -> int:
        return self.a.shape[0] // 2

    @property
    def stiffness_block(self) -> np.ndarray:
        n = self.n_dof
        return self.a[n:, :n]

    @property
    def damping_block(self) -> np.ndarray:
        n = self.n_dof
        return self.a[n:, n:]


def first_order_form(sys: SecondOrderSystem) -> FirstOrderForm:
    n = sys.n_dof
    a = np.zeros((2 * n, 2 * n))
    a[:n, n:] = np.eye(n)
    a[n:, :n] = -sys.solve_mass(sys.stiffness)
    a[n:, n:] = -sys.solve_mass(sys.damping)
    b = np.zeros((2 * n, sys.n_controls))
    b[n:] = sys.solve_mass(sys.control_map)
    return FirstOrderForm(a, b)


class Controllability(NamedTuple):
    controllable: bool
    numeric_rank: int
    singular_values: np.ndarray


def kalman_matrix(form: FirstOrderForm) -> np.ndarray:
    blocks = [form.b]
    for _ in range(form.a.shape[0] - 1):
        blocks.append(form.a @ blocks[-1])
    return np.hstack(blocks)


def controllability_rank(sys: SecondOrderSystem) -> Controllability:
    """Numeric rank of ``[b, ab, ..., a^(2N-1) b]`` via singular values."""
    form = first_order_form(sys)
    sv = np.linalg.svd(kalman_matrix(form), compute_uv=False)
    dim = form.a.shape[0]
    if sv.size == 0 or sv[0] == 0.0:
        return Controllability(False, 0, sv)
    threshold = dim * np.finfo(float).eps * sv[0]
    rank = int(np.sum(sv > threshold))
    return Controllability(rank == dim, rank, sv)


# -- matrix file format --------------------------------------------------------
#
#   N p K T
#   M (N rows of N values), C, K (same), B (N rows of p values)
#   K+1 forcing rows of N values
#   X0 row, X1 row
#
# Blank lines and lines starting with '#' are ignored.

def _format_row(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_system_file(sys: SecondOrderSystem, path) -> None:
    n, p = sys.n_dof, sys.n_controls
    lines = [f"{n} {p} {sys.grid.steps} {sys.grid.horizon!r}"]
    for mat in (sys.mass, sys.damping, sys.stiffness, sys.control_map):
        lines.extend(_format_row(row) for row in mat)
    lines.extend(_format_row(row) for row in sys.forcing)
    lines.append(_format_row(sys.x0))
    lines.append(_format_row(sys.x1))
    Path(path).write_text("\n".join(lines) + "\n")


def read_system_file(path) -> SecondOrderSystem:
    text = Path(path).read_text()
    rows = [(no, line.split()) for no, line in enumerate(text.splitlines(), start=1)
            if line.strip() and not line.lstrip().startswith("#")]
    cursor = iter(rows)
    last_line = rows[-1][0] if rows else 1

    def take(count, width, what):
        out = []
        for i in range(count):
            try:
                no, fields = next(cursor)
            except StopIteration:
                raise ParseError(f"unexpected end of file while reading {what} "
                                 f"(row {i + 1} of {count})", last_line) from None
            if len(fields) != width:
                raise ParseError(f"{what}: expected {width} values, got {len(fields)}", no)
            try:
                out.append([float(v) for v in fields])
            except ValueError:
                raise ParseError(f"{what}: non-numeric value", no) from None
        return np.array(out, dtype=float).reshape(count, width)

    try:
        no, header = next(cursor)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    if len(header) != 4:
        raise ParseError("header must read 'N p K T'", no)
    try:
        n, p, steps = (int(v) for v in header[:3])
        horizon = float(header[3])
    except ValueError:
        raise ParseError("header must read 'N p K T' with integer N, p, K", no) from None
    if n < 1 or p < 1 or steps < 2 or not horizon > 0:
        raise ParseError("header values out of range", no)

    M = take(n, n, "M")
    C = take(n, n, "C")
    K = take(n, n, "K")
    B = take(n, p, "B")
    F = take(steps + 1, n, "forcing")
    x0 = take(1, n, "X0")[0]
    x1 = take(1, n, "X1")[0]
    extra = next(cursor, None)
    if extra is not None:
        raise ParseError("trailing data after X1", extra[0])
    return SecondOrderSystem(M, C, K, B, F, x0, x1, TimeGrid(horizon, steps))
