"""Concrete systems: the two-mass spring chain and a two-DOF hydrofoil boat.

The boat carries a main foil (F, ahead of the centre of mass G at lever
``d_f``) and a rudder foil (R, behind G at lever ``d_r``), immersed at depths
``h_f`` and ``h_r``. The state is heave ``z`` and pitch ``theta``; the
controls are the flap deflections ``delta_r`` and ``delta_f``. Lift uses the
linear NACA 0012 fit ``c_z(zeta) = (18/pi) zeta``; drag is not part of the
heave/pitch balance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from importlib import resources
from typing import NamedTuple

import numpy as np

from .dynamics import SecondOrderSystem, TimeGrid, make_system, read_system_file

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

LIFT_SLOPE = 18.0 / math.pi
DRAG_RATIO = 0.01

FORCES = ("Fz", "My")
VARIABLES = ("z", "z_dot", "theta", "theta_dot", "delta_r", "delta_f")


class FoilCoefficients(NamedTuple):
    cl: float
    cd: float


def naca0012_coeffs(zeta: float) -> FoilCoefficients:
    """Lift and drag coefficients of the linear NACA 0012 fit (``zeta`` in radians)."""
    cl = LIFT_SLOPE * zeta
    return FoilCoefficients(cl, DRAG_RATIO * cl)


def lift_coefficient(zeta):
    return LIFT_SLOPE * zeta


@dataclass(frozen=True)
class BoatParams:
    mass: float
    pitch_inertia: float
    speed: float
    area_front: float
    area_rear: float
    lever_front: float
    lever_rear: float
    depth_front: float
    depth_rear: float
    water_density: float = 1000.0
    gravity: float = 9.81

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{f.name} must be finite and > 0, got {value}")


class TrimState(NamedTuple):
    alpha0: float
    beta0: float


def trim_equilibrium(bp: BoatParams) -> TrimState:
    """Foil angles that carry the weight with zero pitching moment at G.

    From ``S_r c_z(beta0) + S_f c_z(alpha0) = 2 M g / (rho V^2)`` and
    ``S_r d_r c_z(beta0) = S_f d_f c_z(alpha0)`` with the 18/pi slope.
    """
    base = math.pi * bp.mass * bp.gravity / (9.0 * bp.water_density * bp.speed ** 2
                                            * (bp.lever_rear + bp.lever_front))
    return TrimState(alpha0=base * bp.lever_rear / bp.area_front,
                     beta0=base * bp.lever_front / bp.area_rear)


def trim_residuals(bp: BoatParams, trim: TrimState) -> tuple[float, float]:
    """Net lift minus weight, and net pitching moment, at the trim angles."""
    q = 0.5 * bp.water_density * bp.speed ** 2
    cr, cf = lift_coefficient(trim.beta0), lift_coefficient(trim.alpha0)
    lift = q * (bp.area_rear * cr + bp.area_front * cf) - bp.mass * bp.gravity
    moment = q * (-bp.area_rear * bp.lever_rear * cr + bp.area_front * bp.lever_front * cf)
    return lift, moment


def boat_forces(bp: BoatParams, trim: TrimState, z=0.0, z_dot=0.0, theta=0.0,
                theta_dot=0.0, delta_r=0.0, delta_f=0.0) -> tuple[float, float]:
    """Nonlinear heave force and pitching moment at G.

    Apparent angles subtract the inflow angle seen by each foil,
    ``atan((z' - d_r theta') / (V + h_r theta'))`` at the rudder and
    ``atan((z' + d_f theta') / (V + h_f theta'))`` at the main foil, and
    both foils use their apparent speed. Heave itself does not enter.
    """
    del z
    V = bp.speed
    ur, wr = V + bp.depth_rear * theta_dot, z_dot - bp.lever_rear * theta_dot
    uf, wf = V + bp.depth_front * theta_dot, z_dot + bp.lever_front * theta_dot
    beta_a = trim.beta0 - math.atan2(wr, ur)
    alpha_a = trim.alpha0 - math.atan2(wf, uf)
    lr = bp.area_rear * (ur * ur + wr * wr) * lift_coefficient(beta_a + theta + delta_r)
    lf = bp.area_front * (uf * uf + wf * wf) * lift_coefficient(alpha_a + theta + delta_f)
    half_rho = 0.5 * bp.water_density
    fz = -bp.mass * bp.gravity + half_rho * (lr + lf)
    my = half_rho * (-bp.lever_rear * lr + bp.lever_front * lf)
    return fz, my


def force_derivatives(bp: BoatParams, trim: TrimState = None) -> dict:
    """Linearized heave-force and pitch-moment derivatives at trim.

    Keys are ``(force, variable)`` with force in :data:`FORCES` and variable
    in :data:`VARIABLES`.
    """
    trim = trim_equilibrium(bp) if trim is None else trim
    rho, V = bp.water_density, bp.speed
    Sr, Sf, dr, df = bp.area_rear, bp.area_front, bp.lever_rear, bp.lever_front
    hr, hf = bp.depth_rear, bp.depth_front
    c = LIFT_SLOPE
    czr, czf = lift_coefficient(trim.beta0), lift_coefficient(trim.alpha0)
    q = 0.5 * rho * V ** 2
    return {
        ("Fz", "z"): 0.0,
        ("My", "z"): 0.0,
        ("Fz", "z_dot"): -0.5 * rho * V * (Sr * c + Sf * c),
        ("My", "z_dot"): 0.5 * rho * V * (Sr * dr * c - Sf * df * c),
        ("Fz", "theta"): q * (Sr * c + Sf * c),
        ("My", "theta"): q * (-Sr * dr * c + Sf * df * c),
        ("Fz", "theta_dot"): rho * V * (Sr * hr * czr + Sf * hf * czf
                                        + 0.5 * Sr * dr * c - 0.5 * Sf * df * c),
        ("My", "theta_dot"): rho * V * (Sf * df * hf * czf - Sr * dr * hr * czr
                                        - 0.5 * Sr * dr ** 2 * c - 0.5 * Sf * df ** 2 * c),
        ("Fz", "delta_r"): q * Sr * c,
        ("Fz", "delta_f"): q * Sf * c,
        ("My", "delta_r"): -q * Sr * dr * c,
        ("My", "delta_f"): q * Sf * df * c,
    }


def boat_matrices(bp: BoatParams, trim: TrimState = None) -> dict:
    """``M, C, K, B`` of the linearized boat; state ``(z, theta)``, controls ``(u_r, u_f)``."""
    d = force_derivatives(bp, trim)
    return {
        "M": np.diag([bp.mass, bp.pitch_inertia]),
        "C": -np.array([[d["Fz", "z_dot"], d["Fz", "theta_dot"]],
                        [d["My", "z_dot"], d["My", "theta_dot"]]]),
        "K": -np.array([[d["Fz", "z"], d["Fz", "theta"]],
                        [d["My", "z"], d["My", "theta"]]]),
        "B": np.array([[d["Fz", "delta_r"], d["Fz", "delta_f"]],
                       [d["My", "delta_r"], d["My", "delta_f"]]]),
    }


def assemble_boat_system(bp: BoatParams, forcing=None, initial_data=None,
                         grid: TimeGrid = None) -> SecondOrderSystem:
    return make_system(boat_matrices(bp), forcing, initial_data, grid)


def two_mass_spring(m1: float = 1.0, m2: float = 1.0, k1: float = 1.0, k2: float = 1.0,
                    c1: float = 0.0, c2: float = 0.0, control_on: int = 0,
                    grid: TimeGrid = None, initial_data=None) -> SecondOrderSystem:
    """Wall - k1 - m1 - k2 - m2 chain with a single force on one mass.

    ``c1``/``c2`` are dashpots parallel to the springs; ``control_on`` is the
    0-based index of the actuated mass.
    """
    if min(m1, m2) <= 0 or min(k1, k2) < 0 or min(c1, c2) < 0:
        raise ValueError("masses must be > 0 and springs/dashpots >= 0")
    if control_on not in (0, 1):
        raise ValueError("control_on must be 0 or 1")
    chain = lambda a, b: np.array([[a + b, -b], [-b, b]])  # noqa: E731
    B = np.zeros((2, 1))
    B[control_on, 0] = 1.0
    return make_system({"M": np.diag([m1, m2]), "C": chain(c1, c2), "K": chain(k1, k2), "B": B},
                       initial_data=initial_data, grid=grid)


def stiffness_for_period(period: float, mass: float = 1.0) -> float:
    """Common spring constant giving the equal-mass chain a slowest period ``period``.

    The chain's eigenvalues are ``k/m * (3 -+ sqrt 5) / 2``.
    """
    omega = 2.0 * math.pi / period
    return mass * omega ** 2 / ((3.0 - math.sqrt(5.0)) / 2.0)


def natural_periods(sys: SecondOrderSystem) -> np.ndarray:
    """Undamped periods from the generalized eigenproblem ``K x = w^2 M x``, longest first."""
    import scipy.linalg as sla
    w2 = np.sort(sla.eigvals(sys.stiffness, sys.mass).real)
    return 2.0 * math.pi / np.sqrt(w2[w2 > 0])


def load_system_file(path) -> SecondOrderSystem:
    """Read a model in the plain-text matrix format (see :mod:`tvcontrol.dynamics`)."""
    return read_system_file(path)


# -- pinned demo parameters -------------------------------------------------------

def load_defaults() -> dict:
    text = resources.files("tvcontrol").joinpath("defaults.toml").read_text()
    return tomllib.loads(text)


def default_boat_params(overrides: dict = None) -> BoatParams:
    params = dict(load_defaults()["boat"]["params"])
    params.update(overrides or {})
    return BoatParams(**params)


def boat_scenario(name: str, bp: BoatParams = None) -> tuple[np.ndarray, np.ndarray]:
    """Initial ``(X0, X1)`` for a named boat scenario from the defaults file."""
    scen = load_defaults()["boat"]["scenarios"]
    if name not in scen:
        raise KeyError(f"unknown boat scenario {name!r}; known: {sorted(scen)}")
    entry = scen[name]
    return np.array(entry["x0"], dtype=float), np.array(entry["x1"], dtype=float)


def boat_demo(scenario: str = "heave_impact", horizon: float = None, steps: int = None,
              overrides: dict = None) -> SecondOrderSystem:
    cfg = load_defaults()["boat"]
    entry = cfg["scenarios"][scenario]
    grid = TimeGrid(horizon or entry["horizon"], steps or entry["steps"])
    bp = default_boat_params(overrides)
    return assemble_boat_system(bp, initial_data=boat_scenario(scenario), grid=grid)


TWO_MASS_PARAMS = frozenset({"largest_period", "mass", "damping", "control_on"})


def two_mass_demo(horizon: float = None, steps: int = None, initial_data=None,
                  overrides: dict = None) -> SecondOrderSystem:
    cfg = dict(load_defaults()["two_mass"])
    unknown = set(overrides or {}) - TWO_MASS_PARAMS
    if unknown:
        raise KeyError(f"unknown two-mass parameters {sorted(unknown)}; "
                       f"known: {sorted(TWO_MASS_PARAMS)}")
    cfg.update(overrides or {})
    k = stiffness_for_period(cfg["largest_period"], cfg["mass"])
    grid = TimeGrid(horizon or cfg["horizon"], steps or cfg["steps"])
    data = initial_data or (cfg["x0"], cfg["x1"])
    return two_mass_spring(cfg["mass"], cfg["mass"], k, k, cfg["damping"], cfg["damping"],
                           cfg["control_on"], grid, data)

