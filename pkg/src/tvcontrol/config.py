"""Run configuration: a TOML file describing the model, grid, weights and solver.

Schema (every table is optional unless noted)::

    model = "two_mass"            # or "boat", or "file:<path to matrix file>"
    scenario = "heave_impact"     # boat presets, or "custom" with [initial]

    [initial]                     # overrides the preset initial data
    x0 = [1.0, 0.0]
    x1 = [0.0, 0.0]

    [params]                      # overrides of the pinned model defaults
    speed = 12.0

    [grid]                        # defaults come from the model
    T = 2.6
    K = 520

    [weights]
    alpha = 1.0
    beta = 1.0
    gamma_list = [0, 20, 100, 1000]   # or a single `gamma = 20`
    epsilon = 1.0

    [solver]
    rho = 1.0
    tol_phi = 1e-10
    tol_terminal = 1e-8
    max_outer = 500
    inner_tol = 1e-10
    inner_max_iter = 100000
    seed = 0
    probes = 8                    # minimum-cost certificate probes, 0 to skip
    workers = 0                   # 0 = one per gamma up to the CPU count

    [output]
    dir = "out"

Relative paths are resolved against the directory holding the config file.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import SecondOrderSystem, TimeGrid
from .errors import ConfigError, TVControlError
from .inner import CostWeights
from .outer import OuterOptions

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

OUT_DIR_ENV = "TVCONTROL_OUT_DIR"
BOAT_SCENARIOS = ("heave_impact", "pitch_impact", "custom")

_TOP_KEYS = {"model", "scenario", "initial", "params", "grid", "weights", "solver", "output"}
_TABLE_KEYS = {
    "initial": {"x0", "x1"},
    "grid": {"T", "K"},
    "weights": {"alpha", "beta", "gamma", "gamma_list", "epsilon"},
    "solver": {"rho", "tol_phi", "tol_terminal", "max_outer", "inner_tol", "inner_max_iter",
               "seed", "probes", "workers"},
    "output": {"dir"},
}


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 1.0
    tol_phi: float = 1e-10
    tol_terminal: float = 1e-8
    max_outer: int = 500
    inner_tol: float = 1e-10
    inner_max_iter: int = 100_000
    seed: int = 0
    probes: int = 8
    workers: int = 0

    def outer_options(self) -> OuterOptions:
        return OuterOptions(rho=self.rho, tol_phi=self.tol_phi, tol_terminal=self.tol_terminal,
                            max_outer=self.max_outer, inner_tol=self.inner_tol,
                            inner_max_iter=self.inner_max_iter)


@dataclass(frozen=True)
class RunConfig:
    model: str = "two_mass"
    model_path: Path = None
    scenario: str = None
    x0: tuple = None
    x1: tuple = None
    params: dict = field(default_factory=dict)
    horizon: float = None
    steps: int = None
    alpha: float = 1.0
    beta: float = 1.0
    gammas: tuple = (0.0,)
    epsilon: float = 1.0
    solver: SolverConfig = SolverConfig()
    out_dir: Path = Path("tvcontrol_out")

    def weights(self, gamma: float) -> CostWeights:
        return CostWeights(self.alpha, self.beta, gamma, self.epsilon)

    def with_overrides(self, *, out_dir=None, seed=None) -> "RunConfig":
        """Apply command-line and environment overrides (flag > env > file)."""
        cfg = self
        env = os.environ.get(OUT_DIR_ENV)
        if out_dir is not None:
            cfg = replace(cfg, out_dir=Path(out_dir))
        elif env:
            cfg = replace(cfg, out_dir=Path(env))
        if seed is not None:
            cfg = replace(cfg, solver=replace(cfg.solver, seed=int(seed)))
        return cfg


def _number(value, name, *, positive=False, nonneg=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if integer and not float(value).is_integer():
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    value = int(value) if integer else float(value)
    if not np.isfinite(value):
        raise ConfigError(f"{name} must be finite")
    if positive and value <= 0:
        raise ConfigError(f"{name} must be > 0, got {value}")
    if nonneg and value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value}")
    return value


def _vector(value, name):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{name} must be a non-empty list of numbers")
    return tuple(_number(v, f"{name}[{i}]") for i, v in enumerate(value))


def parse_config(data: dict, base_dir=".") -> RunConfig:
    """Validate a decoded TOML document and build a :class:`RunConfig`."""
    base_dir = Path(base_dir)
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for table, allowed in _TABLE_KEYS.items():
        entry = data.get(table, {})
        if not isinstance(entry, dict):
            raise ConfigError(f"[{table}] must be a table")
        extra = set(entry) - allowed
        if extra:
            raise ConfigError(f"unknown keys in [{table}]: {sorted(extra)}")

    model = data.get("model", "two_mass")
    if not isinstance(model, str):
        raise ConfigError("model must be a string")
    model_path = None
    if model.startswith("file:"):
        raw = model[len("file:"):].strip()
        if not raw:
            raise ConfigError("file model needs a path, e.g. model = \"file:matrices.txt\"")
        model_path = Path(raw) if Path(raw).is_absolute() else base_dir / raw
        model = "file"
    elif model not in ("two_mass", "boat"):
        raise ConfigError(f"model must be two_mass, boat or file:<path>, got {model!r}")

    scenario = data.get("scenario")
    initial = data.get("initial", {})
    if scenario is not None:
        if model != "boat" and scenario != "custom":
            raise ConfigError(f"scenario {scenario!r} only applies to the boat model")
        if scenario not in BOAT_SCENARIOS:
            raise ConfigError(f"scenario must be one of {BOAT_SCENARIOS}, got {scenario!r}")
    if model == "boat" and scenario is None:
        scenario = "heave_impact"
    if scenario == "custom" and not ("x0" in initial and "x1" in initial):
        raise ConfigError("custom scenario needs [initial] x0 and x1")
    x0 = _vector(initial["x0"], "initial.x0") if "x0" in initial else None
    x1 = _vector(initial["x1"], "initial.x1") if "x1" in initial else None

    params = data.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("[params] must be a table")
    if model == "file" and params:
        raise ConfigError("[params] does not apply to file models")

    grid = data.get("grid", {})
    horizon = _number(grid["T"], "grid.T", positive=True) if "T" in grid else None
    steps = _number(grid["K"], "grid.K", positive=True, integer=True) if "K" in grid else None

    w = data.get("weights", {})
    if "gamma" in w and "gamma_list" in w:
        raise ConfigError("give either weights.gamma or weights.gamma_list, not both")
    if "gamma_list" in w:
        gammas = _vector(w["gamma_list"], "weights.gamma_list")
    else:
        gammas = (_number(w.get("gamma", 0.0), "weights.gamma"),)
    if any(g < 0 for g in gammas):
        raise ConfigError("gamma values must be >= 0")
    if len(set(gammas)) != len(gammas):
        raise ConfigError("gamma_list has repeated values")
    alpha = _number(w.get("alpha", 1.0), "weights.alpha", nonneg=True)
    beta = _number(w.get("beta", 1.0), "weights.beta", nonneg=True)
    epsilon = _number(w.get("epsilon", 1.0), "weights.epsilon", positive=True)
    if alpha + beta <= 0:
        raise ConfigError("alpha + beta must be > 0")

    s = data.get("solver", {})
    defaults = SolverConfig()
    solver = SolverConfig(
        rho=_number(s.get("rho", defaults.rho), "solver.rho", positive=True),
        tol_phi=_number(s.get("tol_phi", defaults.tol_phi), "solver.tol_phi", positive=True),
        tol_terminal=_number(s.get("tol_terminal", defaults.tol_terminal),
                             "solver.tol_terminal", positive=True),
        max_outer=_number(s.get("max_outer", defaults.max_outer), "solver.max_outer",
                          positive=True, integer=True),
        inner_tol=_number(s.get("inner_tol", defaults.inner_tol), "solver.inner_tol",
                          positive=True),
        inner_max_iter=_number(s.get("inner_max_iter", defaults.inner_max_iter),
                               "solver.inner_max_iter", positive=True, integer=True),
        seed=_number(s.get("seed", defaults.seed), "solver.seed", nonneg=True, integer=True),
        probes=_number(s.get("probes", defaults.probes), "solver.probes", nonneg=True,
                       integer=True),
        workers=_number(s.get("workers", defaults.workers), "solver.workers", nonneg=True,
                        integer=True),
    )

    out = data.get("output", {})
    out_dir = out.get("dir", "tvcontrol_out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output.dir must be a non-empty string")
    out_dir = Path(out_dir) if Path(out_dir).is_absolute() else base_dir / out_dir

    return RunConfig(model=model, model_path=model_path, scenario=scenario, x0=x0, x1=x1,
                     params=dict(params), horizon=horizon, steps=steps, alpha=alpha, beta=beta,
                     gammas=gammas, epsilon=epsilon, solver=solver, out_dir=out_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, path.parent)


def build_system(cfg: RunConfig) -> SecondOrderSystem:
    """Instantiate the configured model on its grid with its initial data."""
    from . import models

    try:
        if cfg.model == "two_mass":
            base = models.two_mass_demo(cfg.horizon, cfg.steps, overrides=cfg.params)
        elif cfg.model == "boat":
            scenario = "heave_impact" if cfg.scenario in (None, "custom") else cfg.scenario
            base = models.boat_demo(scenario, cfg.horizon, cfg.steps, overrides=cfg.params)
        else:
            base = models.load_system_file(cfg.model_path)
    except (TypeError, KeyError, ValueError) as exc:
        if isinstance(exc, TVControlError):
            raise
        raise ConfigError(f"invalid model parameters: {exc}") from exc

    grid = base.grid
    if cfg.horizon is not None or cfg.steps is not None:
        grid = TimeGrid(cfg.horizon or grid.horizon, cfg.steps or grid.steps)
    if grid != base.grid and np.any(base.forcing):
        raise ConfigError("the model's forcing is sampled on its own grid; drop [grid]")
    x0 = base.x0 if cfg.x0 is None else np.array(cfg.x0)
    x1 = base.x1 if cfg.x1 is None else np.array(cfg.x1)
    for name, vec in (("x0", x0), ("x1", x1)):
        if vec.shape != (base.n_dof,):
            raise ConfigError(f"initial.{name} has length {vec.size}, model has {base.n_dof} dof")
    return base.with_data(grid=grid, x0=x0, x1=x1)
