"""Command-line front end.

Verbs::

    tvcontrol simulate     uncontrolled forward solve -> trajectory.csv
    tvcontrol control      exact control for each gamma -> control_g*.csv, trajectory_g*.csv,
                           summary.csv
    tvcontrol gamma-study  as ``control`` plus flatness.csv (needs >= 3 gamma values)
    tvcontrol check        controllability and (boat) trim report -> check.csv

Exit codes: 0 success, 2 configuration or model error, 3 solver did not
converge for at least one gamma, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, build_system, load_config
from .dynamics import controllability_rank
from .errors import ConfigError, MaxIterExceeded, TVControlError
from .inner import control_cost, l2_cost, tv_seminorm
from .integrator import newmark_forward
from .outer import (assemble_precond, build_cache, minimum_cost_certificate,
                    solve_exact_control, terminal_norm)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
FLAT_RTOL = 1e-8
DEMO_CONFIG = RunConfig(gammas=(0.0, 20.0, 100.0, 1000.0))

log = logging.getLogger("tvcontrol")

SUMMARY_FIELDS = ("gamma", "converged", "terminal_norm", "terminal_rel", "tv", "l2_cost",
                  "cost", "outer_iters", "inner_iters", "certificate", "controllable")


def fmt(value) -> str:
    """Shortest round-trip text for numbers; plain ``str`` otherwise."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def gamma_tag(gamma: float) -> str:
    g = float(gamma)
    return str(int(g)) if g.is_integer() and abs(g) < 1e15 else repr(g)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def write_trajectory(path: Path, traj) -> None:
    n = traj.x.shape[1]
    header = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)]
    write_csv(path, header, np.column_stack([traj.t, traj.x, traj.v]))


def write_control(path: Path, control) -> None:
    p = control.values.shape[1]
    header = ["t"] + [f"u_{i + 1}" for i in range(p)]
    write_csv(path, header, np.column_stack([control.grid.nodes, control.values]))


def plateau_fraction(control, rtol: float = FLAT_RTOL) -> float:
    """Fraction of elements whose slope norm is at most ``rtol`` times the largest one."""
    slopes = np.linalg.norm(control.slopes, axis=1)
    top = slopes.max()
    if top == 0.0:
        return 1.0
    return float(np.mean(slopes <= rtol * top))


# -- per-gamma work (runs in worker processes) ------------------------------------

@dataclass
class GammaResult:
    gamma: float
    row: dict
    control: object = None
    trajectory: object = None
    plateau: float = float("nan")
    error: str = ""
    seconds: float = 0.0


def solve_gamma(cfg: RunConfig, gamma: float) -> GammaResult:
    start = time.perf_counter()
    system = build_system(cfg)
    weights = cfg.weights(gamma)
    controllable = controllability_rank(system).controllable
    row = dict.fromkeys(SUMMARY_FIELDS, float("nan"))
    row.update(gamma=float(gamma), converged=False, controllable=controllable)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            report = solve_exact_control(system, weights=weights,
                                         opts=cfg.solver.outer_options(), raise_on_fail=False)
    except MaxIterExceeded as exc:
        return GammaResult(float(gamma), row, error=str(exc),
                           seconds=time.perf_counter() - start)
    u = report.control
    e_ref = report.reference_energy
    row.update(
        converged=report.converged,
        terminal_norm=report.terminal_norm,
        terminal_rel=report.terminal_norm / e_ref if e_ref > 0 else 0.0,
        tv=tv_seminorm(u),
        l2_cost=l2_cost(u),
        cost=control_cost(u, weights),
        outer_iters=report.outer_iters,
        inner_iters=report.inner_iters,
    )
    if cfg.solver.probes > 0 and report.converged and controllable:
        row["certificate"] = minimum_cost_certificate(report, system, weights,
                                                      n_probes=cfg.solver.probes,
                                                      seed=cfg.solver.seed)
    error = "" if report.converged else "outer iteration did not converge"
    return GammaResult(float(gamma), row, u, report.trajectory, plateau_fraction(u), error,
                       time.perf_counter() - start)


def _solve_all(cfg: RunConfig) -> list:
    gammas = list(cfg.gammas)
    workers = cfg.solver.workers or min(len(gammas), os.cpu_count() or 1)
    if workers <= 1 or len(gammas) == 1:
        return [solve_gamma(cfg, g) for g in gammas]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(solve_gamma, [cfg] * len(gammas), gammas))


# -- verbs ----------------------------------------------------------------------

def run_simulate(cfg: RunConfig) -> int:
    system = build_system(cfg)
    traj = newmark_forward(system)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_trajectory(cfg.out_dir / "trajectory.csv", traj)
    log.info("trajectory.csv: %d rows, terminal norm %.6g", traj.x.shape[0],
             terminal_norm(traj))
    return EXIT_OK


def run_control(cfg: RunConfig, *, study: bool = False) -> int:
    build_system(cfg)                       # fail fast on model errors before spawning workers
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    results = _solve_all(cfg)
    timing = {}
    failed = False
    for res in results:
        tag = gamma_tag(res.gamma)
        timing[tag] = round(res.seconds, 3)
        if res.control is not None:
            write_control(cfg.out_dir / f"control_g{tag}.csv", res.control)
            write_trajectory(cfg.out_dir / f"trajectory_g{tag}.csv", res.trajectory)
        if res.error:
            failed = True
            log.warning("gamma=%s: %s", tag, res.error)
        if not res.row["controllable"]:
            log.warning("gamma=%s: system fails the controllability rank test", tag)
        log.info("gamma=%s: terminal/E0 %.3g, TV %.6g, %s outer iterations (%.2f s)", tag,
                 res.row["terminal_rel"], res.row["tv"], fmt(res.row["outer_iters"]),
                 res.seconds)
    write_csv(cfg.out_dir / "summary.csv", SUMMARY_FIELDS,
              ([res.row[k] for k in SUMMARY_FIELDS] for res in results))
    if study:
        write_csv(cfg.out_dir / "flatness.csv", ("gamma", "plateau_fraction", "elements"),
                  ((res.gamma, res.plateau, _elements(res)) for res in results))
    (cfg.out_dir / "timing.json").write_text(json.dumps({"seconds": timing}, indent=2) + "\n")
    return EXIT_SOLVER if failed else EXIT_OK


def _elements(res: GammaResult) -> int:
    return res.control.grid.steps if res.control is not None else 0


def run_gamma_study(cfg: RunConfig) -> int:
    if len(cfg.gammas) < 3:
        raise ConfigError(f"gamma-study needs at least 3 gamma values, got {len(cfg.gammas)}")
    return run_control(cfg, study=True)


def run_check(cfg: RunConfig) -> int:
    from . import models

    system = build_system(cfg)
    ctrl = controllability_rank(system)
    rows = [
        ("model", cfg.model),
        ("n_dof", system.n_dof),
        ("n_controls", system.n_controls),
        ("horizon", system.grid.horizon),
        ("steps", system.grid.steps),
        ("controllable", ctrl.controllable),
        ("kalman_rank", ctrl.numeric_rank),
        ("kalman_sigma_max", float(ctrl.singular_values[0])),
        ("kalman_sigma_min", float(ctrl.singular_values[-1])),
    ]
    sym = np.linalg.eigvalsh(0.5 * (system.damping + system.damping.T))
    rows += [("damping_sym_eig_min", float(sym[0])), ("damping_sym_eig_max", float(sym[-1]))]
    try:
        pre = assemble_precond(build_cache(system), system, cfg.weights(0.0))
        rows.append(("lambda0_condition", pre.condition))
    except TVControlError:
        rows.append(("lambda0_condition", float("inf")))
    if cfg.model == "boat":
        bp = models.default_boat_params(cfg.params)
        trim = models.trim_equilibrium(bp)
        lift, moment = models.trim_residuals(bp, trim)
        rows += [("alpha0", trim.alpha0), ("beta0", trim.beta0),
                 ("alpha0_deg", float(np.degrees(trim.alpha0))),
                 ("beta0_deg", float(np.degrees(trim.beta0))),
                 ("trim_lift_residual", lift), ("trim_moment_residual", moment)]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out_dir / "check.csv", ("quantity", "value"), rows)
    for name, value in rows:
        log.info("%-22s %s", name, fmt(value))
    return EXIT_OK


VERBS = {
    "simulate": run_simulate,
    "control": run_control,
    "gamma-study": run_gamma_study,
    "check": run_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvcontrol",
        description="Exact controls for linear second-order systems with a "
                    "total-variation penalty on the control.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("verb", choices=sorted(VERBS))
    parser.add_argument("--config", type=Path,
                        help="TOML run configuration (default: the two-mass demo)")
    parser.add_argument("--out", type=Path, help="output directory (overrides env and config)")
    parser.add_argument("--seed", type=int, help="seed for the certificate probes")
    parser.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config else DEMO_CONFIG
        cfg = cfg.with_overrides(out_dir=args.out, seed=args.seed)
        return VERBS[args.verb](cfg)
    except (ConfigError, TVControlError) as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
