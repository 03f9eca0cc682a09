"""fimcharge command line.

    fimcharge oed <scenario>
    fimcharge charge <scenario> <reference.json>
    fimcharge fim <scenario> <profile.csv>
    fimcharge validate <scenario> [reference.json]

Exit codes: 0 success, 1 validation failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .ecm import ConfigError, CurrentProfile, ModelError, ScenarioConfig
from .mpc import run_closed_loop
from .oed import InfeasibleError, ReferenceTrajectory, baseline_profile, design
from .report import RunReport
from .sensitivity import FimMatrix, assemble_fim, d_optimality
from .validate import validate, validate_reference

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _log10(x: float) -> float:
    return math.log10(x) if x > 0 else -math.inf


def load_reference(path: str | Path) -> ReferenceTrajectory:
    try:
        return ReferenceTrajectory.load(path)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}", "reference") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"unreadable reference artifact ({exc})", "reference") from None


def read_profile_csv(path: str | Path, cfg: ScenarioConfig) -> np.ndarray:
    """Currents on the dt_sim grid from a CSV with a ``t`` column and an ``i`` (or ``i_off``) column.

    Each row's current is held until the next row's time (and past the last row to t_f).
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}", "profile") from None
    if not rows:
        raise ConfigError("profile has no rows", "profile")
    col = "i" if "i" in rows[0] else "i_off" if "i_off" in rows[0] else None
    if "t" not in rows[0] or col is None:
        raise ConfigError("profile needs columns t and i (or i_off)", "profile")
    try:
        t = np.array([float(r["t"]) for r in rows])
        i = np.array([float(r[col]) for r in rows])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"non-numeric entry ({exc})", "profile") from None
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(i))):
        raise ConfigError("non-finite entry", "profile")
    if t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ConfigError("t must start at 0 and increase strictly", "profile")
    grid = cfg.t_grid[:-1]
    idx = np.searchsorted(t, grid + 1e-9 * cfg.dt_sim, side="right") - 1
    return i[idx]


def _cmd_oed(run: RunConfig, args, report: RunReport) -> int:
    cfg = run.scenario
    with report.timed("oed"):
        result = design(cfg, run.ga, run.penalty)
    ref = result.reference
    out = Path(args.out_dir)
    ref.save(out / "reference.json")
    ref.to_csv(out / "reference.csv")
    base_det = d_optimality(assemble_fim(cfg.nominal_theta, baseline_profile(cfg), cfg))
    report.metrics.update({
        "fim_det": ref.fim_det,
        "fim_log_det": ref.fim_log_det,
        "log10_det": _log10(ref.fim_det),
        "baseline_det": base_det,
        "det_ratio_vs_baseline": ref.fim_det / base_det if base_det > 0 else math.inf,
        "z_ref_final": float(ref.z_ref[-1]),
        "v_max_reached": ref.v_max_reached,
        "best_fitness_per_generation": result.best_fitness_history,
        "mean_fitness_per_generation": result.mean_fitness_history,
    })
    validate_reference(report, cfg, ref)
    return EXIT_OK if report.ok else EXIT_FAIL


def _cmd_charge(run: RunConfig, args, report: RunReport) -> int:
    cfg = run.scenario
    ref = load_reference(args.reference)
    problems = ref.check(cfg)
    if not report.check("reference_invariants", not problems, "; ".join(problems)):
        return EXIT_FAIL
    with report.timed("charge"):
        log = run_closed_loop(ref, cfg, run.mpc, run.estimator)
    out = Path(args.out_dir)
    log.to_csv(out / "closed_loop.csv")
    (out / "closed_loop_summary.json").write_text(log.summary_json() + "\n")
    s = log.summary
    report.metrics.update({k: s[k] for k in (
        "tracking_rmse", "z_plant_final", "v_plant_max", "violations", "z_hat_max",
        "det_fim_online_true_theta", "det_fim_offline_nominal", "theta_rel_error_final",
        "solver_status_counts")})
    v = s["violations"]
    report.check("no_voltage_violations", v["voltage"] == 0, f"{v['voltage']} grid points")
    report.check("currents_within_bounds", v["current"] == 0)
    report.check("plans_respect_soc_limit", v["soc_prediction"] == 0)
    report.check("estimator_monotone", s["estimator_monotone"])
    return EXIT_OK if report.ok else EXIT_FAIL


def _cmd_fim(run: RunConfig, args, report: RunReport) -> int:
    cfg = run.scenario
    currents = read_profile_csv(args.profile, cfg)
    bad = int(np.count_nonzero((currents < cfg.i_min) | (currents > cfg.i_max)))
    report.check("profile_within_bounds", bad == 0, f"{bad} samples outside [{cfg.i_min}, {cfg.i_max}] A")
    with report.timed("fim"):
        fim: FimMatrix = assemble_fim(cfg.nominal_theta, CurrentProfile(cfg.dt_sim, currents), cfg)
    report.metrics.update({
        "fim": fim.m.tolist(),
        "fim_det": fim.det,
        "fim_log_det": fim.log_det,
        "log10_det": _log10(fim.det),
        "eigenvalues": np.linalg.eigvalsh(fim.m).tolist(),
        "sigma_v": cfg.sigma_v,
    })
    (Path(args.out_dir) / "fim.json").write_text(json.dumps(
        {"fim": fim.m.tolist(), "det": fim.det, "log_det": fim.log_det, "sigma_v": cfg.sigma_v},
        indent=2) + "\n")
    return EXIT_OK if report.ok else EXIT_FAIL


def _cmd_validate(run: RunConfig, args, report: RunReport) -> int:
    ref = load_reference(args.reference) if args.reference else None
    validate(run, ref, report=report)
    return EXIT_OK if report.ok else EXIT_FAIL


COMMANDS = {"oed": _cmd_oed, "charge": _cmd_charge, "fim": _cmd_fim, "validate": _cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the noise and GA seeds of the scenario")
    common.add_argument("--out-dir", default=".", help="directory for artifacts and the report")
    common.add_argument("--report-format", choices=("json", "text"), default="text")

    p = argparse.ArgumentParser(prog="fimcharge", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("oed", parents=[common], help="offline D-optimal design")
    s.add_argument("scenario")
    s = sub.add_parser("charge", parents=[common], help="adaptive closed-loop charge")
    s.add_argument("scenario")
    s.add_argument("reference")
    s = sub.add_parser("fim", parents=[common], help="FIM of a given current profile")
    s.add_argument("scenario")
    s.add_argument("profile")
    s = sub.add_parser("validate", parents=[common], help="run the invariant suite")
    s.add_argument("scenario")
    s.add_argument("reference", nargs="?")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        run = load_run_config(args.scenario)
        if args.seed is not None:
            run = run.with_seed(args.seed)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report = RunReport(run.digest(), args.command, run.seeds)
        code = COMMANDS[args.command](run, args, report)
    except (ConfigError, InfeasibleError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report.write(out, args.report_format)
    print(report.to_json() if args.report_format == "json" else report.to_text())
    return code


if __name__ == "__main__":
    sys.exit(main())
