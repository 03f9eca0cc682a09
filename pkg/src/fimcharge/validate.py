"""Invariant suite run by ``fimcharge validate``.

Every check is cheap (a few seconds in total at the default scenario) and
reports pass/fail individually.
"""

from __future__ import annotations

import math

import numpy as np

from .config import RunConfig
from .ecm import EcmState, ModelError, ScenarioConfig, ThetaVector, ocv_eval, ocv_slope, rollout, simulate, step
from .ecm import held_currents, voltage_on_grid
from .oed import InfeasibleError, ReferenceTrajectory, baseline_profile
from .report import RunReport
from .sensitivity import assemble_fim, d_optimality, fim_from_sensitivities, sensitivity_grid

FD_REL_TOL = 1e-3
FD_ABS_FLOOR = 1e-8


def random_profiles(cfg: ScenarioConfig, n: int, seed: int, dt_seg: float = 30.0) -> np.ndarray:
    """``n`` seeded ZOH profiles on the dt_sim grid, uniform in the current bounds."""
    rng = np.random.default_rng(seed)
    per_seg = int(round(dt_seg / cfg.dt_sim))
    n_seg = int(math.ceil(cfg.n_steps / per_seg))
    segs = rng.uniform(cfg.i_min, cfg.i_max, size=(n, n_seg))
    return np.repeat(segs, per_seg, axis=1)[:, : cfg.n_steps]


def fd_sensitivities(theta: ThetaVector, currents: np.ndarray, cfg: ScenarioConfig, z0: float,
                     rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of the grid voltage with respect to each theta component."""
    base = theta.as_array()
    held = held_currents(currents)
    cols = []
    for j in range(4):
        h = rel_step * abs(base[j])
        v = []
        for sign in (1.0, -1.0):
            th = base.copy()
            th[j] += sign * h
            tv = ThetaVector.from_array(th)
            z, qc = rollout(tv, currents, cfg.dt_sim, z0=z0)
            v.append(voltage_on_grid(tv, cfg.ocv, z, qc, held))
        cols.append((v[0] - v[1]) / (2.0 * h))
    return np.stack(cols, axis=-1)


def sensitivity_mismatch(s: np.ndarray, s_ref: np.ndarray, rel: float = FD_REL_TOL,
                         floor: float = FD_ABS_FLOOR) -> float:
    """Largest |s - s_ref| / allowed; <= 1 means within tolerance."""
    allowed = np.maximum(rel * np.abs(s_ref), floor)
    return float(np.max(np.abs(s - s_ref) / allowed))


def s4_closed_form(theta: ThetaVector, current: float, t: np.ndarray) -> np.ndarray:
    """dV/dtheta4 for a constant current applied from rest."""
    a = theta.theta4
    e = np.exp(-a * t)
    return theta.theta2 * (-(current / a**2) * (1.0 - e) + (current * t / a) * e)


def _fim_checks(report: RunReport, cfg: ScenarioConfig, theta: ThetaVector, currents: np.ndarray):
    sigma = cfg.sigma_v if cfg.sigma_v > 0 else 0.005
    s, _, _ = sensitivity_grid(theta, currents, cfg.dt_sim, cfg.ocv, cfg.z0)
    m = fim_from_sensitivities(s, cfg.dt_sim, sigma)
    asym = float(np.max(np.abs(m - m.T)) / np.max(np.abs(m)))
    report.check("fim_symmetric", asym <= 1e-12, f"rel asym {asym:.2e}")
    eig = np.linalg.eigvalsh(m)
    report.check("fim_psd", eig.min() >= -1e-8 * np.trace(m), f"min eig {eig.min():.3e}")
    s0, _, _ = sensitivity_grid(theta, np.zeros(cfg.n_steps), cfg.dt_sim, cfg.ocv, cfg.z0)
    m0 = fim_from_sensitivities(s0, cfg.dt_sim, sigma)
    report.check("fim_zero_input", not np.any(m0), f"max |F| {np.max(np.abs(m0)):.1e}")
    d1 = d_optimality(m)
    d2 = d_optimality(fim_from_sensitivities(s, cfg.dt_sim, 2.0 * sigma))
    err = abs(d2 * 2.0**8 / d1 - 1.0) if d1 > 0 else math.inf
    report.check("fim_sigma_scaling", err <= 1e-9, f"rel err {err:.1e}")


def validate(run: RunConfig, ref: ReferenceTrajectory | None = None, n_profiles: int = 5,
             report: RunReport | None = None) -> RunReport:
    cfg = run.scenario
    theta = cfg.nominal_theta
    if report is None:
        report = RunReport(run.digest(), "validate", run.seeds)

    with report.timed("model"):
        z = np.linspace(0.0, 1.0, 201)
        slope = ocv_slope(cfg.ocv, z)
        report.check("ocv_increasing_on_0_1", bool(np.all(slope > 0)), f"min slope {slope.min():.3f} V")
        report.check("v_max_above_ocv_full", cfg.v_max > ocv_eval(cfg.ocv, 1.0))
        cur = random_profiles(cfg, 1, run.scenario.rng_seed)[0]
        zg, qg = rollout(theta, cur, cfg.dt_sim, z0=cfg.z0)
        st = EcmState(cfg.z0)
        for i in cur[:60]:
            st = step(theta, st, float(i), cfg.dt_sim)
        gap = max(abs(st.z - zg[60]), abs(st.qc - qg[60]))
        report.check("step_matches_rollout", gap <= 1e-9 * max(1.0, abs(qg[60])), f"gap {gap:.1e}")
        try:
            base = baseline_profile(cfg)
            traj = simulate(theta, base, cfg)
            report.check("baseline_reaches_full_charge", abs(traj.z[-1] - 1.0) <= 1e-9,
                         f"z(t_f) = {traj.z[-1]:.12f}")
        except InfeasibleError as exc:
            report.check("baseline_reaches_full_charge", False, str(exc))

    with report.timed("sensitivity"):
        worst = 0.0
        for cur in random_profiles(cfg, n_profiles, run.scenario.rng_seed + 1):
            s, _, _ = sensitivity_grid(theta, cur, cfg.dt_sim, cfg.ocv, 0.5)
            worst = max(worst, sensitivity_mismatch(s, fd_sensitivities(theta, cur, cfg, 0.5)))
        report.check("sensitivity_vs_finite_difference", worst <= 1.0,
                      f"worst error / tolerance = {worst:.3f}")
        current = 0.5 * cfg.i_max
        s, _, _ = sensitivity_grid(theta, np.full(cfg.n_steps, current), cfg.dt_sim, cfg.ocv, cfg.z0)
        exact = s4_closed_form(theta, current, cfg.t_grid)
        rel = float(np.max(np.abs(s[:, 3] - exact)[1:] / np.abs(exact[1:])))
        report.check("s4_constant_current_closed_form", rel <= 1e-6, f"max rel err {rel:.1e}")

    with report.timed("fim"):
        _fim_checks(report, cfg, theta, random_profiles(cfg, 1, run.scenario.rng_seed + 2)[0])

    if ref is not None:
        with report.timed("reference"):
            validate_reference(report, cfg, ref)
    return report


def validate_reference(report: RunReport, cfg: ScenarioConfig, ref: ReferenceTrajectory) -> None:
    problems = ref.check(cfg)
    report.check("reference_invariants", not problems, "; ".join(problems))
    if problems:
        return
    try:
        profile = ref.profile()
        traj = simulate(ref.nominal_theta, profile, cfg)
    except (ModelError, ValueError) as exc:
        report.check("reference_replays", False, str(exc))
        return
    gap = float(np.max(np.abs(traj.z - ref.z_ref)))
    report.check("reference_replays", gap <= 1e-9, f"max |z - z_ref| {gap:.1e}")
    report.check("reference_soc_at_most_one", float(ref.z_ref.max()) <= 1.0 + 1e-6,
                 f"max z_ref {ref.z_ref.max():.9f}")
    report.check("reference_voltage_ceiling", float(traj.v.max()) <= cfg.v_max + 1e-6,
                 f"max V {traj.v.max():.6f}")
    fim_cfg = cfg.replace(sigma_v=ref.fim_sigma) if ref.fim_sigma > 0 else cfg
    det = d_optimality(assemble_fim(ref.nominal_theta, profile, fim_cfg))
    rel = abs(det / ref.fim_det - 1.0) if ref.fim_det > 0 else math.inf
    report.check("reference_fim_det", rel <= 1e-6, f"stored {ref.fim_det:.6e}, recomputed {det:.6e}")
    report.metrics["reference_log10_det"] = math.log10(det) if det > 0 else -math.inf
