"""Acceptance criteria for the bundled paper_s4 scenario.

    python3 tests/test_acceptance.py      # one PASS/FAIL line per criterion
    pytest tests/test_acceptance.py -s   # same lines, one test per check

Tolerances are the ones the criteria state; nothing here is tuned to make a
check pass. The expensive runs (GA designs, closed loops) are cached and
shared between criteria.
"""

from __future__ import annotations

import functools
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from fimcharge.config import load_run_config  # noqa: E402
from fimcharge.ecm import CurrentProfile, simulate  # noqa: E402
from fimcharge.mpc import run_closed_loop  # noqa: E402
from fimcharge.oed import baseline_profile, design  # noqa: E402
from fimcharge.sensitivity import (  # noqa: E402
    assemble_fim,
    d_optimality,
    fim_from_sensitivities,
    sensitivity_grid,
)

from oracles import fd_sensitivities_ld, s4_constant_current  # noqa: E402

OED_SEEDS = (0, 1, 2)
NOISE_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class Outcome:
    criterion: int
    title: str
    checks: dict[str, bool] = field(default_factory=dict)
    detail: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def line(self) -> str:
        failed = [k for k, ok in self.checks.items() if not ok]
        tail = f"; failed: {', '.join(failed)}" if failed else ""
        return (f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.criterion}: {self.title} "
                f"({'; '.join(self.detail)}{tail})")


@functools.lru_cache(maxsize=None)
def run_config():
    return load_run_config("paper_s4")


@functools.lru_cache(maxsize=None)
def oed(seed: int):
    run = run_config().with_seed(seed)
    t0 = time.perf_counter()
    result = design(run.scenario, run.ga, run.penalty)
    return result, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def closed_loop(kind: str, seed: int = 0):
    run = run_config()
    cfg = run.scenario.replace(rng_seed=seed)
    if kind == "certificate":
        cfg = cfg.replace(true_theta=cfg.nominal_theta, sigma_v=0.0)
    ref = oed(0)[0].reference
    t0 = time.perf_counter()
    log = run_closed_loop(ref, cfg, run.mpc, run.estimator)
    return log, time.perf_counter() - t0


def criterion_1() -> Outcome:
    out = Outcome(1, "sensitivities match finite differences on 20 random ZOH profiles")
    cfg = run_config().scenario
    theta = cfg.nominal_theta
    rng = np.random.default_rng(20240)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        cur = np.repeat(rng.uniform(cfg.i_min, cfg.i_max, 60), 30)
        s, _, _ = sensitivity_grid(theta, cur, cfg.dt_sim, cfg.ocv, 0.5)
        fd = fd_sensitivities_ld(theta.as_tuple(), cur, cfg.dt_sim, 0.5).astype(float)
        worst = max(worst, float(np.max(np.abs(s - fd) / np.maximum(1e-3 * np.abs(fd), 1e-8))))
    elapsed = time.perf_counter() - t0
    out.checks["within 1e-3 rel / 1e-8 abs"] = worst <= 1.0
    out.checks["runtime <= 60 s"] = elapsed <= 60.0
    out.detail += [f"worst error/tolerance {worst:.2e}", f"{elapsed:.1f} s"]
    return out


def criterion_2() -> Outcome:
    out = Outcome(2, "S4 matches the constant-current closed form")
    cfg = run_config().scenario
    theta = cfg.nominal_theta
    worst = 0.0
    for current in (1.0, 4.0, -3.0):
        s, _, _ = sensitivity_grid(theta, np.full(cfg.n_steps, current), cfg.dt_sim, cfg.ocv, cfg.z0)
        exact = s4_constant_current(theta.as_tuple(), current, cfg.t_grid)
        worst = max(worst, float(np.max(np.abs(s[1:, 3] - exact[1:]) / np.abs(exact[1:]))))
    out.checks["rel err <= 1e-6"] = worst <= 1e-6
    out.detail.append(f"max rel err {worst:.1e}")
    return out


def criterion_3() -> Outcome:
    out = Outcome(3, "FIM symmetric, PSD, zero for zero input, det ~ sigma^-8")
    cfg = run_config().scenario
    theta = cfg.nominal_theta
    rng = np.random.default_rng(3)
    asym = min_eig = scale_err = 0.0
    for _ in range(10):
        cur = np.repeat(rng.uniform(cfg.i_min, cfg.i_max, 60), 30)
        s, _, _ = sensitivity_grid(theta, cur, cfg.dt_sim, cfg.ocv, cfg.z0)
        m = fim_from_sensitivities(s, cfg.dt_sim, cfg.sigma_v)
        asym = max(asym, float(np.max(np.abs(m - m.T)) / np.max(np.abs(m))))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(m).min() / np.trace(m)))
        d1 = d_optimality(m)
        d3 = d_optimality(fim_from_sensitivities(s, cfg.dt_sim, 3.0 * cfg.sigma_v))
        scale_err = max(scale_err, abs(d3 * 3.0**8 / d1 - 1.0))
    zero = assemble_fim(theta, CurrentProfile.constant(0.0, cfg.t_f, 30.0), cfg).m
    out.checks["symmetry 1e-12"] = asym <= 1e-12
    out.checks["PSD"] = min_eig >= -1e-8
    out.checks["zero input"] = not np.any(zero)
    out.checks["sigma^-8 1e-9"] = scale_err <= 1e-9
    out.detail += [f"asym {asym:.1e}", f"min eig/trace {min_eig:.1e}", f"scaling err {scale_err:.1e}"]
    return out


def criterion_4() -> Outcome:
    out = Outcome(4, "offline design feasible, >= 10x baseline det, log10 det in [38, 42]")
    cfg = run_config().scenario
    base = d_optimality(assemble_fim(cfg.nominal_theta, baseline_profile(cfg), cfg))
    feasible = beats = fast = in_window = True
    logs = []
    for seed in OED_SEEDS:
        result, elapsed = oed(seed)
        ref = result.reference
        traj = simulate(cfg.nominal_theta, ref.profile(), cfg)
        feasible &= abs(ref.z_ref[-1] - 1.0) <= 1e-3
        feasible &= bool(traj.v.max() <= cfg.v_max)
        feasible &= bool(np.all(np.abs(ref.i_off) <= 6.0))
        beats &= ref.fim_det >= 10.0 * base
        fast &= elapsed <= 600.0
        lg = math.log10(ref.fim_det)
        in_window &= 38.0 <= lg <= 42.0
        logs.append(f"{lg:.2f}")
    out.checks["z(t_f), V, |I| feasible"] = feasible
    out.checks[">= 10x baseline"] = beats
    out.checks["runtime <= 10 min"] = fast
    out.checks["log10 det in [38, 42]"] = in_window
    out.detail += [f"seeds {OED_SEEDS}: log10 det {', '.join(logs)}",
                   f"baseline log10 det {math.log10(base):.2f}"]
    return out


def criterion_5() -> Outcome:
    out = Outcome(5, "closed loop under mismatch is safe and completes")
    cfg = run_config().scenario
    log, elapsed = closed_loop("mismatch")
    s = log.summary
    out.checks["z(t_f) >= 0.99"] = s["z_plant_final"] >= 0.99
    out.checks["no voltage violations"] = bool(np.all(log.v_plant_grid <= cfg.v_max + 1e-6))
    out.checks["currents in bounds"] = bool(np.all((log.currents >= cfg.i_min) & (log.currents <= cfg.i_max)))
    out.checks["runtime <= 2 min"] = elapsed <= 120.0
    out.detail += [f"z(t_f) {s['z_plant_final']:.5f}", f"max V {s['v_plant_max']:.4f}", f"{elapsed:.1f} s"]
    return out


def criterion_6() -> Outcome:
    out = Outcome(6, "certificate run (true = nominal, no noise) reproduces the offline design")
    log, _ = closed_loop("certificate")
    s = log.summary
    rel = abs(s["det_fim_online_true_theta"] / s["det_fim_offline_nominal"] - 1.0)
    out.checks["RMSE <= 1e-3"] = s["tracking_rmse"] <= 1e-3
    out.checks["det within 5%"] = rel <= 0.05
    out.detail += [f"RMSE {s['tracking_rmse']:.1e}", f"det rel diff {rel:.1e}"]
    return out


def criterion_7() -> Outcome:
    out = Outcome(7, "online det at true theta < offline det at nominal theta")
    s = closed_loop("mismatch")[0].summary
    on, off = s["det_fim_online_true_theta"], s["det_fim_offline_nominal"]
    out.checks["online < offline"] = on < off
    out.detail.append(f"online {on:.3e} vs offline {off:.3e}")
    return out


def criterion_8() -> Outcome:
    out = Outcome(8, "R0 estimate within 5% over the final quarter in >= 4 of 5 noisy runs")
    cfg = run_config().scenario
    r0 = cfg.true_theta.theta1
    hits, monotone, spans = 0, True, []
    for seed in NOISE_SEEDS:
        log, _ = closed_loop("mismatch", seed)
        t = np.array([r.t for r in log.records])
        err = log.theta_hat[t >= 0.75 * cfg.t_f, 0] / r0 - 1.0
        hits += bool(np.all(np.abs(err) <= 0.05))
        monotone &= log.summary["estimator_monotone"]
        spans.append(f"{err.min():+.3f}..{err.max():+.3f}")
    out.checks[">= 4 of 5 within 5%"] = hits >= 4
    out.checks["cost monotone in every run"] = monotone
    out.detail += [f"{hits}/5 within", "rel err " + ", ".join(spans)]
    return out


def criterion_9() -> Outcome:
    out = Outcome(9, "identical configs and seeds give bit-identical artifacts")
    import json
    import tempfile

    run = run_config()
    first = oed(0)[0].reference
    second = design(run.scenario, run.ga, run.penalty).reference
    out.checks["ReferenceTrajectory"] = json.dumps(first.to_dict()) == json.dumps(second.to_dict())
    a = closed_loop("mismatch")[0]
    b = run_closed_loop(first, run.scenario, run.mpc, run.estimator)
    with tempfile.TemporaryDirectory() as d:
        a.to_csv(Path(d) / "a.csv")
        b.to_csv(Path(d) / "b.csv")
        same_csv = (Path(d) / "a.csv").read_bytes() == (Path(d) / "b.csv").read_bytes()
    out.checks["ClosedLoopLog"] = same_csv and a.summary_json() == b.summary_json()
    return out


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9]


def _report(outcome: Outcome) -> Outcome:
    print("\n" + outcome.line())
    return outcome


def test_criterion_1_sensitivity_vs_fd():
    assert _report(criterion_1()).passed


def test_criterion_2_s4_closed_form():
    assert _report(criterion_2()).passed


def test_criterion_3_fim_properties():
    assert _report(criterion_3()).passed


def test_criterion_4_design_feasible_and_informative():
    o = _report(criterion_4())
    assert all(ok for k, ok in o.checks.items() if k != "log10 det in [38, 42]")


def test_criterion_4_det_order_of_magnitude():
    o = criterion_4()
    assert o.checks["log10 det in [38, 42]"], o.line()


def test_criterion_5_mismatch_safety():
    assert _report(criterion_5()).passed


def test_criterion_6_certificate():
    assert _report(criterion_6()).passed


def test_criterion_7_information_ordering():
    assert _report(criterion_7()).passed


def test_criterion_8_parameter_convergence():
    assert _report(criterion_8()).passed


def test_criterion_9_determinism():
    assert _report(criterion_9()).passed


def main() -> int:
    results = [c() for c in CRITERIA]
    for r in results:
        print(r.line())
    n = sum(r.passed for r in results)
    print(f"{n}/{len(results)} criteria passed")
    return 0 if n == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
