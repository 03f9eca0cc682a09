import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fimcharge.ecm import (
    ConfigError,
    CurrentProfile,
    EcmState,
    ModelError,
    OcvPolynomial,
    ScenarioConfig,
    ThetaVector,
    extrapolation_count,
    ocv_eval,
    ocv_slope,
    rollout,
    simulate,
    step,
    terminal_voltage,
    voltage_caps,
)

from conftest import NOMINAL, TRUE
from oracles import voltages_ld

OCV = OcvPolynomial()


def test_ocv_endpoints_match_coefficients():
    assert ocv_eval(OCV, 0.0) == pytest.approx(3.039475779, abs=1e-12)
    assert ocv_eval(OCV, 1.0) == pytest.approx(4.187326746, abs=1e-8)


def test_ocv_increasing_on_unit_interval():
    z = np.linspace(0, 1, 1001)
    assert np.all(np.diff(ocv_eval(OCV, z)) > 0)
    assert np.all(ocv_slope(OCV, z) > 0)


def test_ocv_slope_matches_difference():
    z = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    fd = (ocv_eval(OCV, z + h) - ocv_eval(OCV, z - h)) / (2 * h)
    np.testing.assert_allclose(ocv_slope(OCV, z), fd, rtol=1e-6)


def test_ocv_rejects_non_finite():
    with pytest.raises(ModelError):
        ocv_eval(OCV, math.nan)
    with pytest.raises(ModelError):
        ocv_slope(OCV, np.array([0.2, math.inf]))


def test_extrapolation_is_counted_not_refused():
    before = extrapolation_count()
    v = ocv_eval(OCV, 1.05)
    assert math.isfinite(v)
    assert extrapolation_count() == before + 1


def test_ocv_config_validation():
    with pytest.raises(ConfigError):
        OcvPolynomial(coeffs=(1.0, 2.0))
    with pytest.raises(ConfigError):
        OcvPolynomial(coeffs=(30.0,) + (0.0,) * 7)


def test_theta_from_physical():
    th = ThetaVector.from_physical(0.06, 1000.0, 7200.0, 0.03)
    assert th.as_tuple() == (0.06, 1e-3, 1 / 7200, 1 / 30)
    assert th.r1 == pytest.approx(0.03)
    assert th.capacity_c == pytest.approx(7200.0)


@pytest.mark.parametrize("values", [(0.0, 1e-3, 1e-4, 0.03), (0.06, -1e-3, 1e-4, 0.03),
                                    (0.06, 1e-3, math.nan, 0.03), (0.06, 1e-3, 1e-4, 5.0)])
def test_theta_rejects_invalid(values):
    with pytest.raises(ValueError):
        ThetaVector.from_array(values)


def test_step_zero_current_relaxes_qc():
    s = step(NOMINAL, EcmState(0.3, 10.0), 0.0, 30.0)
    assert s.z == 0.3
    assert s.qc == pytest.approx(10.0 * math.exp(-NOMINAL.theta4 * 30.0))
    assert s.t == 30.0


def test_step_constant_current_matches_closed_form():
    i, t = 4.0, 1800.0
    s = EcmState(0.0)
    for _ in range(1800):
        s = step(NOMINAL, s, i, 1.0)
    assert s.z == pytest.approx(NOMINAL.theta3 * i * t, rel=1e-12)
    a = NOMINAL.theta4
    assert s.qc == pytest.approx(i / a * (1 - math.exp(-a * t)), rel=1e-12)


def test_step_rejects_bad_dt():
    with pytest.raises(ModelError):
        step(NOMINAL, EcmState(0.0), 1.0, 0.0)


def test_terminal_voltage_composition():
    s = EcmState(0.5, 20.0)
    v = terminal_voltage(NOMINAL, s, 2.0, OCV)
    assert v == pytest.approx(ocv_eval(OCV, 0.5) + 1e-3 * 20.0 + 0.06 * 2.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-6, 6), min_size=1, max_size=40), st.floats(0.0, 0.5))
def test_rollout_matches_stepping(currents, z0):
    cur = np.array(currents)
    z, qc = rollout(TRUE, cur, 1.0, z0=z0)
    s = EcmState(z0)
    for k, i in enumerate(cur):
        s = step(TRUE, s, float(i), 1.0)
        assert z[k + 1] == pytest.approx(s.z, abs=1e-12)
        assert qc[k + 1] == pytest.approx(s.qc, abs=1e-9)


def test_rollout_batch_equals_rows():
    rng = np.random.default_rng(3)
    cur = rng.uniform(-6, 6, (5, 120))
    z, qc = rollout(NOMINAL, cur, 1.0, z0=0.2, qc0=3.0)
    for r in range(5):
        zr, qr = rollout(NOMINAL, cur[r], 1.0, z0=0.2, qc0=3.0)
        np.testing.assert_array_equal(z[r], zr)
        np.testing.assert_allclose(qc[r], qr, rtol=0, atol=1e-12)


def test_simulate_matches_extended_precision(cfg):
    rng = np.random.default_rng(11)
    prof = CurrentProfile(30.0, rng.uniform(-2, 6, 60))
    traj = simulate(NOMINAL, prof, cfg)
    ref = voltages_ld(np.array([NOMINAL.as_tuple()]), np.repeat(prof.values, 30), 1.0, 0.0)[0]
    np.testing.assert_allclose(traj.v, ref.astype(float), rtol=0, atol=1e-11)
    assert traj.t.size == cfg.n_steps + 1


def test_simulate_grid_convention(cfg):
    prof = CurrentProfile.constant(4.0, 1800.0, 30.0)
    traj = simulate(NOMINAL, prof, cfg)
    assert traj.z[-1] == pytest.approx(1.0, abs=1e-12)
    assert traj.i[-1] == 4.0
    assert traj.v[0] == pytest.approx(ocv_eval(OCV, 0.0) + 0.06 * 4.0)


def test_trajectory_csv_header(tmp_path, cfg):
    traj = simulate(NOMINAL, CurrentProfile.constant(1.0, 1800.0, 30.0), cfg)
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,i,z,qc,v"
    assert len(lines) == cfg.n_steps + 2


def test_profile_validation():
    with pytest.raises(ModelError):
        CurrentProfile(0.0, [1.0])
    with pytest.raises(ModelError):
        CurrentProfile(30.0, [])
    p = CurrentProfile(30.0, [1.0, 2.0])
    assert (p + p).values.tolist() == [2.0, 4.0]
    assert p.scaled(-1).values.tolist() == [-1.0, -2.0]
    with pytest.raises(ModelError):
        p.check_bounds(-1.5, 1.5)


@pytest.mark.parametrize("field,value", [("dt_sim", 0.0), ("t_f", -1.0), ("v_max", 3.0),
                                         ("sigma_v", -0.1), ("z0", 1.0), ("dt_sim", 7.0)])
def test_scenario_validation(field, value):
    with pytest.raises(ConfigError):
        ScenarioConfig(nominal_theta=NOMINAL, true_theta=TRUE, **{field: value})


def test_voltage_caps_enforce_limit(cfg):
    rng = np.random.default_rng(5)
    genes = rng.uniform(-6, 6, (8, 60))
    capped, caps = voltage_caps(genes, 30.0, 1.0, NOMINAL, OCV, 4.3, -6, 6, 0.0)
    assert np.all(capped <= genes)
    assert np.all(capped >= -6)
    for row in capped:
        v = simulate(NOMINAL, CurrentProfile(30.0, row), cfg).v
        assert v.max() <= 4.3 + 1e-9


def test_voltage_caps_leave_feasible_profiles_alone(cfg):
    genes = np.full((1, 60), 1.0)
    capped, _ = voltage_caps(genes, 30.0, 1.0, NOMINAL, OCV, 4.3, -6, 6, 0.0)
    np.testing.assert_array_equal(capped, genes)
