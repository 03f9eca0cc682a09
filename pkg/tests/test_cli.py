import csv
import json

import pytest

from fimcharge.cli import main, read_profile_csv
from fimcharge.config import load_run_config, resolve
from fimcharge.ecm import ConfigError


@pytest.fixture(scope="module")
def quick_scenario(tmp_path_factory):
    d = tmp_path_factory.mktemp("sc")
    doc = json.loads(resolve("paper_s4").read_text())
    doc["ga"].update(population=10, generations=3)
    path = d / "quick.scenario"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def oed_dir(quick_scenario, tmp_path_factory):
    out = tmp_path_factory.mktemp("oed")
    assert main(["oed", str(quick_scenario), "--out-dir", str(out), "--report-format", "json"]) == 0
    return out


def test_oed_writes_artifacts(oed_dir):
    assert (oed_dir / "reference.json").exists()
    rows = list(csv.reader(open(oed_dir / "reference.csv")))
    assert rows[0] == ["t", "z_ref", "i_off"]
    assert len(rows) == 1802
    report = json.loads((oed_dir / "oed_report.json").read_text())
    assert report["phase"] == "oed" and report["ok"]
    assert report["seeds"] == {"noise": 0, "ga": 0, "estimator": 0}
    assert len(report["scenario_digest"]) == 64
    # initial population plus one entry per generation
    assert len(report["metrics"]["best_fitness_per_generation"]) == 4
    assert report["metrics"]["det_ratio_vs_baseline"] > 1


def test_oed_is_reproducible(quick_scenario, oed_dir, tmp_path):
    assert main(["oed", str(quick_scenario), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "reference.json").read_bytes() == (oed_dir / "reference.json").read_bytes()


def test_seed_flag_changes_design(quick_scenario, oed_dir, tmp_path):
    assert main(["oed", str(quick_scenario), "--seed", "3", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "reference.json").read_bytes() != (oed_dir / "reference.json").read_bytes()
    report = (tmp_path / "oed_report.txt").read_text()
    assert "ga=3" in report and "noise=3" in report


def test_charge(quick_scenario, oed_dir, tmp_path):
    code = main(["charge", str(quick_scenario), str(oed_dir / "reference.json"), "--out-dir",
                 str(tmp_path), "--report-format", "json"])
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "closed_loop.csv")))
    assert rows[0] == ["t", "i", "v_meas", "z_plant", "qc_plant", "theta1_hat", "theta2_hat",
                       "theta3_hat", "theta4_hat", "solver_status"]
    assert len(rows) == 61
    summary = json.loads((tmp_path / "closed_loop_summary.json").read_text())
    for key in ("tracking_rmse", "det_fim_online_true_theta", "det_fim_offline_nominal", "violations"):
        assert key in summary


def test_fim_from_reference_csv(oed_dir, tmp_path):
    assert main(["fim", "paper_s4", str(oed_dir / "reference.csv"), "--out-dir", str(tmp_path)]) == 0
    fim = json.loads((tmp_path / "fim.json").read_text())
    ref = json.loads((oed_dir / "reference.json").read_text())
    assert fim["det"] == pytest.approx(ref["fim_det"], rel=1e-12)


def test_fim_from_t_i_csv(tmp_path):
    prof = tmp_path / "p.csv"
    prof.write_text("t,i\n0,4\n900,4\n")
    assert main(["fim", "paper_s4", str(prof), "--out-dir", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "fim.json").read_text())["det"] > 0


def test_profile_csv_hold_semantics(tmp_path):
    cfg = load_run_config("paper_s4").scenario
    prof = tmp_path / "p.csv"
    prof.write_text("t,i\n0,1\n10.5,2\n")
    cur = read_profile_csv(prof, cfg)
    assert cur.size == 1800
    assert cur[:11].tolist() == [1.0] * 11 and cur[11] == 2.0 and cur[-1] == 2.0


@pytest.mark.parametrize("body", ["a,b\n1,2\n", "t,i\n5,1\n", "t,i\n0,x\n", "t,i\n"])
def test_bad_profiles_are_config_errors(tmp_path, body):
    prof = tmp_path / "p.csv"
    prof.write_text(body)
    with pytest.raises(ConfigError):
        read_profile_csv(prof, load_run_config("paper_s4").scenario)
    assert main(["fim", "paper_s4", str(prof), "--out-dir", str(tmp_path)]) == 2


def test_validate_ok(oed_dir, tmp_path):
    assert main(["validate", "paper_s4", str(oed_dir / "reference.json"), "--out-dir",
                 str(tmp_path)]) == 0
    assert "result: ok" in (tmp_path / "validate_report.txt").read_text()


def test_validate_flags_tampered_reference(oed_dir, tmp_path):
    d = json.loads((oed_dir / "reference.json").read_text())
    d["z_ref"][-1] = 0.9
    bad = tmp_path / "tampered.json"
    bad.write_text(json.dumps(d))
    assert main(["validate", "paper_s4", str(bad), "--out-dir", str(tmp_path),
                 "--report-format", "json"]) == 1
    report = json.loads((tmp_path / "validate_report.json").read_text())
    failed = [p["name"] for p in report["properties"] if not p["passed"]]
    assert failed == ["reference_invariants"]


def test_configuration_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.scenario"
    bad.write_text(json.dumps({"charge": {"dt_sim": 0}}))
    assert main(["validate", str(bad)]) == 2
    assert "charge.dt_sim" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.scenario")]) == 2
    assert main(["charge", "paper_s4", str(tmp_path / "missing.json")]) == 2
    assert main(["nonsense"]) == 2
    assert main(["validate", "paper_s4", "--report-format", "xml"]) == 2
