import csv
import json
import subprocess
import sys

import pytest

from twostage_tmle.cli import load_run_config, main, packaged_config_path
from twostage_tmle.data import load_trial_csv


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({
        "sim": {"j": 12, "n_mean": 30, "n_sd": 3, "truth_clusters": 1000},
        "estimators": [
            {"name": "Screened/Unadjusted", "stage1": "screened", "stage2": "unadjusted"},
            {"name": "Eligible/Unadjusted", "stage1": "eligible", "stage2": "unadjusted"},
            {"name": "Unadjusted/Unadjusted", "stage1": "unadjusted", "stage2": "unadjusted"},
            {"name": "TMLE/Unadjusted", "stage1": "tmle", "stage2": "unadjusted", "library": "glm", "k1": 5},
            {"name": "TMLE/TMLE", "stage1": "tmle", "stage2": "tmle-aps", "library": "glm", "k1": 5, "k2": 4},
        ],
        "reps": 2,
        "seed": 3,
    }))
    return str(path)


def test_packaged_configs_load():
    for name in ("default", "extended"):
        assert packaged_config_path(name).exists()
    default = load_run_config("default")
    assert default.reps == 1000 and default.sim.j == 150 and len(default.estimators) == 5
    extended = load_run_config("extended")
    assert extended.sim.extended is not None
    assert any(e.adjust_l for e in extended.estimators)


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["table1", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["truth", "--config", "/nonexistent.json"])
    assert exc.value.code == 2
    assert "config file not found" in capsys.readouterr().err


def test_bad_config_keys_exit_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"sim": {"jj": 3}}))
    with pytest.raises(SystemExit) as exc:
        main(["truth", "--config", str(path)])
    assert exc.value.code == 2


def test_truth_writes_json(tmp_path, small_config, capsys):
    out = tmp_path / "truth.json"
    assert main(["truth", "--config", small_config, "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["clusters_used"] + payload["clusters_dropped"] == 1000
    assert "psi_star" in capsys.readouterr().out


def test_simulate_then_analyze(tmp_path, small_config, capsys):
    trial = tmp_path / "trial.csv"
    assert main(["simulate", "--config", small_config, "--out", str(trial)]) == 0
    assert load_trial_csv(trial).j == 12
    out = tmp_path / "est.json"
    assert main(["analyze", "--data", str(trial), "--stage1", "tmle", "--stage2", "tmle-aps", "--library", "glm",
                 "--k1", "5", "--k2", "4", "--seed", "1", "--out", str(out)]) == 0
    est = json.loads(out.read_text())
    assert est["method"] == "tmle-aps" and est["selection"]["candidate_risks"]
    assert est["ci_lo"] <= est["psi"] <= est["ci_hi"]


def test_simulate_directory(tmp_path, small_config):
    assert main(["simulate", "--config", small_config, "--trials", "3", "--out", str(tmp_path / "d"),
                 "--quiet"]) == 0
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["trial_0.csv", "trial_1.csv", "trial_2.csv"]


def test_analyze_bad_data_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("cluster_id,e1c\n1,0\n")
    assert main(["analyze", "--data", str(bad)]) == 1
    assert "missing column" in capsys.readouterr().err


def test_table1_outputs(tmp_path, small_config, capsys):
    out = tmp_path / "table1.csv"
    assert main(["table1", "--config", small_config, "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["estimator"] for r in rows][-1] == "TMLE/TMLE" and len(rows) == 5
    assert {"pt", "ci_lo", "ci_hi", "bias", "avg_se", "mc_sd", "coverage", "power"} <= set(rows[0])
    reps = (tmp_path / "table1_replicates.csv").read_text().splitlines()
    assert len(reps) == 1 + 2 * 5
    assert "Coverage" in capsys.readouterr().out


def test_table1_repeatable_bytes(tmp_path, small_config):
    for name in ("a", "b"):
        main(["table1", "--config", small_config, "--reps", "1", "--quiet", "--out", str(tmp_path / f"{name}.csv")])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_replicates.csv").read_bytes() == (tmp_path / "b_replicates.csv").read_bytes()


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "twostage_tmle.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "table1" in proc.stdout
