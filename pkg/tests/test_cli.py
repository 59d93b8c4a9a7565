import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from longicausal.cli import main
from longicausal.effects import FitReport
from longicausal.gest import fit_gmm_efficient
from longicausal.iv import fit_iv_decay
from longicausal.simgen import scenario_preset, simulate_panel


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "p.csv"
    assert main(["simulate", "--preset", "design1b", "--seed", "7", "--out", str(path)]) == 0
    return path


def test_simulate(sim_csv):
    df = pd.read_csv(sim_csv)
    assert len(df) == 5000
    config = json.loads(sim_csv.with_name("p.config.json").read_text())
    assert config["preset"] == "design1b" and config["scenario"]["tau"] == 0.0


def test_simulate_withholds_f1(tmp_path):
    out = tmp_path / "d2.csv"
    assert main(["simulate", "--preset", "design2", "--n", "50", "--out", str(out)]) == 0
    assert "F1" not in pd.read_csv(out).columns


def test_fit_to_stdout(sim_csv, capsys):
    assert main(["fit", "--method", "gest", "--flavor", "efficient", "--panel", str(sim_csv)]) == 0
    report = FitReport.from_json(capsys.readouterr().out)
    assert report.params.size == 6 and report.estimator == "gest-efficient"


def test_round_trip_matches_library(sim_csv, tmp_path):
    panel = simulate_panel(scenario_preset("design1b"), 7)
    out = tmp_path / "g.json"
    assert main(["fit", "--method", "gest", "--panel", str(sim_csv), "--out", str(out)]) == 0
    np.testing.assert_array_equal(FitReport.from_json(out.read_text()).params, fit_gmm_efficient(panel).params)
    out = tmp_path / "v.json"
    assert main(["fit", "--method", "iv", "--panel", str(sim_csv), "--out", str(out)]) == 0
    np.testing.assert_array_equal(FitReport.from_json(out.read_text()).params, fit_iv_decay(panel).theta)


def test_missing_panel_is_data_error(tmp_path, capsys):
    assert main(["fit", "--method", "iv", "--panel", str(tmp_path / "missing.csv")]) == 2
    assert "missing.csv" in capsys.readouterr().err


def test_usage_errors():
    assert main([]) == 1
    assert main(["fit", "--method", "cbps", "--panel", "p.csv"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["fit", "--method", "gest", "--panel", "x.csv", "--truncate", "5"]) == 1


def test_unknown_override_rejected(tmp_path, capsys):
    assert main(["simulate", "--preset", "design1b", "--set", "bogus=1", "--out", str(tmp_path / "x.csv")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_numerical_failure_exit_code(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.normal(size=30)
    path = tmp_path / "degenerate.csv"
    pd.DataFrame({"A1": a, "Y1": rng.normal(size=30), "L": 2 * a + 1}).to_csv(path, index=False)
    assert main(["fit", "--method", "gest", "--panel", str(path)]) == 3


def test_fit_contrast_diagnose(sim_csv, tmp_path):
    reports = []
    for method in ("iptw", "gest", "iv"):
        out = tmp_path / f"{method}.json"
        assert main(["fit", "--method", method, "--panel", str(sim_csv), "--out", str(out)]) == 0
        reports += ["--report", f"{method}={out}"]
    table_path = tmp_path / "contrast.csv"
    assert main(["contrast", *reports, "--k", "3", "--draws", "200", "--out", str(table_path)]) == 0
    table = pd.read_csv(table_path)
    assert list(table["method"]) == ["iptw", "gest", "iv"]
    assert np.all(table["ci_lo"] < table["ci_hi"])
    assert main(["diagnose", "--panel", str(sim_csv), "--out-dir", str(tmp_path / "diag")]) == 0
    assert {p.name for p in (tmp_path / "diag").iterdir()} == {
        "weight_diagnostics.csv", "balance.csv", "partial_f.csv", "config.json"
    }


def test_mc(tmp_path):
    out = tmp_path / "mc"
    code = main(["mc", "--design", "design1b", "--estimators", "gest-basic", "--reps", "2", "--set", "n=400", "--out", str(out)])
    assert code == 0
    summary = pd.read_csv(out / "summary.csv")
    assert {"estimate", "mae", "rmse", "empsd", "sand_se", "cov_sand"} <= set(summary.columns)
    assert len(pd.read_csv(out / "replicates.csv")) == 2 * len(summary)


def test_long_to_wide(tmp_path):
    src = tmp_path / "long.csv"
    pd.DataFrame({"pid": [1, 1, 2, 2], "day": [0, 30, 0, 31], "A": [1.0, 2, 3, 4], "Y": [0.0, 1, 0, 1]}).to_csv(src, index=False)
    out = tmp_path / "wide.csv"
    assert main(["long-to-wide", "--input", str(src), "--id", "pid", "--time", "day", "--values", "A,Y", "--out", str(out)]) == 0
    assert list(pd.read_csv(out)["t2"]) == [30, 31]


def test_console_script_version():
    proc = subprocess.run([sys.executable, "-m", "longicausal.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("longicausal ") and "(" in proc.stdout
