import json
import subprocess
import sys

import pytest

from benchrel.cli import main

TOML = """
base_seed = 0
sizes = [10, 20, 40]
repetitions = 3
metrics = ["CRPS", "PICP@0.9"]
workers = 1
output_dir = "out"

[[datasets]]
name = "syn"
source = "synthetic"
count = 300
d = 6

[[methods]]
kind = "MAP"
epochs = 5

[[methods]]
kind = "MAP_BETA_NLL"
epochs = 5
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(TOML)
    return path


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out


def test_run_analyze_report(cfg, tmp_path, capsys):
    assert main(["run", str(cfg), "-q"]) == 0
    assert "18 cells run" in capsys.readouterr().out
    assert main(["run", str(cfg), "-q"]) == 0
    assert "0 cells run, 18 already stored" in capsys.readouterr().out

    assert main(["analyze", str(cfg), "--json"]) == 0
    tables = json.loads(capsys.readouterr().out)
    assert {r["method"] for r in tables["fits"]} == {"MAP", "MAP_BETA_NLL"}

    assert main(["analyze", str(cfg), "--metric", "PICP@0.9", "--reps", "2"]) == 0
    assert "alpha=" in capsys.readouterr().out

    assert main(["report", str(cfg), "--formats", "csv,md"]) == 0
    written = capsys.readouterr().out.split()
    assert any(p.endswith("report.md") for p in written)
    assert (tmp_path / "out" / "report" / "fits.csv").exists()


def test_max_cells_then_resume(cfg, capsys):
    assert main(["run", str(cfg), "-q", "--max-cells", "4"]) == 0
    assert main(["run", str(cfg), "-q"]) == 0
    assert "14 cells run, 4 already stored" in capsys.readouterr().out


def test_missing_config_is_fatal(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.toml")]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_key_is_fatal(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text(TOML + "\nfrobnicate = 1\n")
    assert main(["run", str(path)]) == 1


def test_analyze_without_store_is_fatal(cfg):
    assert main(["analyze", str(cfg)]) == 1


def test_analyze_against_other_config_is_fatal(cfg, tmp_path):
    assert main(["run", str(cfg), "-q"]) == 0
    cfg.write_text(TOML.replace("repetitions = 3", "repetitions = 4"))
    assert main(["analyze", str(cfg)]) == 1


def test_fetch_reports_local_datasets(cfg, capsys):
    assert main(["fetch", str(cfg)]) == 0
    assert "syn: synthetic, 300 rows, 6 features" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "benchrel", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("fetch", "run", "analyze", "report", "selftest"):
        assert sub in proc.stdout
