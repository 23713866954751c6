import json
import subprocess
import sys

import pytest

from conftest import small
from gridcoord.scenario_io.cli import EXIT_INFEASIBLE, EXIT_INVALID, EXIT_OK, EXIT_USAGE, main
from gridcoord.scenario_io.results import FILES


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(small()))
    return p


class TestExitCodes:
    def test_usage(self, capsys):
        assert main(["simulate", "--bogus"]) == EXIT_USAGE
        assert "error" in capsys.readouterr().err

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "verify" in capsys.readouterr().out

    def test_missing_file(self, tmp_path, capsys):
        assert main(["clear", str(tmp_path / "none.json"), "--period", "0"]) == EXIT_INVALID
        assert "cannot read" in capsys.readouterr().err

    def test_invalid_field(self, tmp_path, capsys):
        doc = small()
        doc["horizon_h"] = -1
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(doc))
        assert main(["clear", str(p), "--period", "0"]) == EXIT_INVALID
        assert "horizon_h" in capsys.readouterr().err

    def test_period_out_of_range(self, scenario, capsys):
        assert main(["clear", str(scenario), "--period", "99"]) == EXIT_INVALID
        assert "--period" in capsys.readouterr().err

    def test_infeasible_cap(self, tmp_path, capsys):
        # scorching weather and a tiny comfort band force consumption far above the cap
        doc = small(line_caps={"A2": 1e-3},
                    weather={"kind": "synthetic_summer", "t_low_f": 128.0, "t_high_f": 130.0, "peak_hour": 15.0})
        doc["population"]["house"] = {"deadband_f": [0.2, 0.2]}
        doc["population"]["comfort"] = {"band_low_f": [0.1, 0.1], "band_high_f": [0.1, 0.1]}
        p = tmp_path / "hot.json"
        p.write_text(json.dumps(doc))
        assert main(["clear", str(p), "--period", "0"]) == EXIT_INFEASIBLE
        assert "line cap" in capsys.readouterr().err


class TestCommands:
    def test_clear(self, scenario, capsys):
        assert main(["clear", str(scenario), "--period", "2"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["period"] == 2
        assert doc["agents"] == ["DG1", "DG2", "DG3", "DG4", "DG5", "A1", "A2"]
        assert abs(sum(doc["powers"]) - doc["d_total_kw"]) <= max(doc["balance_mismatch_kw"], 1e-9) + 1e-12

    def test_curve_dump(self, scenario, tmp_path):
        out = tmp_path / "curves.json"
        assert main(["curve-dump", str(scenario), "--period", "1", "--out", str(out)]) == EXIT_OK
        doc = json.loads(out.read_text())
        assert [len(a["houses"]) for a in doc["aggregators"]] == [3, 4]
        assert len(doc["generators"]) == 5

    def test_simulate(self, scenario, tmp_path, capsys):
        out = tmp_path / "res"
        assert main(["simulate", str(scenario), "--out", str(out)]) == EXIT_OK
        assert "12 periods" in capsys.readouterr().out
        assert all((out / name).exists() for name in FILES)

    def test_verify(self, scenario, capsys):
        assert main(["verify", str(scenario), "--periods", "2"]) == EXIT_OK
        assert "OK" in capsys.readouterr().out

    def test_verify_tight_tolerance_fails(self, scenario):
        assert main(["verify", str(scenario), "--tol-price", "1e-15"]) == EXIT_INVALID

    def test_bundled_by_name(self, tmp_path, capsys):
        assert main(["simulate", "base_desk", "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "base_feeder.csv").exists()


def test_module_entry_point(scenario):
    proc = subprocess.run([sys.executable, "-m", "gridcoord", "clear", str(scenario), "--period", "0"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_OK
    assert json.loads(proc.stdout)["converged"]
