"""
Tests for the command-line interface and batch runner
"""

import json

import pytest

from checker import AuditReport
from cli import (
    EXIT_ERROR,
    EXIT_OK,
    EXIT_VIOLATION,
    latency_stats,
    main,
    run_scenario,
    run_uniform_counterexample,
    uniform_counterexample_configs,
)
from models import scenario_from_mapping

SMALL_SCENARIO = {
    "name": "small",
    "repeat": 2,
    "sim_config": {
        "params": {"alpha": 0.0, "f": 1, "ns_min": 8, "gamma": 0.8, "beta": 0.86},
        "initial_servers": 8,
        "initial_clients": 2,
        "duration": 10.0,
        "workload": {"ops_per_client": 3},
        "adversary": {"strategy": "silent", "corrupt_count": 1},
        "seed": 40,
    },
}


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_SCENARIO), encoding="utf-8")
    return path


class TestParamsCommands:
    """Test the params subcommands"""

    def test_check_feasible(self, capsys):
        """Test that a feasible row exits 0"""
        code = main(["params", "check", "--alpha", "0.01", "--f", "1", "--ns-min", "10",
                     "--gamma", "0.82", "--beta", "0.84"])
        assert code == EXIT_OK
        assert "Feasible" in capsys.readouterr().out

    def test_check_infeasible(self, capsys):
        """Test that a row failing (7) exits 1 and names the constraint"""
        code = main(["params", "check", "--alpha", "0.02", "--f", "1", "--ns-min", "13",
                     "--gamma", "0.79", "--beta", "0.80"])
        assert code == EXIT_VIOLATION
        assert "fails [7]" in capsys.readouterr().out

    def test_check_variant(self, capsys):
        """Test that the alternative form of (7) accepts the same row"""
        code = main(["params", "check", "--alpha", "0.02", "--f", "1", "--ns-min", "13",
                     "--gamma", "0.79", "--beta", "0.80", "--variant", "no-plus-one", "--format", "json"])
        assert code == EXIT_OK
        data = json.loads(capsys.readouterr().out)
        assert data["report"]["feasible"]
        assert data["report"]["variant"] == "no-plus-one"

    def test_region_only(self, capsys):
        """Test that omitting beta prints the feasible region"""
        code = main(["params", "check", "--alpha", "0.01", "--f", "1", "--ns-min", "10"])
        assert code == EXIT_OK
        assert "Feasible gamma" in capsys.readouterr().out

    def test_missing_arguments(self, capsys):
        """Test that incomplete parameters are a usage error"""
        assert main(["params", "check", "--alpha", "0.01"]) == EXIT_ERROR
        assert "Error" in capsys.readouterr().err

    def test_params_file(self, tmp_path, capsys):
        """Test reading parameters from a key=value file"""
        path = tmp_path / "row.txt"
        path.write_text("alpha=0\nf=1\nns_min=8\ngamma=n/a\nbeta=0.86\n", encoding="utf-8")
        assert main(["params", "check", "--file", str(path)]) == EXIT_OK

    def test_table_json(self, capsys):
        """Test that the table audit lists all published rows"""
        assert main(["params", "table", "--format", "json"]) == EXIT_OK
        data = json.loads(capsys.readouterr().out)
        assert len(data["rows"]) == 19
        assert not data["rows"][2]["feasible_printed"]

    def test_table_sweep(self, capsys):
        """Test the minimum NS_min sweep"""
        code = main(["params", "table", "--sweep", "--alphas", "0,0.01", "--fs", "1", "--format", "json"])
        assert code == EXIT_OK
        assert json.loads(capsys.readouterr().out)["sweep"]["ns_min"] == [[8], [10]]

    def test_table_markdown(self, capsys):
        """Test the markdown rendering"""
        assert main(["params", "table", "--format", "markdown"]) == EXIT_OK
        assert "# Parameter Table Audit" in capsys.readouterr().out

    def test_table_rich(self):
        """Test the console table rendering"""
        assert main(["params", "table"]) == EXIT_OK


class TestSimAndCheckCommands:
    """Test scenario runs and trace checking"""

    def test_sim_run_writes_outputs(self, scenario_file, tmp_path, capsys):
        """Test that a batch run writes traces and a report"""
        out = tmp_path / "runs"
        code = main(["sim", "run", str(scenario_file), "--out", str(out), "--format", "json"])
        assert code == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert [run["seed"] for run in report["runs"]] == [40, 41]
        assert (out / "report.json").is_file()
        assert (out / "trace-seed40.jsonl").is_file()

    def test_check_saved_trace(self, scenario_file, tmp_path, capsys):
        """Test that a saved trace checks clean"""
        out = tmp_path / "runs"
        main(["sim", "run", str(scenario_file), "--out", str(out), "--repeat", "1"])
        capsys.readouterr()
        code = main(["check", str(out / "trace-seed40.jsonl"), "--format", "json"])
        assert code == EXIT_OK
        assert json.loads(capsys.readouterr().out)["linearizable"]

    def test_missing_scenario(self, tmp_path):
        """Test that a missing scenario file is an error"""
        assert main(["sim", "run", str(tmp_path / "absent.json")]) == EXIT_ERROR

    def test_infeasible_scenario(self, tmp_path, capsys):
        """Test that infeasible parameters refuse to run without override"""
        data = json.loads(json.dumps(SMALL_SCENARIO))
        data["sim_config"]["params"] = {"alpha": 0.02, "f": 1, "ns_min": 13, "gamma": 0.79, "beta": 0.80}
        data["sim_config"]["initial_servers"] = 13
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        assert main(["sim", "run", str(path)]) == EXIT_ERROR
        assert "constraints [7]" in capsys.readouterr().err

    def test_bad_repeat(self, scenario_file):
        """Test that a repeat count of zero is rejected"""
        assert main(["sim", "run", str(scenario_file), "--repeat", "0"]) == EXIT_ERROR

    def test_audit_only_code_distinct_from_errors(self, scenario_file, tmp_path, capsys, monkeypatch):
        """Test that an audit-only failure and an input error exit with different codes"""
        out = tmp_path / "runs"
        main(["sim", "run", str(scenario_file), "--out", str(out), "--repeat", "1"])
        capsys.readouterr()
        monkeypatch.setattr(AuditReport, "passed", property(lambda self: False))
        code = main(["check", str(out / "trace-seed40.jsonl"), "--format", "json"])
        assert code == 2
        assert json.loads(capsys.readouterr().out)["exit_code"] == 2
        assert main(["check", str(tmp_path / "absent.jsonl")]) == EXIT_ERROR == 3


class TestBatchRunner:
    """Test the batch runner directly"""

    def test_seeds_and_stats(self):
        """Test that runs use consecutive seeds and latencies are aggregated"""
        report = run_scenario(scenario_from_mapping(SMALL_SCENARIO), seed=7, repeat=2, workers=1)
        assert [run.seed for run in report.runs] == [7, 8]
        assert report.ok
        assert report.op_latency.count > 0
        assert report.op_latency.max <= 4.0 + 1e-9

    def test_latency_stats_empty(self):
        """Test that no samples give empty statistics"""
        stats = latency_stats([])
        assert stats.count == 0
        assert stats.max is None

    def test_latency_stats(self):
        """Test max, mean and 95th percentile"""
        stats = latency_stats([1.0, 2.0, 3.0])
        assert stats.max == 3.0
        assert stats.mean == pytest.approx(2.0)
        assert stats.p95 == pytest.approx(2.9)


class TestUniformCounterexample:
    """Test the uniform-threshold counterexample"""

    def test_configs(self):
        """Test the three runs and their expectations"""
        configs = uniform_counterexample_configs()
        assert [(name, expect) for name, _, expect in configs] == [
            ("uniform-client-byzantine", False),
            ("abcc-client-byzantine", True),
            ("uniform-client-honest", True),
        ]
        _, abcc, _ = configs[1]
        abcc.validate()

    def test_results(self):
        """Test that the uniform reader returns the overwritten value and both controls stay atomic"""
        results = {result["name"]: result for result in run_uniform_counterexample()}
        broken = results["uniform-client-byzantine"]
        assert not broken["linearizable"]
        assert broken["read"] == "v"
        assert broken["violation"]["kind"] == "real-time"
        assert results["abcc-client-byzantine"]["linearizable"]
        assert results["abcc-client-byzantine"]["read"] == "v-prime"
        assert results["uniform-client-honest"]["read"] == "v-prime"
        assert all(result["as_expected"] for result in results.values())

    def test_command(self, capsys):
        """Test the counterexample subcommand"""
        assert main(["counterexample", "uniform"]) == EXIT_OK
        assert "NOT linearizable" in capsys.readouterr().out
