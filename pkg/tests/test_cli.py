"""Config validation, outputs, determinism, and the smaller CLI commands."""

import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from idspn import cli


def write_config(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


class TestValidation:
    def test_unknown_top_level_field_rejected(self, tmp_path):
        path = write_config(tmp_path, {"command": "gradcheck", "bogus": 1})
        assert cli.run(path) == 2

    def test_unknown_task_field_rejected(self, tmp_path):
        path = write_config(
            tmp_path, {"command": "train-autoencode", "task": {"n": 2, "weird": True}}
        )
        assert cli.run(path) == 2

    def test_unknown_command_rejected(self, tmp_path):
        path = write_config(tmp_path, {"command": "train-clevr"})
        assert cli.run(path) == 2

    def test_invalid_json_reports_line(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"command": "gradcheck",\n  broken\n}')
        assert cli.run(path) == 2
        assert "line 2" in capsys.readouterr().err

    def test_override_dotted_paths(self):
        raw = cli.apply_overrides({"command": "bench"}, ["task.n=4", "seed=9"])
        assert raw["task"]["n"] == 4 and raw["seed"] == 9


class TestGradcheckCommand:
    def test_writes_pass_table(self, tmp_path):
        path = write_config(
            tmp_path, {"command": "gradcheck", "task": {"trials": 3}, "output_dir": str(tmp_path / "out")}
        )
        assert cli.run(path) == 0
        summary = json.loads((tmp_path / "out" / "gradcheck" / "summary.json").read_text())
        assert summary["all_passed"] is True
        assert all(row["max_rel_err"] < 1e-4 for row in summary["ops"])


class TestCheckEquivarianceCommand:
    def test_verdicts_match_module_suite(self, tmp_path):
        path = write_config(
            tmp_path,
            {
                "command": "check-equivariance",
                "task": {"hidden": 10, "n": 3, "probe_samples": 5},
                "output_dir": str(tmp_path / "out"),
            },
        )
        assert cli.run(path) == 0
        summary = json.loads((tmp_path / "out" / "check-equivariance" / "summary.json").read_text())
        v = summary["verdicts"]
        assert v["sum_inner_step"] == {"set_equivariant": True, "multiset_equivariant": True}
        assert v["fspool_inner_step"]["set_equivariant"] is False
        assert v["fspool_inner_step"]["multiset_equivariant"] is True
        assert v["order_dependent_copy"]["multiset_equivariant"] is False
        assert all(dist == 0.0 for _, dist in summary["probes"]["sorting_jacobian"])
        assert "no violation found" in summary["note"] or "refute" in summary["note"]


class TestBenchCommand:
    def test_node_count_scaling_report(self, tmp_path):
        path = write_config(
            tmp_path,
            {
                "command": "bench",
                "task": {"n": 4, "d": 3, "hidden": 16, "batch_size": 4, "iteration_counts": [1, 5, 20]},
                "output_dir": str(tmp_path / "out"),
            },
        )
        assert cli.run(path) == 0
        summary = json.loads((tmp_path / "out" / "bench" / "summary.json").read_text())
        assert summary["approximate_t_independent"] is True
        assert summary["unrolled_vs_t_r2"] > 0.99
        counts = summary["node_counts"]["20"]
        assert counts["unrolled"] > 5 * counts["approximate"]
        counts1 = summary["node_counts"]["1"]
        assert counts1["unrolled"] < 2 * counts1["approximate"]
        timing = json.loads((tmp_path / "out" / "bench" / "timing.json").read_text())
        for phase in ("forward_ms", "backward_ms", "matching_ms"):
            assert phase in timing["20"]["unrolled"]


class TestDeterminism:
    def test_same_config_same_seed_byte_identical_summary(self, tmp_path):
        payload = {
            "command": "train-autoencode",
            "seed": 5,
            "task": {"n": 2, "d": 2, "hidden": 16, "epochs": 1, "batch_size": 32,
                     "train_size": 64, "test_size": 32},
            "inner": {"iterations": 3},
        }
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        path = write_config(tmp_path, payload)
        assert cli.run(path, output_dir=out_a) == 0
        assert cli.run(path, output_dir=out_b) == 0
        sa = (out_a / "train-autoencode" / "summary.json").read_bytes()
        sb = (out_b / "train-autoencode" / "summary.json").read_bytes()
        assert sa == sb

    def test_manifest_fields(self, tmp_path):
        payload = {"command": "gradcheck", "task": {"trials": 1}}
        path = write_config(tmp_path, payload)
        assert cli.run(path, output_dir=tmp_path / "out") == 0
        manifest = json.loads((tmp_path / "out" / "gradcheck" / "manifest.json").read_text())
        assert set(manifest) >= {"config_hash", "code_version", "seed"}
        assert len(manifest["config_hash"]) == 64


class TestEnvFallback:
    def test_idspn_output_dir_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("IDSPN_OUTPUT_DIR", str(tmp_path / "envout"))
        path = write_config(tmp_path, {"command": "gradcheck", "task": {"trials": 1}})
        assert cli.run(path) == 0
        assert (tmp_path / "envout" / "gradcheck" / "summary.json").exists()


class TestSweep:
    def test_csv_row_count_two_seeds_two_modes_one_cell(self, tmp_path):
        payload = {
            "command": "sweep-autoencode",
            "seeds": [0, 1],
            "task": {
                "n": [2], "d": [2], "iterations": [3], "modes": ["idspn_momentum", "dspn"],
                "hidden": 8, "epochs": 1, "batch_size": 32, "train_size": 64, "test_size": 32,
            },
            "output_dir": str(tmp_path / "out"),
        }
        path = write_config(tmp_path, payload)
        assert cli.run(path) == 0
        rows = (tmp_path / "out" / "sweep-autoencode" / "sweep.csv").read_text().strip().splitlines()
        assert len(rows) == 5  # header + 4 data rows
        assert rows[0].split(",")[:4] == ["n", "d", "iterations", "mode"]


class TestEntryPoint:
    def test_console_script_runs(self, tmp_path):
        path = write_config(tmp_path, {"command": "gradcheck", "task": {"trials": 1}})
        env = dict(os.environ, IDSPN_OUTPUT_DIR=str(tmp_path / "out"), OPENBLAS_NUM_THREADS="1")
        proc = subprocess.run(
            [sys.executable, "-m", "idspn.cli", str(path)],
            capture_output=True, text=True, env=env,
        )
        assert proc.returncode == 0, proc.stderr
        assert "summary.json" in proc.stdout
