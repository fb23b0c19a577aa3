from __future__ import annotations

import json
import subprocess
import sys

from nicpool.cli import main


def test_plan_prints_replication(capsys):
    assert main(["plan", "--latencies", "20,18,27,10"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["replication"]["R"] == [2, 2, 3, 1]


def test_plan_with_target(capsys):
    assert main(["plan", "--latencies", "20,18,27,10", "--target", "2.5", "--t", "3", "--lambda", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["allocation"]["per_stage_total"] == [3, 3, 3, 3]


def test_list_examples(capsys):
    assert main(["list-examples"]) == 0
    out = capsys.readouterr().out
    assert "failover" in out and "ipsec_gateway" in out


def test_bad_scenario_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\nname: x\nseed: [\n")
    assert main(["run", str(bad)]) == 2
    assert "line" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_module_entry_point_runs_a_scenario(tmp_path):
    out = tmp_path / "r.json"
    proc = subprocess.run([sys.executable, "-m", "nicpool", "run", "multiplexing", "-o", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    report = json.loads(out.read_text())
    assert report["scenario"] == "multiplexing"
