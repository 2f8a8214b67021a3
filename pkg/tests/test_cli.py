import json
import os
import shutil

import pytest

from helpers import fixture_path
from trial_redesign.cli import main


def test_optimize_enrollment_fixture(tmp_path, capsys):
    out = tmp_path / "result.json"
    mem = tmp_path / "memory.json"
    code = main(["optimize", "--trial", fixture_path("enrollment", "protocol.json"), "--failure-mode", "enrollment",
                 "--out", str(out), "--oracle", "ref:" + fixture_path("enrollment", "spec.json"),
                 "--provider", "scripted:" + fixture_path("enrollment", "playbook.json"),
                 "--memory", str(mem), "--trace-dir", str(tmp_path / "trace")])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["p0"] == pytest.approx(0.35) and doc["delta_p"] == pytest.approx(0.15)
    assert doc["delta_p"] > 0
    assert "NCT01298752" in capsys.readouterr().out
    assert mem.exists() and os.path.exists(tmp_path / "trace" / "iterations.jsonl")
    assert main(["memory", "inspect", "--memory", str(mem)]) == 0
    assert "[enrollment]" in capsys.readouterr().out


def test_usage_error_exits_2(capsys):
    assert main(["optimize", "--failure-mode", "enrollment"]) == 2
    assert main([]) == 2
    assert main(["gen-synthetic", "--kind", "nope", "--out", "x"]) == 2


def test_unreachable_oracle_exits_1(tmp_path, capsys):
    code = main(["optimize", "--trial", fixture_path("enrollment", "protocol.json"), "--failure-mode", "enrollment",
                 "--out", str(tmp_path / "r.json"), "--oracle", "remote:http://127.0.0.1:9/score",
                 "--provider", "scripted:" + fixture_path("enrollment", "playbook.json")])
    assert code == 1
    assert "OracleUnavailable" in capsys.readouterr().err


def test_missing_and_bad_inputs_exit_1(tmp_path, capsys):
    base = ["optimize", "--failure-mode", "enrollment", "--out", str(tmp_path / "r.json"),
            "--oracle", "ref:" + fixture_path("enrollment", "spec.json"),
            "--provider", "scripted:" + fixture_path("enrollment", "playbook.json")]
    assert main(base + ["--trial", str(tmp_path / "missing.json")]) == 1
    bad_mem = tmp_path / "m.json"
    bad_mem.write_text(json.dumps({"schema_version": 0}))
    assert main(base + ["--trial", fixture_path("enrollment", "protocol.json"), "--memory", str(bad_mem)]) == 1
    assert main(["report", str(tmp_path / "nothing.json")]) == 1
    assert "error:" in capsys.readouterr().err


def test_script_miss_exits_1(tmp_path, capsys):
    empty = tmp_path / "pb.json"
    empty.write_text(json.dumps({"rules": [], "fallback": []}))
    code = main(["optimize", "--trial", fixture_path("enrollment", "protocol.json"), "--failure-mode", "enrollment",
                 "--out", str(tmp_path / "r.json"), "--oracle", "ref:" + fixture_path("enrollment", "spec.json"),
                 "--provider", f"scripted:{empty}"])
    assert code == 1 and "ScriptMiss" in capsys.readouterr().err


def test_gen_synthetic_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-synthetic", "--kind", "planted", "--n", "5", "--seed", "7", "--out", str(tmp_path / d)]) == 0
    for root, _, files in os.walk(tmp_path / "a"):
        for f in files:
            p = os.path.join(root, f)
            q = p.replace(str(tmp_path / "a"), str(tmp_path / "b"))
            with open(p, "rb") as x, open(q, "rb") as y:
                assert x.read() == y.read()


def test_batch_and_report(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert main(["gen-synthetic", "--kind", "planted", "--n", "6", "--out", str(corpus)]) == 0
    report = tmp_path / "report.json"
    code = main(["batch", "--manifest", str(corpus / "manifest.json"), "--out", str(report),
                 "--results-dir", str(tmp_path / "results"), "--memory", str(tmp_path / "mem.json")])
    assert code == 0
    rep = json.loads(report.read_text())
    assert rep["n_trials"] == 6 and len(os.listdir(tmp_path / "results")) == 6
    per = [json.loads((tmp_path / "results" / f"{t['name']}.json").read_text())["delta_p"] for t in rep["trials"]]
    assert per == [t["delta_p"] for t in rep["trials"]]
    capsys.readouterr()
    curve = tmp_path / "curve.csv"
    assert main(["report", str(report), "--curve", str(curve), "--text-out", str(tmp_path / "r.txt")]) == 0
    text = capsys.readouterr().out
    assert f"{rep['mean_delta_p']:+.6f}" in text
    assert len(curve.read_text().splitlines()) == 1 + len(rep["per_iteration_mean_gain"])
    assert (tmp_path / "r.txt").read_text().strip() == text.strip()


def test_batch_missing_manifest_exits_1(tmp_path, capsys):
    assert main(["batch", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path / "r.json")]) == 1


def test_memory_inspect_empty(tmp_path, capsys):
    assert main(["memory", "inspect", "--memory", str(tmp_path / "none.json")]) == 0
    assert capsys.readouterr().out.strip().splitlines() == ["global memory (schema_version 1)", "empty"]


def test_console_script_installed():
    assert shutil.which("trial-redesign") is not None
