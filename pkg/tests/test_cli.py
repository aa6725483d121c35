import io
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from dagharness.cli import main, terminal_responder

SAMPLES = Path(__file__).resolve().parent.parent / "samples"


def run_cli(capsys, *argv):
    try:
        code = main(list(argv))
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


class TestValidate:
    def test_valid(self, capsys):
        code, out, _ = run_cli(capsys, "validate", str(SAMPLES / "bugfix_plan.json"))
        assert code == 0 and "ok" in out

    def test_cyclic(self, capsys):
        code, out, _ = run_cli(capsys, "validate", str(SAMPLES / "cyclic_plan.json"), "--json")
        doc = json.loads(out)
        assert code == 1 and "acyclicity" in {f["check"] for f in doc["failures"]}

    def test_malformed(self, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{ nope")
        assert run_cli(capsys, "validate", str(bad))[0] == 2


class TestRun:
    def test_golden_summary(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "run", str(SAMPLES / "bugfix_plan.json"), "--faults",
                               str(SAMPLES / "bugfix_faults.json"), "--out", str(tmp_path), "--json")
        doc = json.loads(out)
        assert code == 0
        assert doc["rounds"] == 6 and doc["cardinalities"] == [2, 2, 1, 3, 1, 1]
        assert doc["final_states"]["fix_A"] == "skipped"
        assert Path(doc["wal"]).exists()

    def test_text_output_lists_rounds(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "run", str(SAMPLES / "bugfix_plan.json"), "--faults",
                               str(SAMPLES / "bugfix_faults.json"), "--out", str(tmp_path))
        assert code == 0
        assert "round 4: |U|=3 {fix_A, fix_B, update_docs}" in out

    def test_replay_matches_run(self, capsys, tmp_path):
        wal = tmp_path / "g.wal"
        _, out, _ = run_cli(capsys, "run", str(SAMPLES / "bugfix_plan.json"), "--faults",
                            str(SAMPLES / "bugfix_faults.json"), "--wal", str(wal), "--json", "--snapshot-n", "3")
        ran = json.loads(out)
        code, out, _ = run_cli(capsys, "replay", str(wal), "--json")
        assert code == 0 and json.loads(out)["final_states"] == ran["final_states"]

    def test_replay_upto_one(self, capsys, tmp_path):
        wal = tmp_path / "g.wal"
        run_cli(capsys, "run", str(SAMPLES / "bugfix_plan.json"), "--wal", str(wal))
        code, out, _ = run_cli(capsys, "replay", str(wal), "--upto", "1", "--json")
        assert code == 0 and set(json.loads(out)["final_states"].values()) == {"pending"}

    def test_replay_corrupt(self, capsys, tmp_path):
        wal = tmp_path / "g.wal"
        run_cli(capsys, "run", str(SAMPLES / "bugfix_plan.json"), "--wal", str(wal))
        lines = wal.read_text().splitlines()
        lines[2] = lines[2].replace('"clock":0', '"clock":7')
        wal.write_text("\n".join(lines) + "\n")
        code, out, _ = run_cli(capsys, "replay", str(wal), "--json")
        assert code == 5 and json.loads(out)["seq"] == 3

    def test_approve_all(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "run", str(SAMPLES / "approval_plan.json"), "--faults",
                               str(SAMPLES / "approval_faults.json"), "--approve-all", "--out", str(tmp_path), "--json")
        assert code == 0 and json.loads(out)["final_states"]["deploy"] == "executed"

    def test_invalid_plan_exit(self, capsys, tmp_path):
        assert run_cli(capsys, "run", str(SAMPLES / "cyclic_plan.json"), "--out", str(tmp_path))[0] == 1

    def test_usage_errors(self, capsys):
        assert run_cli(capsys)[0] == 64
        assert run_cli(capsys, "frobnicate")[0] == 64
        assert run_cli(capsys, "run", "x.json", "--snapshot-n", "0")[0] == 64


def test_human_timeout_cancels_subprocess(tmp_path):
    exe = shutil.which("dagharness")
    cmd = [exe] if exe else [sys.executable, "-m", "dagharness.cli"]
    proc = subprocess.run(
        cmd + ["run", str(SAMPLES / "approval_plan.json"), "--faults", str(SAMPLES / "approval_faults.json"),
               "--human-timeout-ms", "200", "--out", str(tmp_path), "--json"],
        stdin=subprocess.DEVNULL, capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 3
    assert json.loads(proc.stdout)["final_states"]["deploy"] == "cancelled"


def test_terminal_responder_reads_answer():
    respond = terminal_responder(100, stream=io.StringIO("y\n"), out=io.StringIO())
    assert respond("n", 0) == ("approve", 0)
    respond = terminal_responder(100, stream=io.StringIO("no\n"), out=io.StringIO())
    assert respond("n", 0) == ("cancel", 0)


class TestBench:
    def test_missing_flag(self, capsys):
        assert run_cli(capsys, "bench", "--groups", "G4")[0] == 64

    def test_bad_group(self, capsys):
        assert run_cli(capsys, "bench", "--groups", "G9", "--tier", "simple")[0] == 64

    def test_full_gains(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "bench", "--groups", "G1,G2,G3,G4,G5,G6", "--tier", "medium",
                               "--count", "10", "--reps", "10", "--out", str(tmp_path), "--csv", "--json")
        assert code == 0
        doc = json.loads(out)
        g = doc["gains"]
        perf = {k: v["perf"] for k, v in doc["groups"].items()}
        assert g["g_total"] == pytest.approx(perf["G6"] - perf["G1"], abs=1e-12)
        assert (tmp_path / "bench.json").exists() and (tmp_path / "cardinality.csv").exists()

    def test_single_group(self, capsys, tmp_path):
        code, out, _ = run_cli(capsys, "bench", "--groups", "G4", "--tier", "simple", "--count", "3",
                               "--reps", "1", "--out", str(tmp_path), "--json")
        assert code == 0 and json.loads(out)["gains"] is None
