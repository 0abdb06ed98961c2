import subprocess
import sys

import pytest

from bychain import cli
from bychain.sim.report import read_csv


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_run_writes_bundle(tmp_path, capsys):
    code, out, _ = run(["run", "--rounds", "8", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "height: 8" in out
    for name in ("trace.csv", "claims.csv", "committee.csv", "metrics.csv", "summary.txt", "chain.bin"):
        assert (tmp_path / name).is_file()
    schema, rows = read_csv(tmp_path / "trace.csv")
    assert schema == "round-trace/1" and rows


def test_report_text_and_csv(tmp_path, capsys):
    run(["run", "--rounds", "5", "--out", str(tmp_path)], capsys)
    code, text, _ = run(["report", "--run-dir", str(tmp_path)], capsys)
    assert code == 0 and "height: 5" in text
    code, table, _ = run(["report", "--run-dir", str(tmp_path), "--format", "csv"], capsys)
    assert table.splitlines()[:2] == ["#schema=run-summary/1", "key,value"]


def test_seed_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("BYCHAIN_SEED", "3")
    run(["run", "--rounds", "4", "--out", str(tmp_path / "env")], capsys)
    monkeypatch.delenv("BYCHAIN_SEED")
    run(["run", "--rounds", "4", "--seed", "3", "--out", str(tmp_path / "flag")], capsys)
    assert (tmp_path / "env" / "chain.bin").read_bytes() == (tmp_path / "flag" / "chain.bin").read_bytes()


def test_bad_seed_environment(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("BYCHAIN_SEED", "seven")
    code, _, err = run(["run", "--rounds", "2", "--out", str(tmp_path)], capsys)
    assert code == 64 and "BYCHAIN_SEED" in err


@pytest.mark.parametrize("argv", [[], ["fly"], ["run", "--rounds", "x"], ["bench", "--op", "nope"],
                                  ["bench", "--iters", "0"], ["report"]])
def test_usage_errors(argv, capsys):
    assert run(argv, capsys)[0] == 64


def test_missing_scenario_file(tmp_path, capsys):
    code, _, err = run(["run", "--scenario", str(tmp_path / "none.scn"), "--out", str(tmp_path)], capsys)
    assert code == 1 and "scenario" in err


def test_invalid_scenario_file(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("witnesses: {count: -1}\n")
    assert run(["run", "--scenario", str(bad), "--out", str(tmp_path)], capsys)[0] == 1


def test_report_without_run(tmp_path, capsys):
    assert run(["report", "--run-dir", str(tmp_path)], capsys)[0] == 1


def test_attack_single_action(tmp_path, capsys):
    code, out, _ = run(["attack", "--rounds", "10", "--action", "replay_commitment", "--out", str(tmp_path)],
                       capsys)
    assert code == 0
    schema, rows = read_csv(tmp_path / "attacks.csv")
    assert schema == "attack-outcomes/1" and [r["action"] for r in rows] == ["replay_commitment"]


def test_attack_from_scenario_file(tmp_path, capsys):
    scn = tmp_path / "a.scn"
    scn.write_text("rounds: 10\nadversary:\n  - {action: collude_witnesses, fraction: 0.6}\n")
    code, _, _ = run(["attack", "--scenario", str(scn), "--out", str(tmp_path / "o")], capsys)
    assert code == 0


def test_attack_bad_action_in_scenario(tmp_path, capsys):
    scn = tmp_path / "a.scn"
    scn.write_text("rounds: 4\nadversary:\n  - {action: teleport}\n")
    assert run(["attack", "--scenario", str(scn), "--out", str(tmp_path / "o")], capsys)[0] == 1


def test_bench_csv(tmp_path, capsys):
    code, out, _ = run(["bench", "--op", "verify", "--iters", "20", "--format", "csv", "--out", str(tmp_path)],
                       capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "#schema=crypto-bench/1"
    assert lines[2].startswith("verify,20,")
    assert (tmp_path / "bench.csv").read_text() == out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bychain.cli", "bench", "--op", "hash", "--iters", "5"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0 and "hash" in proc.stdout
