import csv
import json
import math
import subprocess
import sys

import pytest

from tally.cli import BENCHMARK_COLUMNS, TIMING_COLUMNS, main


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def margins_file(tmp_path):
    return write(tmp_path / "m.json", {"rows": [2, 2, 2], "cols": [2, 2, 2]})


def run_cli(capsys, *argv):
    status = main(list(argv))
    out = capsys.readouterr()
    return status, out.out, out.err


def test_exact_report(capsys, margins_file):
    status, out, _ = run_cli(capsys, "exact", margins_file)
    assert status == 0
    rep = json.loads(out)
    assert rep["count"] == "21" and rep["ln_count"] == pytest.approx(math.log(21))
    assert rep["command"] == "exact" and rep["seed"] == 0
    assert rep["margins"] == {"rows": [2, 2, 2], "cols": [2, 2, 2]}


def test_malformed_json_reports_line(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"rows": [1, 2],\n "cols": [3,, ]}')
    status, out, err = run_cli(capsys, "exact", str(bad))
    assert status == 1
    assert "line 2" in json.loads(out)["error"]["message"]
    assert err.startswith("tally: invalid_input")


def test_inconsistent_margins_exit_one(capsys, tmp_path):
    status, out, _ = run_cli(capsys, "exact", write(tmp_path / "m.json", {"rows": [1, 2], "cols": [4]}))
    assert status == 1 and json.loads(out)["error"]["code"] == "invalid_input"
    status, _, _ = run_cli(capsys, "exact", str(tmp_path / "missing.json"))
    assert status == 1


def test_budget_exit_two(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("TALLY_DP_BUDGET", "10")
    status, out, err = run_cli(capsys, "exact", write(tmp_path / "m.json", {"rows": [3, 3], "cols": [3, 3]}))
    assert status == 2
    error = json.loads(out)["error"]
    assert error["code"].startswith("budget_exceeded") and error["limit"] == 10
    assert "budget_exceeded" in err


def test_typical_equal_rows(capsys, tmp_path):
    path = write(tmp_path / "m.json", {"rows": [3, 3], "cols": [1, 2, 3]})
    status, out, _ = run_cli(capsys, "typical", path)
    assert status == 0
    entries = json.loads(out)["entries"]
    assert entries[0] == pytest.approx([0.5, 1.0, 1.5], abs=1e-10)


def test_estimate_matches_exact(capsys, margins_file):
    status, out, _ = run_cli(capsys, "--seed", "3", "estimate", margins_file, "--samples", "20000")
    assert status == 0
    rep = json.loads(out)
    assert rep["comparison"]["passed"] and abs(rep["comparison"]["z_score"]) <= 3
    assert "wall_time" not in rep


def test_full_estimate_and_timings(capsys, margins_file):
    status, out, _ = run_cli(
        capsys, "--timings", "estimate", margins_file, "--method", "full", "--samples", "2000",
        "--nu-samples", "200", "--burnin", "20", "--thin", "2", "--delta-exponent", "inf",
    )
    assert status == 0
    rep = json.loads(out)
    assert rep["method"] == "full" and rep["tau_log"] is None
    assert "wall_time" in rep


def test_csv_output(capsys, margins_file):
    status, out, _ = run_cli(capsys, "--format", "csv", "exact", margins_file)
    assert status == 0
    rows = dict(list(csv.reader(out.splitlines()))[1:])
    assert rows["count"] == "21" and rows["margins.rows.0"] == "2"


def test_bad_numeric_option_exits_one(capsys, margins_file):
    status, _, _ = run_cli(capsys, "check", margins_file, "--suite", "thm52", "--trials", "0")
    assert status == 1
    with pytest.raises(SystemExit):
        main(["estimate", margins_file, "--samples", "0"])


def test_benchmark_on_empty_and_failing_corpus(capsys, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    out_csv = tmp_path / "out.csv"
    assert main(["benchmark", "--corpus", str(empty), "--out", str(out_csv)]) == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0] == f"# tally-benchmark v1 columns={len(BENCHMARK_COLUMNS)}"
    assert lines[1].split(",") == BENCHMARK_COLUMNS and len(lines) == 2
    capsys.readouterr()

    corpus = tmp_path / "corpus"
    corpus.mkdir()
    write(corpus / "a_good.json", {"rows": [1, 1], "cols": [1, 1]})
    write(corpus / "b_bad.json", {"rows": [1, 1], "cols": [3]})
    status = main(["--timings", "benchmark", "--corpus", str(corpus), "--out", str(out_csv),
                   "--samples", "500", "--nu-samples", "50", "--burnin", "10", "--chains", "2"])
    assert status == 0
    text = out_csv.read_text().splitlines()
    rows = list(csv.DictReader(text[1:]))
    assert list(rows[0]) == BENCHMARK_COLUMNS + TIMING_COLUMNS
    assert [r["status"] for r in rows] == ["ok", "invalid_input"]
    assert rows[0]["ln_count"] == repr(math.log(2))
    assert json.loads(capsys.readouterr().out)["failed"] == 1


def test_missing_corpus_exit_one(capsys, tmp_path):
    status, _, _ = run_cli(capsys, "benchmark", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "o.csv"))
    assert status == 1


def test_module_entry_point(margins_file):
    proc = subprocess.run([sys.executable, "-m", "tally.cli", "exact", margins_file], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["count"] == "21"
