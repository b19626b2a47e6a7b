import csv
import json
from pathlib import Path

import pytest

from mkvlab.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_PASS, main

TRIVIAL = str(Path(__file__).resolve().parents[1] / "configs" / "trivial.toml")


def run(sub, out, *extra, config=TRIVIAL):
    return main([sub, "--config", config, "--out", str(out), *extra])


def test_trivial_dpp_residual_is_zero(tmp_path, capsys):
    assert run("dpp", tmp_path) == EXIT_PASS
    doc = json.loads(capsys.readouterr().out)
    (check,) = [c for c in doc["checks"] if c["check"] == "dpp_residual"]
    assert check["statistic"] == 0.0 and check["pass"]
    assert doc["config_hash"] == json.loads((tmp_path / "dpp.json").read_text())["config_hash"]


@pytest.mark.parametrize("sub", ["sandwich", "compactset"])
def test_reruns_and_jobs_are_byte_identical(tmp_path, sub):
    stem = sub.replace("-", "_")
    texts = []
    for i, jobs in enumerate(["1", "1", "2"]):
        assert run(sub, tmp_path / str(i), "--jobs", jobs) == EXIT_PASS
        texts.append((tmp_path / str(i) / f"{stem}.json").read_bytes())
    assert texts[0] == texts[1] == texts[2]


def test_seed_override_changes_hash(tmp_path):
    run("simulate", tmp_path / "a")
    run("simulate", tmp_path / "b", "--seed", "5")
    a = json.loads((tmp_path / "a" / "simulate.json").read_text())
    b = json.loads((tmp_path / "b" / "simulate.json").read_text())
    assert a["config_hash"] != b["config_hash"] and b["config"]["seed"] == 5


def test_csv_uses_full_precision(tmp_path):
    run("sandwich", tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "sandwich.csv")))
    assert list(rows[0]) == ["config_hash", "subcommand", "statistic", "value", "stderr", "pass"]
    doc = json.loads((tmp_path / "sandwich.json").read_text())
    by_name = {s["statistic"]: s["value"] for s in doc["statistics"]}
    for r in rows:
        if r["statistic"] in by_name:
            assert float(r["value"]) == by_name[r["statistic"]]
            assert r["value"] == format(by_name[r["statistic"]], ".17g")


def test_report_passes_on_clean_ledger(tmp_path, capsys):
    run("dpp", tmp_path)
    run("value", tmp_path)
    capsys.readouterr()
    assert main(["report", "--out", str(tmp_path)]) == EXIT_PASS
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_failed"] == 0 and len(summary["config_hashes"]) == 1


def test_report_lists_failing_rows(tmp_path, capsys):
    run("dpp", tmp_path)
    ledger = tmp_path / "ledger.csv"
    rows = list(csv.reader(open(ledger)))
    bad = list(rows[1])
    bad[3], bad[6] = "made_up_check", "false"
    with open(ledger, "a", newline="") as fh:
        csv.writer(fh).writerow(bad)
    capsys.readouterr()
    assert main(["report", "--out", str(tmp_path)]) == EXIT_FAIL
    summary = json.loads(capsys.readouterr().out)
    assert [f["check"] for f in summary["failures"]] == ["made_up_check"]


def test_report_latest_row_wins(tmp_path):
    run("dpp", tmp_path)
    ledger = tmp_path / "ledger.csv"
    rows = list(csv.reader(open(ledger)))
    failed = list(rows[1])
    failed[6] = "false"
    with open(ledger, "a", newline="") as fh:
        csv.writer(fh).writerow(failed)
        csv.writer(fh).writerow(rows[1])
    assert main(["report", "--out", str(tmp_path)]) == EXIT_PASS


def test_report_rejects_mixed_hashes(tmp_path):
    run("dpp", tmp_path)
    run("dpp", tmp_path, "--seed", "3")
    assert main(["report", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["report", "--out", str(tmp_path), "--allow-mixed"]) == EXIT_PASS


def test_missing_ledger_and_bad_config(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "nowhere")]) == EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = 0\n[budget]\nworlds = 0\n")
    assert run("simulate", tmp_path, config=str(bad)) == EXIT_CONFIG
    assert "budget.worlds" in capsys.readouterr().err
    assert run("simulate", tmp_path, config=str(tmp_path / "absent.toml")) == EXIT_CONFIG


def test_every_check_reaches_the_ledger(tmp_path):
    run("sandwich", tmp_path)
    doc = json.loads((tmp_path / "sandwich.json").read_text())
    rows = list(csv.DictReader(open(tmp_path / "ledger.csv")))
    assert [r["statistic"] for r in rows] == [c["check"] for c in doc["checks"]]
    assert all(r["pass"] == "true" for r in rows)


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2
