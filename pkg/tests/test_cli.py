import csv
import json
import subprocess
import sys

import pytest

from featstress.cli import main, parse_int_list
from featstress.featstore import load_features, load_labels, load_split
from featstress.runner import read_jsonl

SMALL = ["--classes", "3", "--per-class", "12", "--dims", "24", "--informative", "6", "--scale-spread", "10"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    assert run("synth", "--out-dir", d, *SMALL) == 0
    return d


def files(d):
    return ["--features", d / "features.fmat", "--labels", d / "labels.csv", "--split", d / "split.txt"]


def test_synth_defaults_are_loadable(tmp_path):
    d = tmp_path / "syn"
    assert run("synth", "--out-dir", d) == 0
    f = load_features(d / "features.fmat")
    assert (f.rows, f.dims, f.source_tag) == (600, 256, "synthetic-v1")
    labels = load_labels(d / "labels.csv")
    split = load_split(d / "split.txt")
    assert labels.classes == 4 and len(labels) == 600
    split.check_rows(600)
    cfg = json.loads((d / "config.json").read_text())
    assert cfg["seed"] == 42 and cfg["dims"] == 256


def test_synth_is_byte_deterministic(tmp_path):
    run("synth", "--out-dir", tmp_path / "a", "--seed", 7, *SMALL)
    run("synth", "--out-dir", tmp_path / "b", "--seed", 7, *SMALL)
    for name in ("features.fmat", "labels.csv", "split.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_rejects_one_class(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("synth", "--out-dir", tmp_path, "--classes", 1)
    assert exc.value.code == 2
    assert "--classes" in capsys.readouterr().err


def test_sweep_identity(dataset, tmp_path):
    out = tmp_path / "sw"
    assert run("sweep", *files(dataset), "--stressor", "identity", "--out-dir", out, "--threads", 1) == 0
    rows = list(csv.DictReader((out / "results.csv").open()))
    assert len(rows) == 1 and float(rows[0]["retention"]) == 1.0
    assert json.loads((out / "config.json").read_text())["stressor"] == "identity"


def test_sweep_dr1_twenty_step_schedule_row_count(dataset, tmp_path):
    out = tmp_path / "sw"
    run("sweep", *files(dataset), "--stressor", "dr1", "--schedule", "paper", "--reps", 10, "--out-dir", out)
    assert len(read_jsonl(out / "results.jsonl")) == 201
    assert len((out / "results.csv").read_text().splitlines()) == 202


def test_sweep_q2_full_h_range(dataset, tmp_path):
    out = tmp_path / "sw"
    run("sweep", *files(dataset), "--stressor", "q2", "--h", "1..30", "--out-dir", out)
    res = read_jsonl(out / "results.jsonl")
    assert len(res) == 31 and [r.h for r in res[1:]] == list(range(1, 31))


def test_config_file_and_flag_precedence(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"stressor": "q1", "h": "2,3", "seed": 5}))
    out = tmp_path / "sw"
    run("sweep", "--config", cfg, *files(dataset), "--h", "4", "--out-dir", out)
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["stressor"] == "q1" and echoed["h"] == "4" and echoed["seed"] == 5
    assert [r.h for r in read_jsonl(out / "results.jsonl")[1:]] == [4]


def test_config_unknown_key_is_usage_error(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit) as exc:
        run("sweep", "--config", cfg, *files(dataset), "--out-dir", tmp_path / "o")
    assert exc.value.code == 2


def test_strict_exit_code_on_failed_cell(tmp_path):
    d = tmp_path / "tiny"
    run("synth", "--out-dir", d, "--classes", 2, "--per-class", 4, "--dims", 30, "--informative", 4)
    args = [*files(d), "--stressor", "dr2", "--keep", "1.0", "--out-dir", tmp_path / "o"]
    assert run("sweep", *args) == 0
    assert run("sweep", *args, "--strict") == 1


def test_report_tables(dataset, tmp_path):
    sw, rep = tmp_path / "sw", tmp_path / "rep"
    run("sweep", *files(dataset), "--stressor", "dr1,q1,fc", "--keep", "0.5,0.25", "--h", "2,4", "--reps", 2, "--out-dir", sw)
    assert run("report", "--results", sw / "results.jsonl", "--out-dir", rep) == 0
    dr1 = list(csv.DictReader((rep / "dr1.csv").open()))
    assert list(dr1[0]) == ["p", "p_percent", "mean_retention", "std"]
    assert [r["p_percent"] for r in dr1] == ["50", "25"]
    q1 = list(csv.DictReader((rep / "q1.csv").open()))
    assert list(q1[0]) == ["h", "mean_retention", "std", "rate"] and q1[0]["rate"] == "0.9688"
    fc = list(csv.DictReader((rep / "fc.csv").open()))
    assert list(fc[0]) == ["p", "p_percent", "h", "mean_retention", "std", "rate"] and len(fc) == 4
    # p=12 of 24, h=2: 1 - 12*1/(24*32)
    assert fc[0]["rate"] == "0.9844"


def test_report_empty_results(tmp_path, capsys):
    (tmp_path / "r.jsonl").write_text("")
    assert run("report", "--results", tmp_path / "r.jsonl", "--out-dir", tmp_path / "rep") == 0
    assert "warning" in capsys.readouterr().err
    assert (tmp_path / "rep" / "dr1.csv").read_text() == "p,p_percent,mean_retention,std\n"
    assert (tmp_path / "rep" / "fc.csv").read_text().count("\n") == 1


def test_report_malformed_results(tmp_path, capsys):
    (tmp_path / "r.jsonl").write_text("{not json\n")
    assert run("report", "--results", tmp_path / "r.jsonl", "--out-dir", tmp_path / "rep") == 1
    assert "malformed" in capsys.readouterr().err


def test_fit_apply_train_eval_chain(dataset, tmp_path, capsys):
    m, f2, clf = tmp_path / "m" / "q2.json", tmp_path / "q2.fmat", tmp_path / "clf.json"
    assert run("fit", "--features", dataset / "features.fmat", "--split", dataset / "split.txt",
               "--stressor", "q2", "--h", 4, "--out", m) == 0
    assert (tmp_path / "m" / "q2.config.json").exists()
    assert run("apply", "--model", m, "--features", dataset / "features.fmat", "--out", f2) == 0
    assert load_features(f2).source_tag == "synthetic-v1|q2"
    assert run("train", *files(dataset), "--model", m, "--out", clf) == 0
    assert run("eval", *files(dataset), "--model", m, "--classifier", clf, "--out", tmp_path / "score.json") == 0
    score = json.loads((tmp_path / "score.json").read_text())
    assert 0.0 <= score["accuracy"]["overall"] <= 1.0
    assert "accuracy:" in capsys.readouterr().out


def test_eval_multilabel_reports_both_variants(tmp_path, capsys):
    d = tmp_path / "ml"
    run("synth", "--out-dir", d, *SMALL, "--label-kind", "multi_label")
    run("train", *files(d), "--out", tmp_path / "clf.json")
    assert run("eval", *files(d), "--classifier", tmp_path / "clf.json") == 0
    out = capsys.readouterr().out
    assert "map_all_points" in out and "map_eleven_point" in out


def test_fit_needs_width(dataset, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("fit", "--features", dataset / "features.fmat", "--split", dataset / "split.txt",
            "--stressor", "dr1", "--out", tmp_path / "m.json")
    assert exc.value.code == 2


def test_missing_input_file_is_runtime_error(tmp_path, capsys):
    code = run("sweep", "--features", tmp_path / "nope.fmat", "--labels", tmp_path / "l.csv",
               "--split", tmp_path / "s.txt", "--out-dir", tmp_path / "o")
    assert code == 1 and "error" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run("sweep", "--stressor", "dr1")
    assert exc.value.code == 2 and "--features" in capsys.readouterr().err


def test_help_and_unknown_flags():
    help_ = subprocess.run([sys.executable, "-m", "featstress", "sweep", "--help"], capture_output=True, text=True)
    assert help_.returncode == 0
    for flag in ("--stressor", "--schedule", "--keep", "--h", "--reps", "--seed", "--threads", "--strict", "--no-timing"):
        assert flag in help_.stdout
    bad = subprocess.run([sys.executable, "-m", "featstress", "sweep", "--bogus"], capture_output=True, text=True)
    assert bad.returncode != 0


def test_threads_env_override(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("FEATSTRESS_THREADS", "3")
    out = tmp_path / "o"
    run("sweep", *files(dataset), "--stressor", "q1", "--h", "2", "--out-dir", out)
    assert len(read_jsonl(out / "results.jsonl")) == 2


def test_parse_int_list():
    assert parse_int_list("1..4,8") == [1, 2, 3, 4, 8]
    assert parse_int_list("2,3") == [2, 3]
