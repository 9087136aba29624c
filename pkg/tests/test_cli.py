import json

import numpy as np
import pytest
import yaml

from qmlopt import cli
from qmlopt.bench import MetricReport, write_rep
from qmlopt.trace import RunTrace, TraceRow

SMALL_RUN = """\
problem: exp1
n_reps: 1
seed: 3
optimizer:
  T: 300
  d0_size: 4
  r0: 20
  levels: [0.6, 0.95]
  ei_search_budget: 40
  ei_polish_top: 1
"""


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_round_trip(capsys):
    assert cli.main(["defaults"]) == 0
    d = yaml.safe_load(capsys.readouterr().out)
    assert d["algorithm"] == "qml" and d["optimizer"]["levels"] == [0.6, 0.95]
    # the printed defaults are themselves a valid config
    rc = cli.parse_run_config(d)
    assert rc.optimizer.T == d["optimizer"]["T"]


def test_defaults_estimators(capsys):
    assert cli.main(["defaults", "validate-estimators"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["levels"] == [0.6, 0.95]


def test_unknown_key_names_key_and_line(tmp_path, capsys):
    cfg = write(tmp_path, SMALL_RUN.replace("  r0: 20\n", "  r0: 20\n  rzero: 5\n"))
    assert cli.main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "optimizer.rzero" in err and "line 8" in err
    assert not (tmp_path / "o").exists()


def test_levels_not_increasing(tmp_path, capsys):
    cfg = write(tmp_path, SMALL_RUN.replace("[0.6, 0.95]", "[0.95, 0.6]"))
    assert cli.main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "optimizer.levels" in capsys.readouterr().err


def test_malformed_yaml(tmp_path, capsys):
    cfg = write(tmp_path, "problem: [exp1\n")
    assert cli.main(["optimize", "--config", str(cfg)]) == 1
    assert "malformed" in capsys.readouterr().err


def test_unknown_problem(tmp_path, capsys):
    cfg = write(tmp_path, SMALL_RUN.replace("exp1", "nope"))
    assert cli.main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "problem" in capsys.readouterr().err


def test_optimize_writes_artifacts(tmp_path):
    cfg = write(tmp_path, SMALL_RUN)
    out = tmp_path / "o"
    assert cli.main(["optimize", "--config", str(cfg), "--out", str(out)]) == 0
    for f in ("rep_000.csv", "rep_000.json", "summary.json", "summary.meta.json", "run_config.json"):
        assert (out / f).exists()
    assert json.loads((out / "summary.json").read_text())["n_completed"] == 1


def test_optimize_idempotent(tmp_path):
    cfg = write(tmp_path, SMALL_RUN)
    for d in ("a", "b"):
        assert cli.main(["optimize", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for f in ("rep_000.csv", "rep_000.json", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ca, cb = (json.loads((tmp_path / d / "run_config.json").read_text()) for d in "ab")
    assert ca.pop("out") != cb.pop("out") and ca == cb


def test_fault_injection_partial(tmp_path, capsys):
    cfg = write(tmp_path, SMALL_RUN.replace("n_reps: 1", "n_reps: 3\nfault_reps: [1]"))
    out = tmp_path / "o"
    assert cli.main(["optimize", "--config", str(cfg), "--out", str(out)]) == 2
    assert "completed 2/3" in capsys.readouterr().out
    s = json.loads((out / "summary.json").read_text())
    assert (s["n_completed"], s["n_reps"]) == (2, 3)
    assert [f["rep"] for f in s["failed"]] == [1]


def test_env_overrides_and_flag_precedence(tmp_path, monkeypatch):
    cfg = write(tmp_path, SMALL_RUN)
    monkeypatch.setenv("QMLOPT_OUT", str(tmp_path / "env"))
    monkeypatch.setenv("QMLOPT_JOBS", "1")
    assert cli.main(["optimize", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "summary.json").exists()
    assert cli.main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "summary.json").exists()
    monkeypatch.setenv("QMLOPT_JOBS", "many")
    assert cli.main(["optimize", "--config", str(cfg)]) == 1


def test_validate_estimators_default(capsys):
    assert cli.main(["validate-estimators"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2


def test_validate_estimators_low_confidence(tmp_path, capsys):
    cfg = write(tmp_path, "n: 2\nn_panels: 20\nn_b: 2\n", "est.yaml")
    code = cli.main(["validate-estimators", "--config", str(cfg)])
    assert code in (0, 2)
    assert "low confidence" in capsys.readouterr().out


def test_validate_estimators_unknown_key(tmp_path, capsys):
    cfg = write(tmp_path, "n: 100\nbatches: 3\n", "est.yaml")
    assert cli.main(["validate-estimators", "--config", str(cfg)]) == 1
    assert "batches (line 2)" in capsys.readouterr().err


def synthetic_rep(out, rep, g, v):
    rows = [TraceRow(k, [0.1 * k], {0: 10, k: 5}, 1, [0.6, 0.95], 10, 100 - 10 * k, [0.1 * k], 0.0, vt)
            for k, vt in enumerate(v, 1)]
    trace = RunTrace({"T": 200, "levels": [0.6, 0.95], "initial_design": [[0.0]], "seed": rep}, rows)
    write_rep(out, MetricReport(rep, rep, "qml", g_curve=list(g)), trace)


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0].split(","), [l.split(",") for l in lines[1:]]


def test_export_elementwise_mean(tmp_path):
    synthetic_rep(tmp_path, 0, [0.0, 0.5, 1.0], [3.0, 2.0, 1.0])
    synthetic_rep(tmp_path, 1, [0.2, 0.7, 0.8], [5.0, 4.0, 2.0])
    assert cli.main(["export-plotdata", str(tmp_path)]) == 0
    head, rows = read_csv(tmp_path / "plotdata" / "g_curve.csv")
    assert head == ["k", "mean_g", "n_reps"]
    assert np.allclose([float(r[1]) for r in rows], [0.1, 0.6, 0.9])
    assert [r[0] for r in rows] == ["1", "2", "3"]
    _, rows = read_csv(tmp_path / "plotdata" / "best_so_far.csv")
    assert np.allclose([float(r[1]) for r in rows], [4.0, 3.0, 1.5])
    _, rows = read_csv(tmp_path / "plotdata" / "allocations.csv")
    assert len(rows) == 2 * 3 * 2


def test_export_single_rep_equals_curve(tmp_path):
    synthetic_rep(tmp_path, 0, [0.25, 0.5], [2.0, 1.0])
    out = tmp_path / "pd"
    assert cli.main(["export-plotdata", str(tmp_path), "--out", str(out)]) == 0
    _, rows = read_csv(out / "g_curve.csv")
    assert [float(r[1]) for r in rows] == [0.25, 0.5]


def test_export_deterministic(tmp_path):
    synthetic_rep(tmp_path, 0, [0.1, 0.2], [2.0, 1.0])
    synthetic_rep(tmp_path, 1, [0.3], [4.0])
    cli.main(["export-plotdata", str(tmp_path), "--out", str(tmp_path / "a")])
    cli.main(["export-plotdata", str(tmp_path), "--out", str(tmp_path / "b")])
    for f in ("g_curve.csv", "best_so_far.csv", "allocations.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    _, rows = read_csv(tmp_path / "a" / "g_curve.csv")
    assert [r[2] for r in rows] == ["2", "1"]


def test_export_empty_dir(tmp_path, capsys):
    assert cli.main(["export-plotdata", str(tmp_path)]) == 1
    assert "no traces" in capsys.readouterr().err


def test_missing_config(capsys):
    assert cli.main(["optimize"]) == 1
