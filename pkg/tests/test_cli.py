import io
import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from pathfair import cli, scm
from pathfair.cohort import write_csv

FIX = Path(__file__).parent / "fixtures"


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.run(list(argv), stdout=out, stderr=err)
    doc = json.loads(out.getvalue() or err.getvalue())
    return code, doc


def test_estimate_default_fixture():
    code, doc = run("estimate", "--effect", "vde", "--mode", "sndr", "--learner", "frequency", "--n", "8000")
    assert code == 0
    est = doc["result"]["estimates"][0]
    assert est["effect"] == "vde" and est["mode"] == "sn_dr"
    assert est["ci"]["low"] < est["estimate"] < est["ci"]["high"]
    cfg = doc["config"]
    assert cfg["spec"]["kind"] == "binary-threshold"
    assert (cfg["folds"], cfg["clip"], cfg["bootstrap"], cfg["level"]) == (5, 1e-4, 500, 0.95)


def test_rerun_from_output_is_bit_identical(tmp_path):
    out = tmp_path / "first.json"
    code, first = run("estimate", "--effect", "te", "--effect", "nie-star", "--n", "3000", "--seed", "7",
                      "--out", str(out))
    assert code == 0
    code, second = run("estimate", "--config", str(out))
    assert code == 0
    assert json.dumps(first["result"], sort_keys=True) == json.dumps(second["result"], sort_keys=True)
    assert first["config"] == second["config"]


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"folds": 3, "n": 2000, "scm": "binary"}))
    code, doc = run("estimate", "--config", str(cfg), "--folds", "4")
    assert code == 0 and doc["config"]["folds"] == 4 and doc["config"]["n"] == 2000


def test_shipped_config_fixture():
    path = Path(cli.FIXTURES) / "estimate_binary.json"
    code, doc = run("estimate", "--config", str(path), "--n", "4000")
    assert code == 0
    res = {e["effect"]: e["estimate"] for e in doc["result"]["estimates"]}
    assert abs(res["te"] - res["nde"] - res["nie"]) <= 1e-12


def test_oracle_command():
    code, doc = run("oracle", "--query", "vde", "--n-mc", "200000")
    r = doc["result"]
    assert code == 0 and set(r) >= {"query", "value", "std_error", "n_mc", "seed"}
    assert abs(r["value"] - (-0.12326342153922165)) < 4 * r["std_error"]
    code, doc = run("oracle", "--query", "vde", "--method", "exact")
    assert doc["result"]["value"] == pytest.approx(-0.12326342153922165, abs=1e-12)
    code, doc = run("oracle", "--scm", "reference", "--query", "vde", "--method", "formula")
    assert doc["result"]["value"] == pytest.approx(-0.4482, abs=1e-12)


def test_unknown_flag_named():
    code, doc = run("estimate", "--bogus", "3")
    assert code == 2 and doc["error"] == "usage" and doc["flags"] == ["--bogus"]


def test_bad_choice_is_usage_error():
    code, doc = run("estimate", "--mode", "magic")
    assert code == 2 and "magic" in doc["message"]


def test_every_violation_enumerated(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"folds": 1, "clip": 0.9, "level": 2, "effects": ["vde", "xyz"], "jobs": 0}))
    code, doc = run("estimate", "--config", str(cfg))
    assert code == 2 and doc["error"] == "config"
    fields = {v.split(":")[0] for v in doc["violations"]}
    assert fields == {"folds", "clip", "level", "effects", "jobs"}


def test_unknown_config_field(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"foldz": 3}))
    code, doc = run("estimate", "--config", str(cfg))
    assert code == 2 and doc["violations"] == ["foldz: unknown field"]


def test_two_data_sources_rejected(tmp_path):
    code, doc = run("estimate", "--scm", "binary", "--data", str(FIX / "cohort_small.csv"))
    assert code == 2
    assert any(v.startswith("data source") for v in doc["violations"])


def test_missing_subcommand():
    code, doc = run()
    assert code == 2 and "subcommand" in doc["message"]


def test_runtime_failure_exit_one(tmp_path):
    cfg = tmp_path / "c.json"
    schema = json.loads((FIX / "cohort_small_schema.json").read_text())
    cfg.write_text(json.dumps({"data": str(FIX / "cohort_small.csv"), "schema": schema}))
    # three rows cannot be split into five folds
    code, doc = run("estimate", "--config", str(cfg))
    assert code == 1 and doc["error"] == "EstimationError"


def _labelled_csv(tmp_path, n=3000):
    c = scm.sample(scm.binary_scm(), n, seed=3)
    path = tmp_path / "cohort.csv"
    write_csv(c, path)
    df = pd.read_csv(path, dtype=str)
    df["x"] = np.where(df["x"] == "1", "B", "A")
    df.to_csv(path, index=False)
    schema = {"x": "x", "x0_label": "A", "x1_label": "B", "y": "y", "z": ["z0"], "w": ["w0"], "v": ["v0"]}
    return path, schema, c


def test_estimate_from_csv_matches_in_memory(tmp_path):
    from pathfair.estimators import estimate_effect
    path, schema, c = _labelled_csv(tmp_path)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(path), "schema": schema, "learner": "frequency"}))
    code, doc = run("estimate", "--config", str(cfg))
    assert code == 0
    assert doc["result"]["estimates"][0]["estimate"] == estimate_effect(c, "vde", learners="frequency").estimate


def test_label_override_reverses_contrast(tmp_path):
    path, schema, _ = _labelled_csv(tmp_path)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(path), "schema": schema, "learner": "frequency", "effects": ["te"]}))
    _, a = run("estimate", "--config", str(cfg))
    _, b = run("estimate", "--config", str(cfg), "--x0-label", "B", "--x1-label", "A")
    assert a["result"]["estimates"][0]["estimate"] == pytest.approx(-b["result"]["estimates"][0]["estimate"],
                                                                    abs=1e-12)


def test_conditional_csv(tmp_path):
    out = tmp_path / "cells.csv"
    code, doc = run("conditional", "--scm", "linear", "--n", "3000", "--axis1", "v0", "--axis2", "z0",
                    "--edges1=-6,0,6", "--edges2=-6,0,6", "--csv", str(out))
    assert code == 0
    table = pd.read_csv(out)
    assert len(table) == 4 and {"mean", "count", "missing"} <= set(table.columns)
    assert table["count"].sum() == 3000 - doc["result"]["out_of_range"]


def test_conditional_requires_axes():
    code, doc = run("conditional", "--scm", "binary")
    assert code == 2
    assert {v.split(":")[0] for v in doc["violations"]} >= {"axis1", "axis2", "edges1", "edges2"}


def test_study_csv(tmp_path):
    out = tmp_path / "study.csv"
    code, doc = run("study", "--scm", "binary", "--learner", "frequency", "--sizes", "500,1000",
                    "--replications", "2", "--n-mc", "1000", "--csv", str(out))
    assert code == 0
    table = pd.read_csv(out)
    assert set(table["n"]) == {500, 1000} and set(table["mode"]) == {"dr", "sn_dr"}


def test_bootstrap_and_diagnose():
    code, doc = run("bootstrap", "--n", "1500", "--bootstrap", "4", "--learner", "frequency")
    assert code == 0 and doc["result"]["estimates"][0]["ci"]["method"] == "bootstrap-percentile"
    code, doc = run("diagnose", "--n", "1500", "--mode", "sndr", "--learner", "frequency")
    assert code == 0
    assert all(abs(v) < 1e-12 for v in doc["result"]["median_abs_deviation_post"].values())


def test_simulate_writes_cohort(tmp_path):
    out = tmp_path / "sim.csv"
    code, doc = run("simulate", "--scm", "reference", "--n", "50", "--csv", str(out))
    assert code == 0 and doc["result"]["n"] == 50
    assert len(pd.read_csv(out)) == 50


def test_ingest_events(tmp_path):
    out = tmp_path / "wide.csv"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"events": str(FIX / "events_small.csv"), "value_ranges": {"sao2": [70, 100]}}))
    code, doc = run("ingest", "--config", str(cfg), "--csv", str(out))
    assert code == 0 and doc["result"]["stays"] == 3
    wide = pd.read_csv(out).set_index("stay_id")
    assert wide.loc[2, "delta"] == 6.0


def test_ingest_cohort_with_filters(tmp_path):
    out = tmp_path / "typed.csv"
    schema = json.loads((FIX / "cohort_small_schema.json").read_text())
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(FIX / "cohort_small.csv"), "schema": schema,
                               "filters": {"min_stay_hours": 24}}))
    code, doc = run("ingest", "--config", str(cfg), "--csv", str(out))
    assert code == 0
    assert doc["result"]["excluded"] == {"stay_hours>=24": 1}
    assert doc["result"]["kept"] == 3 and doc["result"]["dropped"] == 2
    assert len(pd.read_csv(out)) == 3


def test_main_entry_point(capsys):
    assert cli.main(["oracle", "--query", "te", "--n-mc", "100"]) == 0
    assert json.loads(capsys.readouterr().out)["command"] == "oracle"
