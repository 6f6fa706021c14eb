"""End to end tests of the command line on the planted synthetic survey."""

import json
import os

import pandas as pd
import pytest

from maseya.measure.ecv import DeltaReport
from maseya.measure.pipeline import EXIT_ERROR, EXIT_OK, main

SMALL_FOLDS = ["--outer-folds", "2", "--inner-folds", "2", "--repeats", "1"]


def _inputs(paths, *names):
    """Input flags for the written survey files."""
    args = []
    for name in ("instrument", "responses", "rules", "outcomes") + names:
        args += [f"--{name.replace('_', '-')}", paths[name]]
    return args


def test_synth_writes_every_artifact(tmp_path):
    out = str(tmp_path / "synth")
    assert main(["synth", "--seed", "3", "--n", "300", "--out", out, "-q"]) == EXIT_OK
    for name in ("instrument.json", "responses.csv", "rules.json", "taxonomy.json", "mapping.json", "manifest.json"):
        assert os.path.exists(os.path.join(out, name))
    frame = pd.read_csv(os.path.join(out, "responses.csv"))
    assert len(frame) == 300


def test_harmonize_and_score(planted_dir, tmp_path):
    out = str(tmp_path / "score")
    assert main(["harmonize", "--seed", "1", "--out", out] + _inputs(planted_dir)) == EXIT_OK
    harmonized = pd.read_csv(os.path.join(out, "harmonized.csv"))
    assert harmonized.columns[0] == "respondent_id"

    args = ["score", "--seed", "1", "--out", out] + _inputs(planted_dir, "taxonomy", "mapping")
    assert main(args) == EXIT_OK
    scores = pd.read_csv(os.path.join(out, "scores.csv"))
    assert "service_tenure" in scores.columns
    with open(os.path.join(out, "score_coverage.json"), encoding="utf-8") as stream:
        assert json.load(stream)["service_tenure"]["item_count"] == 3


def test_validate_writes_triage(planted_dir, tmp_path):
    out = str(tmp_path / "validate")
    args = ["validate", "--seed", "1", "--out", out] + SMALL_FOLDS
    args += _inputs(planted_dir, "taxonomy", "mapping", "hard_mapping")
    assert main(args) == EXIT_OK

    with open(os.path.join(out, "deltas.json"), encoding="utf-8") as stream:
        reports = [DeltaReport.from_json(r) for r in json.load(stream)["reports"]]
    assert {r.stage for r in reports} == {"outer"}
    assert all(r.folds == 2 for r in reports)

    triage = pd.read_csv(os.path.join(out, "triage.csv"))
    assert triage.columns.tolist() == ["Family", "Subdimension", "Items", "ΔAUC", "ΔR²", "labels", "notes"]
    assert set(triage["Subdimension"]) == {
        "service_tenure",
        "health_risk",
        "financial_literacy",
        "generosity",
        "plan_value",
    }
    assert os.path.exists(os.path.join(out, "hard_vs_soft.csv"))
    assert os.path.exists(os.path.join(out, "manifest.json"))


def test_unknown_subdimension_is_an_error(planted_dir, tmp_path, capsys):
    with open(planted_dir["mapping"], encoding="utf-8") as stream:
        data = json.load(stream)
    data["rows"][0]["weights"] = [{"subdim_id": "nonexistent", "weight": 1.0}]
    bad = tmp_path / "bad_mapping.json"
    bad.write_text(json.dumps(data))

    paths = dict(planted_dir, mapping=str(bad))
    args = ["validate", "--seed", "1", "--out", str(tmp_path / "bad")] + _inputs(paths, "taxonomy", "mapping")
    assert main(args) == EXIT_ERROR
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "UnknownSubdimension"


def test_missing_seed_is_an_error(tmp_path):
    assert main(["validate", "--out", str(tmp_path)]) == EXIT_ERROR


def test_grid_has_one_row_per_cell(planted_dir, tmp_path):
    out = str(tmp_path / "grid")
    args = ["grid", "--seed", "1", "--out", out] + SMALL_FOLDS + _inputs(planted_dir, "taxonomy", "mapping")
    assert main(args) == EXIT_OK
    grid = pd.read_csv(os.path.join(out, "grid.csv"))
    assert len(grid) == 9
    assert {"flagged_0.80", "flagged_0.85", "flagged_0.90", "top_pair", "cross_loading_share"} <= set(grid.columns)
    assert grid["valid"].all()


def test_report_sorts_saved_deltas(tmp_path):
    reports = [
        DeltaReport("b", ("b",), "accept", "auc", "outer", (0.01, 0.02), (0.01, 0.02), 100, 2),
        DeltaReport("a", ("a",), "accept", "auc", "outer", (0.10, 0.12), (0.10, 0.12), 100, 3),
    ]
    deltas = tmp_path / "deltas.json"
    deltas.write_text(json.dumps({"reports": [r.to_json() for r in reports]}))
    decisions = tmp_path / "decisions.json"
    decisions.write_text(json.dumps({"decisions": [{"subdim_id": "b", "decision": "defer", "reason": "low_n"}]}))

    out = str(tmp_path / "report")
    assert main(["report", "--deltas", str(deltas), "--decisions", str(decisions), "--out", out]) == EXIT_OK
    triage = pd.read_csv(os.path.join(out, "triage.csv"), keep_default_na=False)
    assert triage["Subdimension"].tolist() == ["a", "b"]
    assert triage["notes"].tolist() == ["", "defer (low_n)"]


@pytest.mark.slow
def test_refine_with_recorded_proposals(planted_dir, tmp_path):
    out = str(tmp_path / "refine")
    args = ["refine", "--seed", "1", "--out", out, "--outer-index", "0", "--max-rounds", "1"]
    args += SMALL_FOLDS + ["--proposals", planted_dir["proposals"]]
    args += _inputs(planted_dir, "taxonomy", "mapping")
    assert main(args) == EXIT_OK

    with open(os.path.join(out, "refine_summary.json"), encoding="utf-8") as stream:
        summary = json.load(stream)
    (fold,) = summary["folds"]
    assert fold["outer_index"] == 0
    assert fold["rounds"] <= 2
    assert summary["primary_metrics"] == ["auc", "r2"]
    for name in ("iterations-0.jsonl", "taxonomy-0.json", "mapping-0.json", "decisions.json", "triage.csv"):
        assert os.path.exists(os.path.join(out, name))
