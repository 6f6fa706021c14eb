"""Tests for the triage table and table writers."""

import json
import math
import os

import pandas as pd
import pytest

from maseya.measure.ecv import DeltaReport, Thresholds
from maseya.measure.report import delta_records, read_delta_reports, read_decisions, triage_rows, write_table
from maseya.measure.taxonomy import parse_taxonomy


def _read_internal_json(json_path: str):
    """Read a JSON file in relative "data" directory."""
    fdir = os.path.dirname(os.path.abspath(__file__))
    json_fpath = os.path.join(fdir, "data", f"{json_path}.json")
    with open(json_fpath, encoding="utf-8") as stream:
        return json.load(stream)


def _report(candidate, metric, deltas, outcome_id="accept", items=2, members=None):
    members = members or (candidate,)
    return DeltaReport(candidate, tuple(members), outcome_id, metric, "outer", tuple(deltas), tuple(deltas), 100, items)


def test_rows_sort_by_auc_gain():
    """Largest AUC gain first, ties by id, candidates without AUC last."""
    reports = [
        _report("retirement_horizon", "auc", [0.02, 0.03]),
        _report("discounting", "r2", [0.01], outcome_id="rate"),
        _report("service_tenure_lockin", "auc", [0.1, 0.12]),
        _report("health_risk", "auc", [0.02, 0.03]),
    ]
    rows = triage_rows(reports)
    assert [row.subdimension for row in rows] == [
        "service_tenure_lockin",
        "health_risk",
        "retirement_horizon",
        "discounting",
    ]
    assert math.isnan(rows[-1].delta_auc)
    assert rows[-1].delta_r2 == 0.01


def test_gain_columns_average_outcomes_sharing_a_metric():
    reports = [
        _report("health_risk", "auc", [0.1, 0.1], outcome_id="accept"),
        _report("health_risk", "auc", [0.02, 0.04], outcome_id="enroll"),
        _report("health_risk", "r2", [0.01], outcome_id="rate"),
    ]
    for ordered in (reports, reports[::-1]):
        (row,) = triage_rows(ordered)
        assert row.delta_auc == pytest.approx(0.065)
        assert row.delta_r2 == pytest.approx(0.01)
        assert row.labels.startswith("accept:auc=")
        assert "enroll:auc=" in row.labels


def test_labels_and_family():
    taxonomy = parse_taxonomy(_read_internal_json("pension_taxonomy"))
    reports = [
        _report("service_tenure_lockin", "auc", [0.1] * 10, items=2),
        _report("service_tenure_lockin", "r2", [0.01] * 6 + [-0.001] * 4, outcome_id="rate", items=2),
        _report("a+b", "auc", [-0.01], members=("a", "b")),
    ]
    rows = {row.subdimension: row for row in triage_rows(reports, taxonomy, {"a+b": "refine (overlap)"})}

    tenure = rows["service_tenure_lockin"]
    assert tenure.family == "econ_constraints"
    assert tenure.labels == "accept:auc=signal; rate:r2=weak_signal"
    assert tenure.items == 2
    assert rows["a+b"].family == ""
    assert rows["a+b"].labels == "accept:auc=noise_like"
    assert rows["a+b"].notes == "refine (overlap)"


def test_table_pair_holds_same_records(tmp_path):
    stem = str(tmp_path / "table")
    records = [{"Subdimension": "a", "ΔAUC": 0.1}, {"Subdimension": "b", "ΔAUC": None}]
    write_table(records, stem)

    frame = pd.read_csv(f"{stem}.csv")
    assert frame["Subdimension"].tolist() == ["a", "b"]
    with open(f"{stem}.json", encoding="utf-8") as stream:
        data = json.load(stream)
    assert data == [{"Subdimension": "a", "ΔAUC": 0.1}, {"Subdimension": "b", "ΔAUC": None}]


def test_read_saved_outputs(tmp_path):
    reports = [_report("a", "auc", [0.1, 0.2])]
    path = tmp_path / "deltas.json"
    path.write_text(json.dumps([r.to_json() for r in reports]))
    assert read_delta_reports(str(path)) == reports

    decisions = tmp_path / "decisions.json"
    decisions.write_text(json.dumps([{"subdim_id": "a", "decision": "retain", "reason": "stable_gain"}]))
    assert read_decisions(str(decisions)) == {"a": "retain (stable_gain)"}


def test_delta_records_name_members_and_label():
    reports = [
        _report("a", "auc", [0.1] * 10, items=3),
        _report("a+b", "auc", [-0.01, 0.02], members=("a", "b")),
    ]
    single, joint = delta_records(reports)
    assert set(single) == {
        "candidate",
        "subdim",
        "outcome_id",
        "metric",
        "stage",
        "items",
        "n",
        "folds",
        "delta_mean",
        "delta_median",
        "delta_sd",
        "share_improve",
        "label",
        "skipped_folds",
        "mapping_version",
        "taxonomy_version",
    }
    assert (single["subdim"], single["label"], single["items"], single["n"]) == ("a", "signal", 3, 100)
    assert single["delta_mean"] == pytest.approx(0.1)
    assert joint["subdim"] == "a+b"
    assert joint["label"] == "noise_like"
    assert delta_records(reports[:1], Thresholds(signal_share=1.01, weak_share=0.5))[0]["label"] == "weak_signal"
