"""Tests for taxonomy validation and versioned edits."""

import json
import os

import pytest

from maseya.measure.errors import AnchorViolation, CrossAnchorMerge, DuplicateChildId, NotALeaf
from maseya.measure.taxonomy import (
    Subdimension,
    add_subdimension,
    consolidate,
    load_taxonomy,
    parse_taxonomy,
    replay_edits,
    save_taxonomy,
    split_subdimension,
    validate_taxonomy,
)


def _read_internal_json(json_path: str):
    """Read a JSON file in relative "data" directory."""
    fdir = os.path.dirname(os.path.abspath(__file__))
    json_fpath = os.path.join(fdir, "data", f"{json_path}.json")
    with open(json_fpath, encoding="utf-8") as stream:
        return json.load(stream)


def _pension():
    return parse_taxonomy(_read_internal_json("pension_taxonomy"))


def _children(*ids):
    """Child subdimensions with placeholder anchors; the split sets the real one."""
    return [Subdimension(subdim_id=k, anchor_id="", definition=f"{k} part.") for k in ids]


def test_pension_taxonomy_is_valid():
    t = _pension()
    assert validate_taxonomy(t).ok
    assert t.k == 10
    assert t.anchored_ids == ["financial_literacy"]
    assert t.control_leaf_ids() == ["demographics", "employment_context"]


def test_validation_findings():
    """Undefined anchors, empty definitions, and orphans are reported, not raised."""
    data = _read_internal_json("pension_taxonomy")
    data["anchors"]["db_beliefs"]["subdimensions"].append({"subdim_id": "plan_trust", "definition": " "})
    data["anchors"]["db_beliefs"]["subdimensions"].append(
        {"subdim_id": "lost_child", "definition": "Orphan.", "parent_id": "nowhere"}
    )
    data["anchors"]["controls"]["subdimensions"].append({"subdim_id": "health_risk", "definition": "Again."})
    report = validate_taxonomy(parse_taxonomy(data))
    assert set(report.codes()) == {"empty_definition", "orphan_parent", "duplicate_id"}


def test_split_nests_children():
    """A split keeps the parent as an internal node and prefixes child definitions."""
    t = _pension()
    split = split_subdimension(t, "perceived_generosity", _children("benefit_value", "employer_contribution"))

    assert split.version == 2
    assert not split.is_leaf("perceived_generosity")
    assert split.k == 11
    child = split.get("benefit_value")
    assert child.anchor_id == "db_beliefs"
    assert child.parent_id == "perceived_generosity"
    assert child.definition == "How generous the plan seems. benefit_value part."
    assert validate_taxonomy(split).ok
    assert split.edit_log[-1].op == "split"


def test_split_rejections():
    t = _pension()
    with pytest.raises(NotALeaf):
        split_subdimension(t, "financial_literacy", _children("a", "b"))
    with pytest.raises(DuplicateChildId):
        split_subdimension(t, "perceived_generosity", _children("health_risk", "b"))
    with pytest.raises(DuplicateChildId):
        split_subdimension(t, "perceived_generosity", _children("a", "a"))

    split = split_subdimension(t, "perceived_generosity", _children("a", "b"))
    with pytest.raises(NotALeaf):
        split_subdimension(split, "perceived_generosity", _children("c", "d"))


def test_consolidate_within_anchor():
    """Merging keeps the first id and unions representative items."""
    data = _read_internal_json("pension_taxonomy")
    generosity, stability = data["anchors"]["db_beliefs"]["subdimensions"]
    generosity["representative_item_ids"] = ["Q14"]
    stability["representative_item_ids"] = ["Q33"]
    t = parse_taxonomy(data)

    merged = consolidate(t, [("perceived_generosity", "perceived_stability")])
    assert not merged.has("perceived_stability")
    assert merged.get("perceived_generosity").representative_item_ids == ("Q14", "Q33")
    assert merged.version == t.version + 1


def test_consolidate_rejections():
    t = _pension()
    with pytest.raises(CrossAnchorMerge):
        consolidate(t, [("health_risk", "discounting")])
    with pytest.raises(AnchorViolation):
        consolidate(t, [("discounting", "financial_literacy")])


def test_replay_rebuilds_snapshot(tmp_path):
    """Replaying the edit log on the base snapshot gives the same taxonomy."""
    base = _pension()
    t = split_subdimension(base, "perceived_generosity", _children("benefit_value", "employer_contribution"))
    t = add_subdimension(
        t, Subdimension(subdim_id="plan_stability", anchor_id="db_beliefs", definition="Plan will last.")
    )
    replayed = replay_edits(base, t.edit_log)
    assert replayed.version == t.version == 3
    assert replayed.subdimensions == t.subdimensions

    path = str(tmp_path / "taxonomy.json")
    save_taxonomy(t, path)
    loaded = load_taxonomy(path)
    assert loaded.leaf_ids == t.leaf_ids
    assert loaded.edit_log == t.edit_log
