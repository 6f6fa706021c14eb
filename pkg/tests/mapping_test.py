"""Tests for soft mapping transforms and validation."""

import json
import os

import pytest

from maseya.measure.errors import MissingCoverage, PreconditionError
from maseya.measure.instrument import ResponseKind, SurveyItem, Usage
from maseya.measure.mapping import (
    MappingMatrix,
    MappingRow,
    cross_loading_concentration,
    load_mapping,
    merge_subdimensions,
    parse_mapping,
    reweight_by_coverage,
    save_mapping,
    sparsify_threshold,
    sparsify_top_m,
    tighten_primary_secondary,
    to_hard_mapping,
    validate_mapping,
)
from maseya.measure.taxonomy import Subdimension, parse_taxonomy, split_subdimension


def _read_internal_json(json_path: str):
    """Read a JSON file in relative "data" directory."""
    fdir = os.path.dirname(os.path.abspath(__file__))
    json_fpath = os.path.join(fdir, "data", f"{json_path}.json")
    with open(json_fpath, encoding="utf-8") as stream:
        return json.load(stream)


def _pension():
    """The pension taxonomy and its bound mapping."""
    taxonomy = parse_taxonomy(_read_internal_json("pension_taxonomy"))
    mapping = parse_mapping(_read_internal_json("pension_mapping")).bind(taxonomy)
    return taxonomy, mapping


def _matrix(rows, cap=None):
    return MappingMatrix(1, 1, tuple(MappingRow.of(item_id, weights) for item_id, weights in rows), cap)


def test_pension_mapping_is_valid():
    taxonomy, mapping = _pension()
    assert validate_mapping(mapping, taxonomy).ok
    assert mapping.row("Q14").as_dict() == {"perceived_generosity": 0.75, "financial_literacy": 0.25}
    assert mapping.row("Q14").subdim_ids == ["perceived_generosity", "financial_literacy"]


def test_threshold_drops_small_weights():
    """Weights below tau are dropped; a weight equal to tau survives."""
    taxonomy, mapping = _pension()
    sparse = sparsify_threshold(mapping, 0.10)

    assert sparse.row("Q33").as_dict() == {"perceived_stability": 1.0}
    assert sparse.row("Q4").as_dict() == {"service_tenure_lockin": 0.9, "employment_context": 0.1}
    assert sparse.row("Q18") == mapping.row("Q18")
    assert sparse.version == mapping.version + 1
    assert validate_mapping(sparse, taxonomy).ok


def test_threshold_on_refined_row():
    """Thresholding the refined stability row leaves the new subdimension alone."""
    mapping = _matrix([("Q33", {"financial_literacy": 0.05, "plan_stability": 0.95})])
    assert sparsify_threshold(mapping, 0.10).row("Q33").as_dict() == {"plan_stability": 1.0}


def test_threshold_keeps_largest_when_all_drop():
    mapping = _matrix([("Q1", {"a": 0.3, "b": 0.3, "c": 0.4})])
    assert sparsify_threshold(mapping, 0.5).row("Q1").as_dict() == {"c": 1.0}


def test_threshold_range():
    _, mapping = _pension()
    with pytest.raises(PreconditionError):
        sparsify_threshold(mapping, 1.0)


def test_top_m_renormalizes():
    taxonomy, mapping = _pension()
    sparse = sparsify_top_m(mapping, 1)
    assert sparse.row("Q14").as_dict() == {"perceived_generosity": 1.0}
    assert sparse.sparsity_cap == 1
    assert validate_mapping(sparse, taxonomy).ok


def test_anchored_rows_are_frozen():
    """A row whose whole mass is on anchored subdimensions passes every transform unchanged."""
    mapping = _matrix([("Q7", {"financial_literacy": 0.6, "numeracy": 0.4})])
    mapping = MappingMatrix(1, 1, mapping.rows, anchored_subdims=frozenset({"financial_literacy", "numeracy"}))
    assert sparsify_top_m(mapping, 1).row("Q7") == mapping.row("Q7")
    assert sparsify_threshold(mapping, 0.5).row("Q7") == mapping.row("Q7")
    assert tighten_primary_secondary(mapping, 0.05, 0.20).row("Q7") == mapping.row("Q7")


def test_transform_chain_stays_on_simplex():
    """Threshold, top-m, and tightening compose into valid rows."""
    taxonomy, mapping = _pension()
    chained = tighten_primary_secondary(sparsify_top_m(sparsify_threshold(mapping, 0.10), 2), 0.05, 0.20)
    assert validate_mapping(chained, taxonomy).ok
    for row in chained.rows:
        assert row.total == pytest.approx(1.0, abs=1e-9)
        assert len(row.weights) <= 2


def test_tighten_clamps_secondary():
    """The secondary share is clamped into the band; the primary takes the rest."""
    _, mapping = _pension()
    tight = tighten_primary_secondary(mapping, 0.05, 0.20)
    assert tight.row("Q18").as_dict() == pytest.approx({"perceived_generosity": 0.8, "financial_literacy": 0.2})
    assert tight.row("Q14").as_dict() == pytest.approx({"perceived_generosity": 0.8, "financial_literacy": 0.2})
    assert tight.row("Q33").as_dict() == pytest.approx(mapping.row("Q33").as_dict())

    with pytest.raises(PreconditionError):
        tighten_primary_secondary(mapping, 0.20, 0.05)


def test_cross_loading_flags_close_pairs():
    """Mechanism rows whose two largest weights are within the closeness are flagged."""
    _, mapping = _pension()
    report = cross_loading_concentration(mapping, 0.25)
    assert report.flagged_items == ["Q18"]
    assert report.share == pytest.approx(1 / 8)

    report = cross_loading_concentration(mapping, 0.50)
    assert report.flagged_items == ["Q14", "Q15", "Q16", "Q18"]


def test_coverage_scale():
    """Coverage attaches a scale to each row and leaves its weights alone."""
    _, mapping = _pension()
    coverage = {item_id: 0.5 for item_id in mapping.item_ids}
    scaled = reweight_by_coverage(mapping, coverage)
    assert scaled.row("Q14").scale == 0.5
    assert scaled.row("Q14").weights == mapping.row("Q14").weights

    del coverage["Q14"]
    with pytest.raises(MissingCoverage):
        reweight_by_coverage(mapping, coverage)


def test_hard_mapping_ties_break_by_id():
    mapping = _matrix([("Q1", {"b": 0.5, "a": 0.5}), ("Q2", {"c": 0.7, "a": 0.3})])
    hard = to_hard_mapping(mapping)
    assert hard["Q1"] == "a"
    assert hard["Q2"] == "c"
    assert hard.dimension_ids == ["a", "c"]


def test_merge_moves_mass():
    mapping = _matrix([("Q1", {"a": 0.6, "b": 0.4}), ("Q2", {"c": 1.0})])
    merged = merge_subdimensions(mapping, [("a", "b")], taxonomy_version=2)
    assert merged.row("Q1").as_dict() == {"a": 1.0}
    assert merged.row("Q2") == mapping.row("Q2")
    assert merged.taxonomy_version == 2


def test_merge_follows_chains():
    mapping = _matrix(
        [("Q1", {"a": 0.6, "b": 0.4}), ("Q2", {"b": 1.0}), ("Q3", {"c": 0.5, "d": 0.5})]
    )
    merged = merge_subdimensions(mapping, [("a", "b"), ("c", "a")], taxonomy_version=3)
    assert merged.row("Q1").as_dict() == {"c": 1.0}
    assert merged.row("Q2").as_dict() == {"c": 1.0}
    assert merged.row("Q3") == mapping.row("Q3")

    with pytest.raises(PreconditionError):
        merge_subdimensions(mapping, [("a", "b"), ("b", "a")], taxonomy_version=3)


def test_validation_findings():
    """Bad sums, excess weights, unknown and split subdimensions, and usage are reported."""
    taxonomy, _ = _pension()
    split = split_subdimension(
        taxonomy,
        "perceived_generosity",
        [
            Subdimension(subdim_id="benefit_value", anchor_id="", definition="Benefit."),
            Subdimension(subdim_id="employer_contribution", anchor_id="", definition="Employer."),
        ],
    )
    mapping = MappingMatrix(
        split.version,
        1,
        (
            MappingRow.of("Q1", {"health_risk": 0.5, "discounting": 0.4}),
            MappingRow.of("Q2", {"health_risk": 0.4, "discounting": 0.3, "retirement_horizon": 0.3}),
            MappingRow.of("Q3", {"nonexistent": 1.0}),
            MappingRow.of("Q14", {"perceived_generosity": 1.0}),
            MappingRow.of("Q40", {"demographics": 0.5, "health_risk": 0.5}),
        ),
        sparsity_cap=2,
    )
    instrument = [
        SurveyItem(item_id=i, stem_text=i, response_kind=ResponseKind.NUMERIC)
        for i in ("Q1", "Q2", "Q3", "Q14")
    ]
    instrument.append(
        SurveyItem(item_id="Q40", stem_text="Age", response_kind=ResponseKind.NUMERIC, usage=Usage.CONTROL)
    )
    report = validate_mapping(mapping, split, instrument)

    assert [f.subject for f in report.with_code("row_sum")] == ["Q1"]
    assert [f.subject for f in report.with_code("sparsity")] == ["Q2"]
    assert [f.subject for f in report.with_code("unknown_subdimension")] == ["Q3"]
    assert [f.subject for f in report.with_code("stale_reference")] == ["Q14"]
    assert [f.subject for f in report.with_code("usage")] == ["Q40"]
    assert not report.with_code("version_mismatch")


def test_version_mismatch():
    taxonomy, mapping = _pension()
    stale = MappingMatrix(taxonomy.version + 1, 1, mapping.rows)
    assert validate_mapping(stale, taxonomy).codes() == ["version_mismatch"]


def test_save_and_load(tmp_path):
    _, mapping = _pension()
    path = str(tmp_path / "mapping.json")
    save_mapping(mapping, path)
    loaded = load_mapping(path)
    assert loaded.rows == mapping.rows
    assert loaded.sparsity_cap == 2
