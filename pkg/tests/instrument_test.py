"""Tests for reading instruments, responses, and outcome specs."""

import json

import pytest

from maseya.measure.errors import DuplicateId, PreconditionError, SchemaError, UnknownItem
from maseya.measure.harmonize import HarmonizationRule, RuleKind, RuleParams, apply_rules
from maseya.measure.instrument import (
    MISSING,
    OutcomeKind,
    OutcomeSpec,
    ResponseKind,
    SurveyItem,
    Usage,
    default_covariates,
    extract_outcome,
    load_instrument,
    load_responses,
    parse_instrument,
    write_responses,
)

RECORDS = [
    {"item_id": "Q1", "stem_text": "Years of service?", "response_kind": "numeric"},
    {
        "item_id": "Q2",
        "stem_text": "How confident are you?",
        "response_kind": "ordinal",
        "option_labels": ["Not at all", "Somewhat", "Very"],
    },
    {"item_id": "Q3", "stem_text": "Age?", "response_kind": "numeric", "usage": "control"},
    {
        "item_id": "ACCEPT",
        "stem_text": "Did you accept the offer?",
        "response_kind": "binary",
        "usage": "outcome",
    },
    {"item_id": "RATE", "stem_text": "Contribution rate?", "response_kind": "numeric", "usage": "outcome"},
]

CSV = """respondent_id,Q1,Q2,Q3,ACCEPT,RATE
R1,3,Somewhat,40,Yes,0.05
R2,,Very,NA,No,0.02
R3,7,Prefer not to say,55,yes,
"""


def _write_survey(tmp_path):
    """Write the small instrument and responses used by these tests."""
    instrument_path = tmp_path / "instrument.json"
    instrument_path.write_text(json.dumps(RECORDS), encoding="utf-8")
    responses_path = tmp_path / "responses.csv"
    responses_path.write_text(CSV, encoding="utf-8")
    return str(instrument_path), str(responses_path)


def _harmonized(raw):
    """Harmonize the small survey with plain numeric and binary rules."""
    plain = RuleParams(winsorize=None, standardize=False)
    rules = [
        HarmonizationRule(item_id="Q1", kind=RuleKind.IDENTITY_NUMERIC),
        HarmonizationRule(item_id="Q2", kind=RuleKind.IDENTITY_ORDINAL),
        HarmonizationRule(item_id="Q3", kind=RuleKind.IDENTITY_NUMERIC),
        HarmonizationRule(item_id="ACCEPT", kind=RuleKind.BINARY_01, params=plain),
        HarmonizationRule(item_id="RATE", kind=RuleKind.IDENTITY_NUMERIC, params=plain),
    ]
    return apply_rules(raw, rules)


def test_missing_tokens(tmp_path):
    """Blank cells and listed tokens both read as MISSING."""
    instrument_path, responses_path = _write_survey(tmp_path)
    instrument = load_instrument(instrument_path)
    raw = load_responses(responses_path, instrument)

    assert raw.respondent_ids == ("R1", "R2", "R3")
    assert raw.column("Q1") == ["3", MISSING, "7"]
    assert raw.column("Q2") == ["Somewhat", "Very", MISSING]
    assert raw.column("Q3") == ["40", MISSING, "55"]
    assert raw.column("RATE")[2] is MISSING


def test_write_then_load_keeps_missing(tmp_path):
    """Writing responses and reading them back keeps every MISSING cell in place."""
    instrument_path, responses_path = _write_survey(tmp_path)
    instrument = load_instrument(instrument_path)
    raw = load_responses(responses_path, instrument)

    copy_path = str(tmp_path / "copy.csv")
    write_responses(raw, copy_path)
    assert load_responses(copy_path, instrument).equals(raw)


def test_unknown_column(tmp_path):
    """A response column outside the instrument is rejected."""
    instrument_path, responses_path = _write_survey(tmp_path)
    instrument = [item for item in load_instrument(instrument_path) if item.item_id != "Q3"]
    with pytest.raises(UnknownItem):
        load_responses(responses_path, instrument)


def test_duplicate_respondent(tmp_path):
    instrument_path, _ = _write_survey(tmp_path)
    responses_path = tmp_path / "dupes.csv"
    responses_path.write_text("respondent_id,Q1\nR1,1\nR1,2\n", encoding="utf-8")
    with pytest.raises(DuplicateId):
        load_responses(str(responses_path), load_instrument(instrument_path))


def test_first_column_must_be_respondent(tmp_path):
    instrument_path, _ = _write_survey(tmp_path)
    responses_path = tmp_path / "bad.csv"
    responses_path.write_text("Q1,respondent_id\n1,R1\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        load_responses(str(responses_path), load_instrument(instrument_path))


def test_instrument_schema():
    """Duplicate ids and ordinal items without options are schema problems."""
    with pytest.raises(DuplicateId):
        parse_instrument([RECORDS[0], RECORDS[0]])
    with pytest.raises(SchemaError):
        parse_instrument([{"item_id": "Q9", "stem_text": "Rate it.", "response_kind": "ordinal"}])
    with pytest.raises(SchemaError):
        parse_instrument([])


def test_default_covariates_are_control_items():
    items = parse_instrument(RECORDS)
    assert default_covariates(items) == ("Q3",)


def test_extract_outcome_masks_missing(tmp_path):
    """The evaluation mask drops rows whose outcome is MISSING."""
    instrument_path, responses_path = _write_survey(tmp_path)
    h = _harmonized(load_responses(responses_path, load_instrument(instrument_path)))

    y, mask = extract_outcome(h, OutcomeSpec(outcome_id="RATE", kind=OutcomeKind.CONTINUOUS))
    assert mask.tolist() == [True, True, False]
    assert y[:2].tolist() == [0.05, 0.02]

    y, mask = extract_outcome(h, OutcomeSpec(outcome_id="ACCEPT", kind=OutcomeKind.BINARY))
    assert y.tolist() == [1.0, 0.0, 1.0]
    assert mask.all()


def test_accepters_only_filter(tmp_path):
    """The accepters-only filter keeps rows whose filter item is 1."""
    instrument_path, responses_path = _write_survey(tmp_path)
    h = _harmonized(load_responses(responses_path, load_instrument(instrument_path)))
    spec = OutcomeSpec(
        outcome_id="RATE",
        kind=OutcomeKind.CONTINUOUS,
        subsample_filter="accepters_only",
        filter_item_id="ACCEPT",
    )
    _, mask = extract_outcome(h, spec)
    assert mask.tolist() == [True, False, False]


def test_undefined_filter():
    with pytest.raises(ValueError):
        OutcomeSpec(outcome_id="RATE", kind=OutcomeKind.CONTINUOUS, subsample_filter="everyone")


def test_binary_outcome_must_be_zero_one(tmp_path):
    """A binary outcome spec on a non-binary column fails its precondition."""
    instrument_path, responses_path = _write_survey(tmp_path)
    h = _harmonized(load_responses(responses_path, load_instrument(instrument_path)))
    with pytest.raises(PreconditionError):
        extract_outcome(h, OutcomeSpec(outcome_id="Q1", kind=OutcomeKind.BINARY))


def test_survey_item_defaults():
    item = SurveyItem(item_id="Q1", stem_text="Stem", response_kind=ResponseKind.NUMERIC)
    assert item.usage == Usage.MECHANISM
    assert item.option_labels == ()
