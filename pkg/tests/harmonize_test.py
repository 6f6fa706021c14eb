"""Tests for harmonization rules and fold-local transforms."""

import numpy as np
import pytest

from maseya.measure.errors import CodeTableGap, LeakageError, MissingRule
from maseya.measure.harmonize import (
    HarmonizationRule,
    RuleKind,
    RuleParams,
    apply_fold_transform,
    apply_rules,
    fit_fold_transform,
    winsorize,
)
from maseya.measure.instrument import MISSING, ResponseKind, ResponseMatrix, SurveyItem, Usage

PLAIN = RuleParams(winsorize=None, standardize=False)


def _matrix(items, columns):
    """Build a raw response matrix from item definitions and token columns."""
    n = len(columns[0])
    cells = np.empty((n, len(items)), dtype=object)
    for j, column in enumerate(columns):
        cells[:, j] = column
    return ResponseMatrix(
        tuple(f"R{i}" for i in range(n)), tuple(item.item_id for item in items), cells, tuple(items)
    )


def _numeric(item_id, usage=Usage.MECHANISM):
    return SurveyItem(item_id=item_id, stem_text=item_id, response_kind=ResponseKind.NUMERIC, usage=usage)


def test_categorical_codes_and_induced_missing():
    """A token coded as null becomes missing and is counted as rule-induced."""
    item = SurveyItem(
        item_id="PLAN",
        stem_text="Which plan do you prefer?",
        response_kind=ResponseKind.CATEGORICAL,
        option_labels=("DB", "DC", "Unsure"),
    )
    raw = _matrix([item], [["DB", "DC", "Unsure", MISSING]])
    rule = HarmonizationRule(
        item_id="PLAN",
        kind=RuleKind.CATEGORICAL,
        params=RuleParams(code_table={"DB": 1.0, "DC": 0.0, "Unsure": None}),
    )
    h = apply_rules(raw, [rule])

    values = h.column("PLAN")
    assert values[:2].tolist() == [1.0, 0.0]
    assert np.isnan(values[2]) and np.isnan(values[3])
    assert h.induced_missing["PLAN"] == 1


def test_code_table_must_cover_options():
    item = SurveyItem(
        item_id="PLAN",
        stem_text="Which plan?",
        response_kind=ResponseKind.CATEGORICAL,
        option_labels=("DB", "DC"),
    )
    raw = _matrix([item], [["DB", "DC"]])
    rule = HarmonizationRule(
        item_id="PLAN", kind=RuleKind.CATEGORICAL, params=RuleParams(code_table={"DB": 1.0})
    )
    with pytest.raises(CodeTableGap):
        apply_rules(raw, [rule])


def test_ordinal_codes_follow_option_order():
    item = SurveyItem(
        item_id="CONF",
        stem_text="How confident?",
        response_kind=ResponseKind.ORDINAL,
        option_labels=("Low", "Mid", "High"),
    )
    raw = _matrix([item], [["High", "Low", "Mid"]])
    h = apply_rules(raw, [HarmonizationRule(item_id="CONF", kind=RuleKind.IDENTITY_ORDINAL)])
    assert h.column("CONF").tolist() == [2.0, 0.0, 1.0]


def test_log1p_rejects_values_at_or_below_minus_one():
    raw = _matrix([_numeric("WEALTH")], [["0", "-1", "abc", str(np.e - 1)]])
    h = apply_rules(raw, [HarmonizationRule(item_id="WEALTH", kind=RuleKind.LOG1P_NUMERIC)])
    values = h.column("WEALTH")
    assert values[0] == 0.0
    assert np.isnan(values[1]) and np.isnan(values[2])
    assert values[3] == pytest.approx(1.0)
    assert h.induced_missing["WEALTH"] == 2


def test_rule_coverage():
    """Mechanism items need a rule; excluded items and unruled outcomes are left out."""
    items = [_numeric("Q1"), _numeric("Q2", Usage.EXCLUDED), _numeric("Y", Usage.OUTCOME)]
    raw = _matrix(items, [["1", "2"], ["3", "4"], ["5", "6"]])

    h = apply_rules(raw, [HarmonizationRule(item_id="Q1", kind=RuleKind.IDENTITY_NUMERIC)])
    assert h.item_ids == ("Q1",)

    with pytest.raises(MissingRule):
        apply_rules(raw, [])

    h = apply_rules(
        raw,
        [
            HarmonizationRule(item_id="Q1", kind=RuleKind.DROP),
            HarmonizationRule(item_id="Y", kind=RuleKind.IDENTITY_NUMERIC, params=PLAIN),
        ],
    )
    assert h.item_ids == ("Y",)
    assert h.outcome_items == frozenset({"Y"})


def test_transform_uses_training_rows_only():
    """Mean and sd come from the training rows; test rows reuse them."""
    raw = _matrix([_numeric("Q1")], [["1", "2", "3", "4", "100"]])
    rule = HarmonizationRule(
        item_id="Q1", kind=RuleKind.IDENTITY_NUMERIC, params=RuleParams(winsorize=None)
    )
    h = apply_rules(raw, [rule])

    transform = fit_fold_transform(h, [0, 1, 2, 3], [rule])
    stats = transform.statistics("Q1")
    assert stats["mean"] == pytest.approx(2.5)
    assert stats["sd"] == pytest.approx(np.std([1, 2, 3, 4]))

    test = apply_fold_transform(h, transform, [4])
    assert test.column("Q1")[0] == pytest.approx((100 - 2.5) / np.std([1, 2, 3, 4]))
    train = apply_fold_transform(h, transform, [0, 1, 2, 3])
    assert np.mean(train.column("Q1")) == pytest.approx(0.0)


def test_winsorize_cuts_are_lower_quantiles():
    """Cuts are nearest-rank quantiles of the training values."""
    raw = _matrix([_numeric("Q1")], [[str(v) for v in range(1, 101)]])
    rule = HarmonizationRule(item_id="Q1", kind=RuleKind.IDENTITY_NUMERIC)
    h = apply_rules(raw, [rule])
    transform = fit_fold_transform(h, range(100), [rule])
    assert transform.statistics("Q1")["lo_cut"] == 1.0
    assert transform.statistics("Q1")["hi_cut"] == 99.0


def test_held_out_rows_are_clipped_to_training_cuts():
    values = winsorize(np.array([1.0, np.nan, 9.0]), 2.0, 5.0)
    np.testing.assert_array_equal(values, [2.0, np.nan, 5.0])

    raw = _matrix([_numeric("Q1")], [[str(v) for v in range(1, 101)] + ["500", "-40"]])
    rule = HarmonizationRule(
        item_id="Q1", kind=RuleKind.IDENTITY_NUMERIC, params=RuleParams(standardize=False)
    )
    h = apply_rules(raw, [rule])
    transform = fit_fold_transform(h, range(100), [rule])
    held_out = apply_fold_transform(h, transform, [100, 101])
    np.testing.assert_array_equal(held_out.column("Q1"), [99.0, 1.0])


def test_partial_overlap_is_leakage():
    raw = _matrix([_numeric("Q1")], [["1", "2", "3", "4"]])
    rule = HarmonizationRule(item_id="Q1", kind=RuleKind.IDENTITY_NUMERIC)
    h = apply_rules(raw, [rule])
    transform = fit_fold_transform(h, [0, 1], [rule])
    with pytest.raises(LeakageError):
        apply_fold_transform(h, transform, [1, 2])


def test_constant_training_column_is_degenerate():
    """A constant training column is centered only and reported as degenerate."""
    raw = _matrix([_numeric("Q1")], [["5", "5", "5", "9"]])
    rule = HarmonizationRule(item_id="Q1", kind=RuleKind.IDENTITY_NUMERIC, params=RuleParams(winsorize=None))
    h = apply_rules(raw, [rule])
    transform = fit_fold_transform(h, [0, 1, 2], [rule])
    assert transform.degenerate_items == frozenset({"Q1"})

    test = apply_fold_transform(h, transform, [3])
    assert test.column("Q1")[0] == pytest.approx(4.0)
    assert "Q1" in test.degenerate_items


def test_outcome_items_are_not_standardized():
    """Outcome columns keep their raw values under a forced z-score transform."""
    items = [_numeric("Q1"), _numeric("Y", Usage.OUTCOME)]
    raw = _matrix(items, [["1", "2", "3"], ["0", "1", "1"]])
    rules = [
        HarmonizationRule(item_id="Q1", kind=RuleKind.IDENTITY_NUMERIC, params=PLAIN),
        HarmonizationRule(item_id="Y", kind=RuleKind.IDENTITY_NUMERIC, params=PLAIN),
    ]
    h = apply_rules(raw, rules)
    transform = fit_fold_transform(h, [0, 1, 2], rules, force_standardize=True)
    out = apply_fold_transform(h, transform, [0, 1, 2])
    assert out.column("Y").tolist() == [0.0, 1.0, 1.0]
    assert "Q1" in out.standardized_items


def test_single_valued_columns_are_reported():
    """Constant columns are found on the full sample and on training rows, outcomes aside."""
    items = [_numeric("Q1"), _numeric("Q2"), _numeric("Y", Usage.OUTCOME)]
    raw = _matrix(items, [["3", "3", MISSING, "3"], ["2", "2", "5", "6"], ["1", "1", "1", "1"]])
    rules = [HarmonizationRule(item_id=i, kind=RuleKind.IDENTITY_NUMERIC, params=PLAIN) for i in ("Q1", "Q2", "Y")]
    h = apply_rules(raw, rules)
    assert h.degenerate_items == frozenset({"Q1"})

    transform = fit_fold_transform(h, [0, 1], rules)
    assert transform.degenerate_items == frozenset({"Q1", "Q2"})
    assert transform.standardized_items == frozenset()
