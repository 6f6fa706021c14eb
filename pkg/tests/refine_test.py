"""Tests for refinement decisions, neighborhood edits, and the refinement loop."""

import json
import os
from dataclasses import replace

import pytest

from maseya.measure.diagnostics import (
    ConditionalContributionResult,
    DataLimitFlag,
    DataLimitThresholds,
    OverlapReport,
)
from maseya.measure.ecv import DeltaReport, EvaluationInputs, Thresholds, make_fold_plan
from maseya.measure.errors import (
    AnchorViolation,
    ConstraintViolation,
    InconsistentRound,
    NeighborhoodViolation,
    PreconditionError,
)
from maseya.measure.harmonize import apply_rules
from maseya.measure.instrument import default_covariates
from maseya.measure.mapping import parse_mapping, validate_mapping
from maseya.measure.proposer import FixtureProposer, Reallocation
from maseya.measure.refine import (
    Decision,
    IterationLog,
    LoopSettings,
    StoppingRule,
    decide,
    evaluate_round,
    neighborhood,
    refine_artifacts,
    replay_artifacts,
    run_loop,
)
from maseya.measure.taxonomy import parse_taxonomy

NO_OVERLAP = OverlapReport(0.85, (), (), ())


def _read_internal_json(json_path: str):
    """Read a JSON file in relative "data" directory."""
    fdir = os.path.dirname(os.path.abspath(__file__))
    json_fpath = os.path.join(fdir, "data", f"{json_path}.json")
    with open(json_fpath, encoding="utf-8") as stream:
        return json.load(stream)


def _pension():
    taxonomy = parse_taxonomy(_read_internal_json("pension_taxonomy"))
    mapping = parse_mapping(_read_internal_json("pension_mapping")).bind(taxonomy)
    return taxonomy, mapping


def _report(subdim_id, deltas, metric="auc", outcome_id="accept", mapping_version=1):
    return DeltaReport(
        subdim_id, (subdim_id,), outcome_id, metric, "inner", tuple(deltas), tuple(deltas), 100, 3, mapping_version, 1
    )


def _decisions(reports, **kwargs):
    decisions, streaks = decide(reports, kwargs.pop("overlap", NO_OVERLAP), **kwargs)
    return {d.subdim_id: (d.decision, d.reason) for d in decisions}, streaks


def test_stable_gain_is_retained():
    """A gain on any outcome's primary metric is enough to keep a subdimension."""
    reports = [
        _report("a", [0.02] * 10),
        _report("a", [-0.01] * 10, metric="r2", outcome_id="rate"),
        _report("b", [0.01] * 7 + [-0.001] * 3),
    ]
    decisions, streaks = _decisions(reports)
    assert decisions == {
        "a": (Decision.RETAIN, "stable_gain"),
        "b": (Decision.RETAIN, "stable_gain"),
    }
    assert streaks == {"a": 0, "b": 0}


def test_secondary_metrics_do_not_decide():
    reports = [_report("a", [-0.01] * 10), _report("a", [0.5] * 10, metric="logloss")]
    decisions, _ = _decisions(reports)
    assert decisions["a"] == (Decision.DEFER, "pending_discard")


def test_noise_like_paths():
    """Noise-like subdimensions are kept by conditional contribution, deferred, or refined."""
    noise = [-0.01] * 10
    reports = [_report(k, noise) for k in ("a", "b", "c", "d")]
    overlap = OverlapReport(0.85, (), (), (("a", "c"),))
    cc = [
        ConditionalContributionResult(("a", "c"), "a", "accept", "auc", (0.01,) * 10),
        ConditionalContributionResult(("a", "c"), "c", "accept", "auc", (-0.01,) * 10),
    ]
    limits = [DataLimitFlag("b", ("low_n", "few_items"), DataLimitThresholds())]
    decisions, streaks = _decisions(reports, overlap=overlap, limits=limits, cc=cc)
    assert decisions == {
        "a": (Decision.RETAIN, "conditional_contribution"),
        "b": (Decision.DEFER, "data_limited:low_n,few_items"),
        "c": (Decision.REFINE, "overlap"),
        "d": (Decision.DEFER, "pending_discard"),
    }
    assert streaks["d"] == 1


def test_repeated_noise_is_discarded():
    reports = [_report("d", [-0.01] * 10)]
    _, streaks = _decisions(reports)
    decisions, streaks = _decisions(reports, streaks=streaks, discard_after=2)
    assert decisions["d"] == (Decision.DISCARD, "repeated_noise")
    assert streaks["d"] == 2


def test_signal_resets_streak():
    decisions, streaks = _decisions([_report("d", [0.02] * 10)], streaks={"d": 1})
    assert decisions["d"] == (Decision.RETAIN, "stable_gain")
    assert streaks["d"] == 0


def test_inconsistent_round():
    with pytest.raises(InconsistentRound):
        decide([_report("a", [0.1]), _report("b", [0.1], mapping_version=2)], NO_OVERLAP)
    with pytest.raises(InconsistentRound):
        decide(
            [_report("a", [0.1])],
            NO_OVERLAP,
            limits=[DataLimitFlag("z", ("low_n",), DataLimitThresholds())],
        )


def test_split_rewrites_neighborhood_only():
    taxonomy, mapping = _pension()
    cluster = ["perceived_generosity", "perceived_stability"]
    assert neighborhood(mapping, cluster) == ["Q14", "Q16", "Q18", "Q33"]

    reallocation = Reallocation.from_json(_read_internal_json("generosity_split"))
    result = refine_artifacts(taxonomy, mapping, cluster, reallocation)

    assert result.changed_items == ("Q14", "Q16", "Q18", "Q33")
    assert result.taxonomy.version == 3
    assert result.mapping.taxonomy_version == 3
    assert result.mapping.version == mapping.version + 1
    assert not result.taxonomy.is_leaf("perceived_generosity")
    assert result.taxonomy.get("plan_stability").anchor_id == "db_beliefs"
    assert result.mapping.row("Q18").as_dict() == pytest.approx(
        {"financial_literacy": 0.40, "employer_contribution": 0.60}
    )
    assert result.mapping.row("Q15") == mapping.row("Q15")
    assert validate_mapping(result.mapping, result.taxonomy).ok


def test_rows_outside_neighborhood_are_rejected():
    taxonomy, mapping = _pension()
    data = _read_internal_json("generosity_split")
    data["rows"].append({"item_id": "Q9", "weights": {"retirement_horizon": 1.0}})
    with pytest.raises(NeighborhoodViolation):
        refine_artifacts(
            taxonomy, mapping, ["perceived_generosity", "perceived_stability"], Reallocation.from_json(data)
        )


def test_anchored_rows_are_rejected():
    taxonomy, mapping = _pension()
    data = _read_internal_json("generosity_split")
    data["rows"].append({"item_id": "Q7", "weights": {"discounting": 1.0}})
    with pytest.raises(AnchorViolation):
        refine_artifacts(
            taxonomy, mapping, ["perceived_generosity", "perceived_stability"], Reallocation.from_json(data)
        )


def test_split_target_must_be_in_cluster():
    taxonomy, mapping = _pension()
    reallocation = Reallocation("split", "perceived_generosity")
    with pytest.raises(ConstraintViolation):
        refine_artifacts(taxonomy, mapping, ["perceived_stability", "retirement_horizon"], reallocation)


def test_tighten_stays_in_neighborhood():
    """Tightening touches the cluster's rows and leaves the taxonomy alone."""
    taxonomy, mapping = _pension()
    result = refine_artifacts(
        taxonomy, mapping, ["perceived_generosity", "perceived_stability"], Reallocation("tighten")
    )
    assert result.taxonomy.version == taxonomy.version
    assert result.mapping.row("Q14").as_dict() == pytest.approx(
        {"perceived_generosity": 0.8, "financial_literacy": 0.2}
    )
    assert result.mapping.row("Q15") == mapping.row("Q15")
    assert {"Q14", "Q16", "Q18"} <= set(result.changed_items)
    assert "Q15" not in result.changed_items


def test_stopping_rule_bounds():
    with pytest.raises(PreconditionError):
        StoppingRule(plateau_delta=0.0)
    with pytest.raises(PreconditionError):
        StoppingRule(patience=0)
    with pytest.raises(PreconditionError):
        StoppingRule(max_rounds=-1)


def test_constant_item_flags_its_subdimension(planted):
    """A single-valued item marks the subdimension it loads on as data limited."""
    cells = planted.responses.cells.copy()
    j = planted.responses.item_ids.index("ST1")
    cells[:, j] = next(token for token in cells[:, j] if token is not None)
    h = apply_rules(replace(planted.responses, cells=cells), planted.rules)
    inputs = EvaluationInputs(
        h,
        planted.rules,
        planted.taxonomy,
        planted.mapping,
        planted.outcomes,
        default_covariates(planted.instrument),
    )
    plan = make_fold_plan(h.n_rows, None, 2, 2, 1, seed=1)

    state, _ = evaluate_round(inputs, plan, 0, 0, LoopSettings(), {}, 2)
    reasons = {flag.subdim: flag.reasons for flag in state.limits}
    assert "degenerate_columns" in reasons["service_tenure"]
    assert "degenerate_columns" not in reasons.get("health_risk", ())


@pytest.mark.slow
def test_loop_splits_planted_parent(planted, planted_dir, tmp_path):
    """
    With every label forced to noise and conditional contribution unreachable,
    the only refinable cluster is the planted parent and its look-alike. The
    fixture split clears the overlap, so the loop stops after one refinement.
    """
    h = apply_rules(planted.responses, planted.rules)
    inputs = EvaluationInputs(
        h,
        planted.rules,
        planted.taxonomy,
        planted.mapping,
        planted.outcomes,
        default_covariates(planted.instrument),
    )
    plan = make_fold_plan(h.n_rows, None, 3, 2, 1, seed=11)
    settings = LoopSettings(
        cutoff=0.80,
        thresholds=Thresholds(signal_share=1.01, weak_share=1.01),
        pass_share=1.01,
    )
    log_path = str(tmp_path / "iterations.jsonl")
    states = run_loop(
        inputs,
        plan,
        StoppingRule(),
        FixtureProposer(planted_dir["proposals"]),
        settings=settings,
        items=planted.instrument,
        log_path=log_path,
    )

    first, last = states[0], states[-1]
    assert len(states) == 2
    assert first.overlap.clusters == (("generosity", "plan_value"),)
    assert first.decision_of("generosity") == Decision.REFINE
    assert first.refinement["reallocation"]["target"] == "generosity"
    assert set(first.refinement["changed_items"]) == {"GB1", "GB2", "GE1", "GE2"}

    assert last.status == "no_refinement"
    assert last.overlap.clusters == ()
    assert last.taxonomy.version == planted.taxonomy.version + 1
    assert "benefit_value" in last.taxonomy.leaf_ids
    assert "generosity" not in last.taxonomy.leaf_ids

    records = IterationLog.read(log_path)
    assert [record["round"] for record in records] == [0, 1]
    taxonomy, mapping = replay_artifacts(planted.taxonomy, planted.mapping, records)
    assert taxonomy.leaf_ids == last.taxonomy.leaf_ids
    assert mapping.rows == last.mapping.rows
