"""
Run functions for every subcommand.

Each `*_from_options` function takes a resolved RunConfig, writes its outputs
under `config.out`, and returns the process exit code.
"""

import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from sklearn.exceptions import ConvergenceWarning

from .diagnostics import DataLimitThresholds, correlation_screen
from .ecv import (
    OUTER,
    Candidate,
    DeltaReport,
    EvaluationInputs,
    FoldPlan,
    Thresholds,
    build_fold_context,
    compare_hard_soft,
    evaluate_candidates,
    make_fold_plan,
)
from .errors import MeasureError, PreconditionError, UnknownSubdimension
from .findings import ValidationReport
from .harmonize import (
    HarmonizationRule,
    HarmonizedMatrix,
    apply_fold_transform,
    apply_rules,
    fit_fold_transform,
    load_rules,
)
from .instrument import (
    RESPONDENT_COLUMN,
    OutcomeKind,
    OutcomeSpec,
    ResponseMatrix,
    SurveyItem,
    default_covariates,
    extract_outcome,
    load_instrument,
    load_outcomes,
    load_responses,
)
from .mapping import (
    MappingMatrix,
    coverage_weights,
    cross_loading_concentration,
    load_hard_mapping,
    load_mapping,
    reweight_by_coverage,
    save_mapping,
    sparsify_threshold,
    sparsify_top_m,
    validate_mapping,
)
from .options import get_options, resolve_config, write_manifest
from .placebo import mapping_permutation, outcome_permutation, write_draws
from .proposer import AuditStore, EndpointConfig, FixtureProposer, Proposer, RemoteProposer
from .refine import LoopSettings, StoppingRule, evaluate_round, primary_metrics, run_loop
from .report import (
    delta_records,
    read_decisions,
    read_delta_reports,
    triage_rows,
    write_json,
    write_table,
    write_triage,
)
from .scoring import (
    ScoreStandardizer,
    ScoringRule,
    ScoringRuleKind,
    build_scores,
    score_coverage,
    write_scores,
)
from .synth import default_spec, generate, load_synth_spec, write_synthetic
from .taxonomy import Taxonomy, load_taxonomy, save_taxonomy, validate_taxonomy

LOGGER = logging.getLogger(__name__)

VERSION = "0.1.0"

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_ERROR = 2


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _require(config, *names: str):
    for name in names:
        if getattr(config, name) is None:
            flag = name.replace("_", "-")
            raise PreconditionError(f"{config.command} needs --{flag}")


def _out(config, name: str) -> str:
    return os.path.join(config.out, name)


@dataclass(frozen=True)
class SurveyData:
    instrument: Tuple[SurveyItem, ...]
    raw: ResponseMatrix
    h: HarmonizedMatrix
    rules: Tuple[HarmonizationRule, ...]
    outcomes: Tuple[OutcomeSpec, ...]


def load_survey(config) -> SurveyData:
    _require(config, "instrument", "responses", "rules")
    instrument = tuple(load_instrument(config.instrument))
    raw = load_responses(config.responses, instrument, config.missing_tokens)
    rules = tuple(load_rules(config.rules))
    h = apply_rules(raw, rules)
    outcomes = tuple(load_outcomes(config.outcomes)) if config.outcomes else ()
    return SurveyData(instrument, raw, h, rules, outcomes)


def prepare_mapping(w: MappingMatrix, t: Taxonomy, tau: float, m: int) -> MappingMatrix:
    """Sparsify by threshold, then keep the top m, then copy roles from the taxonomy."""
    return sparsify_top_m(sparsify_threshold(w, tau), m).bind(t)


def load_artifacts(config, instrument: Sequence[SurveyItem]) -> Tuple[Taxonomy, MappingMatrix, ValidationReport]:
    """
    Load and check the taxonomy and mapping.

    A mapping row naming a subdimension the taxonomy does not hold is a hard
    error; other findings are returned for the caller to report.
    """
    _require(config, "taxonomy", "mapping")
    taxonomy = load_taxonomy(config.taxonomy)
    mapping = load_mapping(config.mapping, taxonomy.version)
    report = validate_taxonomy(taxonomy).extend(validate_mapping(mapping, taxonomy, instrument).findings)
    unknown = report.with_code("unknown_subdimension")
    if unknown:
        raise UnknownSubdimension(unknown[0].message, item_id=unknown[0].subject)
    return taxonomy, prepare_mapping(mapping, taxonomy, config.tau, config.top_m), report


def evaluation_inputs(config, survey: SurveyData, taxonomy: Taxonomy, mapping: MappingMatrix) -> EvaluationInputs:
    if not survey.outcomes:
        raise PreconditionError(f"{config.command} needs --outcomes")
    return EvaluationInputs(
        survey.h,
        survey.rules,
        taxonomy,
        mapping,
        survey.outcomes,
        default_covariates(survey.instrument),
        ScoringRule.parse(config.scoring_rule, config.post_standardize),
        config.l2,
        config.max_iter,
    )


def fold_plan(config, inputs: EvaluationInputs) -> FoldPlan:
    """Stratify on the first binary outcome when there is one."""
    labels = None
    for outcome in inputs.outcomes:
        if outcome.kind == OutcomeKind.BINARY:
            y, mask = extract_outcome(inputs.h, outcome)
            labels = np.where(mask, y, np.nan)
            break
    return make_fold_plan(
        inputs.h.n_rows, labels, config.outer_folds, config.inner_folds, config.repeats, config.seed
    )


def loop_settings(config) -> LoopSettings:
    return LoopSettings(
        cutoff=config.overlap_cutoff,
        closeness=config.closeness,
        thresholds=Thresholds(config.signal_share, config.weak_share),
        data_limits=DataLimitThresholds(config.min_n, config.min_items, config.min_sd),
        pass_share=config.pass_share,
        secondary_lo=config.secondary_lo,
        secondary_hi=config.secondary_hi,
        tau=config.tau,
        proposer_retries=config.proposer_retries,
    )


def write_reports(config, reports: Sequence[DeltaReport], stem: str, taxonomy: Taxonomy = None, decisions=None):
    write_json({"reports": [report.to_json() for report in reports]}, _out(config, f"{stem}.json"))
    thresholds = Thresholds(config.signal_share, config.weak_share)
    write_table(delta_records(reports, thresholds), _out(config, f"{stem}_summary"))
    write_triage(triage_rows(reports, taxonomy, decisions, thresholds), _out(config, "triage"))


def synth_from_options(config) -> int:
    spec = load_synth_spec(config.spec) if config.spec else default_spec(config.seed, config.synth_n)
    write_synthetic(generate(spec), config.out)
    return EXIT_OK


def harmonize_from_options(config) -> int:
    survey = load_survey(config)
    frame = pd.DataFrame(survey.h.values, columns=list(survey.h.item_ids))
    frame.insert(0, RESPONDENT_COLUMN, list(survey.h.respondent_ids))
    frame.to_csv(_out(config, "harmonized.csv"), index=False, na_rep="", encoding="utf-8")
    write_json(
        {
            "induced_missing": dict(survey.h.induced_missing),
            "degenerate_items": sorted(survey.h.degenerate_items),
            "outcome_items": sorted(survey.h.outcome_items),
        },
        _out(config, "harmonize_summary.json"),
    )
    return EXIT_OK


def score_from_options(config) -> int:
    """Full-sample descriptive scores; fold-local scores are built inside evaluation."""
    survey = load_survey(config)
    taxonomy, mapping, _ = load_artifacts(config, survey.instrument)
    rule = ScoringRule.parse(config.scoring_rule, config.post_standardize)
    rows = np.arange(survey.h.n_rows)
    transform = fit_fold_transform(
        survey.h, rows, survey.rules, force_standardize=rule.kind == ScoringRuleKind.ZSCORE_THEN_MEAN
    )
    h = apply_fold_transform(survey.h, transform, rows)
    if rule.kind == ScoringRuleKind.COVERAGE_REWEIGHTED_MEAN:
        mapping = reweight_by_coverage(mapping, coverage_weights(survey.h, rows))
    scores = build_scores(h, mapping, rule, taxonomy.leaf_ids)
    if rule.post_standardize:
        scores = ScoreStandardizer.fit(scores).apply(scores)
    write_scores(scores, _out(config, "scores.csv"))
    write_json(
        {k: {"n_nonmissing": c.n_nonmissing, "item_count": c.item_count} for k, c in score_coverage(scores).items()},
        _out(config, "score_coverage.json"),
    )
    return EXIT_OK


def validate_from_options(config) -> int:
    survey = load_survey(config)
    taxonomy, mapping, report = load_artifacts(config, survey.instrument)
    write_json(report.to_json(), _out(config, "validation.json"))
    if not report.ok:
        for finding in report.findings:
            LOGGER.warning("%s %s: %s", finding.code, finding.subject, finding.message)
        return EXIT_FINDINGS

    inputs = evaluation_inputs(config, survey, taxonomy, mapping)
    plan = fold_plan(config, inputs)
    reports = evaluate_outer(inputs, plan, config.n_jobs)
    write_reports(config, reports, "deltas", taxonomy)

    if config.hard_mapping:
        hard = load_hard_mapping(config.hard_mapping)
        comparison = compare_hard_soft(inputs, hard, plan, 0, config.n_jobs)
        thresholds = Thresholds(config.signal_share, config.weak_share)
        records = []
        for system, system_reports in comparison.items():
            records.extend(
                {"system": system, **record} for record in delta_records(system_reports, thresholds)
            )
        write_table(records, _out(config, "hard_vs_soft"))
    return EXIT_OK


def evaluate_outer(inputs: EvaluationInputs, plan: FoldPlan, n_jobs: int = 1) -> List[DeltaReport]:
    inputs.check_versions()
    return evaluate_candidates(inputs, plan.outer, inputs.candidate_leaves(), OUTER, n_jobs)


def diagnose_from_options(config) -> int:
    survey = load_survey(config)
    taxonomy, mapping, _ = load_artifacts(config, survey.instrument)
    inputs = evaluation_inputs(config, survey, taxonomy, mapping)
    plan = fold_plan(config, inputs)
    outer_index = config.outer_index or 0

    state, _ = evaluate_round(
        inputs, plan, outer_index, 0, loop_settings(config), {}, config.discard_after, config.n_jobs
    )
    write_json(state.to_json(), _out(config, "diagnostics.json"))
    write_table(
        [
            {"subdim_a": p.subdim_a, "subdim_b": p.subdim_b, "rho": p.rho, "n": p.n}
            for p in state.overlap.pairs
        ],
        _out(config, "correlations"),
        ("subdim_a", "subdim_b", "rho", "n"),
    )
    write_reports(config, state.reports, "inner_deltas", taxonomy, _decision_notes(state.decisions))
    return EXIT_OK


def _decision_notes(decisions) -> Dict[str, str]:
    return {d.subdim_id: f"{d.decision.value} ({d.reason})" for d in decisions}


def make_proposer(config, audit: AuditStore) -> Proposer:
    if config.proposals:
        return FixtureProposer(config.proposals)
    endpoint = EndpointConfig.from_env(
        url=config.endpoint, model=config.model, temperature=config.temperature
    )
    if not endpoint.url:
        raise PreconditionError("refine needs --proposals or a proposer endpoint")
    return RemoteProposer(endpoint, audit=audit)


def pool_fold_reports(per_fold: Sequence[Sequence[DeltaReport]]) -> List[DeltaReport]:
    """Join per-fold reports of the same candidate, outcome and metric in fold order."""
    pooled: Dict[Tuple[str, str, str], DeltaReport] = {}
    for reports in per_fold:
        for report in reports:
            key = (report.candidate, report.outcome_id, report.metric)
            if key not in pooled:
                pooled[key] = report
                continue
            first = pooled[key]
            pooled[key] = replace(
                first,
                deltas=first.deltas + report.deltas,
                raw_deltas=first.raw_deltas + report.raw_deltas,
                n=max(first.n, report.n),
                items=max(first.items, report.items),
                skipped_folds=first.skipped_folds + report.skipped_folds,
                mapping_version=max(first.mapping_version, report.mapping_version),
                taxonomy_version=max(first.taxonomy_version, report.taxonomy_version),
            )
    return list(pooled.values())


def refine_from_options(config) -> int:
    """Refine inside each outer training set, then evaluate each fold's frozen artifacts once."""
    survey = load_survey(config)
    taxonomy, mapping, report = load_artifacts(config, survey.instrument)
    if not report.ok:
        write_json(report.to_json(), _out(config, "validation.json"))
        return EXIT_FINDINGS

    inputs = evaluation_inputs(config, survey, taxonomy, mapping)
    plan = fold_plan(config, inputs)
    audit = AuditStore(_out(config, "proposals"))
    proposer = make_proposer(config, audit)
    stopping = StoppingRule(config.plateau_delta, config.patience, config.max_rounds, config.discard_after)
    settings = loop_settings(config)

    indices = [config.outer_index] if config.outer_index is not None else range(plan.k_out)
    folds = []
    per_fold = []
    for k in indices:
        states = run_loop(
            inputs,
            plan,
            stopping,
            proposer,
            k,
            settings,
            survey.instrument,
            _out(config, f"iterations-{k}.jsonl"),
            audit,
            config.n_jobs,
        )
        final = states[-1]
        frozen = inputs.with_mapping(final.mapping, final.taxonomy)
        save_taxonomy(final.taxonomy, _out(config, f"taxonomy-{k}.json"))
        save_mapping(final.mapping, _out(config, f"mapping-{k}.json"))
        per_fold.append(
            evaluate_candidates(frozen, [plan.outer[k]], frozen.candidate_leaves(), OUTER, config.n_jobs)
        )
        folds.append(
            {
                "outer_index": k,
                "rounds": len(states),
                "status": final.status,
                "taxonomy_version": final.taxonomy_version,
                "mapping_version": final.mapping_version,
                "decisions": [entry.to_json() for entry in final.decisions],
            }
        )

    write_json({"folds": folds, "primary_metrics": list(primary_metrics(inputs))}, _out(config, "refine_summary.json"))
    write_json({"decisions": folds[0]["decisions"]}, _out(config, "decisions.json"))
    final_taxonomy = load_taxonomy(_out(config, f"taxonomy-{folds[0]['outer_index']}.json"))
    notes = {d["subdim_id"]: f"{d['decision']} ({d['reason']})" for d in folds[0]["decisions"]}
    write_reports(config, pool_fold_reports(per_fold), "deltas", final_taxonomy, notes)
    failed = [fold for fold in folds if fold["status"].startswith("failed")]
    return EXIT_FINDINGS if failed else EXIT_OK


def placebo_from_options(config) -> int:
    survey = load_survey(config)
    taxonomy, mapping, _ = load_artifacts(config, survey.instrument)
    inputs = evaluation_inputs(config, survey, taxonomy, mapping)
    plan = fold_plan(config, inputs)
    if config.placebo_kind == "mapping":
        report = mapping_permutation(
            inputs, plan.outer, config.draws, config.seed, config.outcome, None, config.smooth, config.n_jobs
        )
    else:
        report = outcome_permutation(
            inputs, plan.outer, config.draws, config.seed, config.outcome, None, config.smooth, config.n_jobs
        )
    write_json(report.to_json(), _out(config, "placebo.json"))
    write_draws(report, _out(config, "placebo_draws.csv"))
    return EXIT_OK


def grid_row(
    inputs: EvaluationInputs,
    plan: FoldPlan,
    mapping: MappingMatrix,
    tau: float,
    m: int,
    rule: str,
    cutoffs: Sequence[float],
    closeness: float = 0.25,
    n_jobs: int = 1,
) -> Dict[str, object]:
    """Summary of one sparsification and scoring cell on the inner splits of the first outer fold."""
    report = validate_mapping(mapping, inputs.taxonomy)
    row: Dict[str, object] = {
        "tau": tau,
        "m": m,
        "scoring_rule": rule,
        "valid": report.ok,
        "mean_nonzero": float(np.mean([len(r.weights) for r in mapping.rows])) if mapping.rows else 0.0,
    }
    loaded = set(mapping.subdim_ids)
    leaves = [k for k in inputs.candidate_leaves() if k in loaded]
    outcome = inputs.outcomes[0]
    metric = inputs.metrics_for(outcome)[0].name
    row["outcome_id"] = outcome.outcome_id
    row["metric"] = metric
    row["delta_mean"] = float("nan")
    row["share_improve"] = float("nan")
    if leaves:
        reports = evaluate_candidates(
            replace(inputs, outcomes=(outcome,)), plan.inner_splits(0), [Candidate(tuple(leaves))], n_jobs=n_jobs
        )
        for delta in reports:
            if delta.metric == metric:
                row["delta_mean"] = delta.mean
                row["share_improve"] = delta.share

    scores = build_fold_context(inputs, plan.outer[0], leaves).scores_train
    top = None
    for cutoff in sorted(cutoffs):
        overlap = correlation_screen(scores, cutoff, subdim_ids=leaves)
        row[f"flagged_{cutoff:.2f}"] = len(overlap.flagged)
        top = top or overlap.top_pair()
    row["top_pair"] = f"{top.subdim_a}~{top.subdim_b}" if top else ""
    row["top_rho"] = top.rho if top else float("nan")
    row["cross_loading_share"] = cross_loading_concentration(mapping, closeness).share
    return row


def grid_from_options(config) -> int:
    """One row per tau, m, and scoring rule cell; flagged-pair counts per cutoff as columns."""
    survey = load_survey(config)
    taxonomy, prepared, _ = load_artifacts(config, survey.instrument)
    raw_mapping = load_mapping(config.mapping, taxonomy.version)
    base = evaluation_inputs(config, survey, taxonomy, prepared)
    plan = fold_plan(config, base)

    rows = []
    for rule in config.grid_rules:
        for tau in config.grid_taus:
            for m in config.grid_ms:
                mapping = prepare_mapping(raw_mapping, taxonomy, tau, m)
                inputs = replace(
                    base.with_mapping(mapping), scoring=ScoringRule.parse(rule, config.post_standardize)
                )
                row = grid_row(
                    inputs, plan, mapping, tau, m, rule, config.grid_cutoffs, config.closeness, config.n_jobs
                )
                rows.append(row)
                LOGGER.info("Grid cell tau=%s m=%s rule=%s done", tau, m, rule)
    write_table(rows, _out(config, "grid"))
    return EXIT_OK


def report_from_options(config) -> int:
    _require(config, "deltas")
    reports = read_delta_reports(config.deltas)
    decisions = read_decisions(config.decisions) if config.decisions else None
    taxonomy = load_taxonomy(config.taxonomy) if config.taxonomy else None
    thresholds = Thresholds(config.signal_share, config.weak_share)
    write_triage(triage_rows(reports, taxonomy, decisions, thresholds), _out(config, "triage"))
    return EXIT_OK


COMMAND_FUNCTIONS: Mapping[str, Callable[..., int]] = {
    "synth": synth_from_options,
    "harmonize": harmonize_from_options,
    "score": score_from_options,
    "validate": validate_from_options,
    "diagnose": diagnose_from_options,
    "refine": refine_from_options,
    "placebo": placebo_from_options,
    "grid": grid_from_options,
    "report": report_from_options,
}


def run_from_options(options: Mapping[str, object]) -> int:
    config = resolve_config(options)
    path = write_manifest(config, VERSION)
    LOGGER.info("Wrote manifest to %s", path)
    return COMMAND_FUNCTIONS[config.command](config)


def main(args=None) -> int:
    options = get_options(args)
    configure_logging(bool(options.get("verbose")), bool(options.get("quiet")))
    # Convergence is reported once per fit as NonConvergence.
    warnings.filterwarnings("ignore", category=ConvergenceWarning)
    try:
        return run_from_options(options)
    except (MeasureError, OSError, ValidationError) as error:
        if isinstance(error, MeasureError):
            payload = error.to_json()
        else:
            payload = {"error": type(error).__name__, "message": str(error)}
        LOGGER.error("%s: %s", payload["error"], payload["message"])
        sys.stderr.write(json.dumps(payload) + os.linesep)
        return EXIT_ERROR
