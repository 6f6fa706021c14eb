"""
The refinement loop: evaluate, diagnose, decide, and refine until gains plateau.

Each round reads only the inner splits of one outer fold. A refinement touches
the mapping rows of the target cluster's neighborhood and nothing else, and
every round is appended to a JSON-lines log from which the final artifacts can
be replayed.
"""

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Collection, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .diagnostics import (
    ConditionalContributionResult,
    DataLimitFlag,
    DataLimitThresholds,
    OverlapReport,
    cluster_contributions,
    correlation_screen,
    data_limit_flags,
)
from .ecv import (
    DeltaReport,
    EvaluationInputs,
    FoldPlan,
    Label,
    Thresholds,
    build_fold_context,
    classify_values,
    degenerate_training_items,
    evaluate_candidates,
)
from .errors import (
    AnchorViolation,
    ConstraintViolation,
    InconsistentRound,
    NeighborhoodViolation,
    PreconditionError,
    ProposerFailure,
)
from .instrument import SurveyItem
from .mapping import (
    CrossLoadingReport,
    MappingMatrix,
    MappingRow,
    cross_loading_concentration,
    sparsify_threshold,
    tighten_primary_secondary,
    validate_mapping,
)
from .proposer import (
    AuditStore,
    ProposalConstraints,
    ProposalKind,
    Proposer,
    Reallocation,
    render_prompt,
    request_proposal,
)
from .taxonomy import Taxonomy, add_subdimension, split_subdimension

LOGGER = logging.getLogger(__name__)

PRIMARY_METRICS = ("auc", "r2")

OPERATIONS = ("split", "tighten", "threshold", "reallocate")


class Decision(str, Enum):
    RETAIN = "retain"
    REFINE = "refine"
    DEFER = "defer"
    DISCARD = "discard"


@dataclass(frozen=True)
class SubdimDecision:
    subdim_id: str
    decision: Decision
    reason: str

    def to_json(self) -> Mapping[str, str]:
        return {"subdim_id": self.subdim_id, "decision": self.decision.value, "reason": self.reason}


@dataclass(frozen=True)
class StoppingRule:
    plateau_delta: float = 0.002
    patience: int = 2
    max_rounds: int = 5
    discard_after: int = 2

    def __post_init__(self):
        if self.plateau_delta <= 0:
            raise PreconditionError(f"plateau delta must be positive, got {self.plateau_delta}")
        if self.patience < 1:
            raise PreconditionError(f"patience must be at least 1, got {self.patience}")
        if self.max_rounds < 0:
            raise PreconditionError(f"max rounds must be nonnegative, got {self.max_rounds}")
        if self.discard_after < 1:
            raise PreconditionError(f"discard_after must be at least 1, got {self.discard_after}")


@dataclass(frozen=True)
class LoopSettings:
    """Diagnostic thresholds shared by every round."""

    cutoff: float = 0.85
    closeness: float = 0.25
    thresholds: Thresholds = Thresholds()
    data_limits: DataLimitThresholds = DataLimitThresholds()
    pass_share: float = 0.60
    secondary_lo: float = 0.05
    secondary_hi: float = 0.20
    tau: float = 0.10
    proposer_retries: int = 2


@dataclass(frozen=True)
class IterationState:
    round: int
    taxonomy: Taxonomy
    mapping: MappingMatrix
    reports: Tuple[DeltaReport, ...]
    overlap: OverlapReport
    cross_loading: CrossLoadingReport
    decisions: Tuple[SubdimDecision, ...]
    best: Mapping[str, float]
    outer_index: int = 0
    limits: Tuple[DataLimitFlag, ...] = ()
    contributions: Tuple[ConditionalContributionResult, ...] = ()
    status: str = "continue"
    refinement: Optional[Mapping[str, Any]] = None

    @property
    def taxonomy_version(self) -> int:
        return self.taxonomy.version

    @property
    def mapping_version(self) -> int:
        return self.mapping.version

    def decision_of(self, subdim_id: str) -> Decision:
        for entry in self.decisions:
            if entry.subdim_id == subdim_id:
                return entry.decision
        raise PreconditionError(f"no decision for {subdim_id}")

    def with_decision(self, decision: Decision) -> List[str]:
        return [entry.subdim_id for entry in self.decisions if entry.decision == decision]

    def to_json(self) -> Mapping[str, Any]:
        return {
            "round": self.round,
            "outer_index": self.outer_index,
            "taxonomy_version": self.taxonomy_version,
            "mapping_version": self.mapping_version,
            "status": self.status,
            "best": dict(self.best),
            "decisions": [entry.to_json() for entry in self.decisions],
            "reports": [report.to_json() for report in self.reports],
            "overlap": self.overlap.to_json(),
            "cross_loading": self.cross_loading.to_json(),
            "data_limits": [flag.to_json() for flag in self.limits],
            "conditional_contribution": [result.to_json() for result in self.contributions],
            "refinement": self.refinement,
        }


def _primary(reports: Iterable[DeltaReport], metrics: Collection[str]) -> List[DeltaReport]:
    return [r for r in reports if r.metric in metrics and len(r.members) == 1]


def decide(
    reports: Sequence[DeltaReport],
    overlap: OverlapReport,
    limits: Sequence[DataLimitFlag] = (),
    cc: Sequence[ConditionalContributionResult] = (),
    streaks: Optional[Mapping[str, int]] = None,
    discard_after: int = 2,
    thresholds: Thresholds = Thresholds(),
    metrics: Collection[str] = PRIMARY_METRICS,
) -> Tuple[List[SubdimDecision], Dict[str, int]]:
    """
    Decide the fate of every evaluated subdimension.

    A subdimension with a signal or weak signal on any outcome is retained.
    A noise-like one is deferred when data-limited, refined when it sits in an
    overlap cluster without passing its conditional contribution, retained when
    it passes, and otherwise held as pending until `discard_after` consecutive
    noise-like rounds discard it.

    Returns the decisions and the updated noise streak per subdimension.
    """
    versions = {(r.mapping_version, r.taxonomy_version) for r in reports}
    if len(versions) > 1:
        raise InconsistentRound("reports come from different mapping or taxonomy versions")
    primary = _primary(reports, metrics)
    evaluated = sorted({r.members[0] for r in primary})
    for flag in limits:
        if flag.subdim not in evaluated:
            raise InconsistentRound(f"data-limit flag names unevaluated {flag.subdim}")
    for result in cc:
        if result.candidate not in evaluated:
            raise InconsistentRound(f"conditional contribution names unevaluated {result.candidate}")

    limited = {flag.subdim: flag for flag in limits}
    passed = {result.candidate for result in cc if result.passed}
    streaks = dict(streaks or {})

    decisions = []
    for subdim_id in evaluated:
        labels = [
            classify_values(r.mean, r.share, thresholds) for r in primary if r.members[0] == subdim_id
        ]
        if any(label != Label.NOISE_LIKE for label in labels):
            streaks[subdim_id] = 0
            decisions.append(SubdimDecision(subdim_id, Decision.RETAIN, "stable_gain"))
            continue
        if subdim_id in passed:
            streaks[subdim_id] = 0
            decisions.append(SubdimDecision(subdim_id, Decision.RETAIN, "conditional_contribution"))
            continue
        if subdim_id in limited:
            reason = "data_limited:" + ",".join(limited[subdim_id].reasons)
            decisions.append(SubdimDecision(subdim_id, Decision.DEFER, reason))
            continue
        if overlap.cluster_of(subdim_id) is not None:
            decisions.append(SubdimDecision(subdim_id, Decision.REFINE, "overlap"))
            continue

        streaks[subdim_id] = streaks.get(subdim_id, 0) + 1
        if streaks[subdim_id] >= discard_after:
            decisions.append(SubdimDecision(subdim_id, Decision.DISCARD, "repeated_noise"))
        else:
            decisions.append(SubdimDecision(subdim_id, Decision.DEFER, "pending_discard"))
    return decisions, streaks


def neighborhood(w: MappingMatrix, cluster: Collection[str]) -> List[str]:
    """Items with positive weight on any cluster member."""
    return w.items_loading_on(set(cluster))


@dataclass(frozen=True)
class RefinementResult:
    taxonomy: Taxonomy
    mapping: MappingMatrix
    changed_items: Tuple[str, ...]


def _check_rows(w: MappingMatrix, rows: Sequence[MappingRow], allowed: Collection[str]):
    for row in rows:
        if w.has_row(row.item_id) and w.is_anchored(w.row(row.item_id)):
            raise AnchorViolation(f"item {row.item_id} is anchored", item_id=row.item_id)
        if row.item_id not in allowed:
            raise NeighborhoodViolation(
                f"item {row.item_id} is outside the refinement neighborhood", item_id=row.item_id
            )


def refine_artifacts(
    taxonomy: Taxonomy,
    mapping: MappingMatrix,
    cluster: Sequence[str],
    reallocation: Reallocation,
    secondary_lo: float = 0.05,
    secondary_hi: float = 0.20,
    tau: float = 0.10,
) -> RefinementResult:
    """
    Apply one reallocation to the neighborhood of a cluster.

    Operations are `split` (nest children under the target and rewrite the
    neighborhood rows), `reallocate` (rewrite rows only), `tighten` (project to
    primary plus bounded secondary), and `threshold` (drop weights below tau
    and renormalize).
    """
    if reallocation.operation not in OPERATIONS:
        raise ConstraintViolation(f"unknown refinement operation {reallocation.operation!r}")
    cluster = sorted(cluster)
    allowed = set(neighborhood(mapping, cluster))
    target = reallocation.target
    if target is not None and taxonomy.has(target) and taxonomy.get(target).anchored:
        raise AnchorViolation(f"{target} is anchored", subdim_id=target)
    _check_rows(mapping, reallocation.rows, allowed)

    t = taxonomy
    if reallocation.operation == "split":
        if target not in cluster:
            raise ConstraintViolation(f"split target {target!r} is not in the cluster {cluster}")
        anchor_id = taxonomy.get(target).anchor_id
        children = [child.to_subdimension(anchor_id) for child in reallocation.children]
        t = split_subdimension(t, target, children)
    if reallocation.new_subdimensions:
        anchor_id = taxonomy.get(target).anchor_id if target else taxonomy.get(cluster[0]).anchor_id
        for proposed in reallocation.new_subdimensions:
            t = add_subdimension(t, proposed.to_subdimension(anchor_id))

    w = mapping
    if reallocation.operation == "tighten" and not reallocation.rows:
        w = tighten_primary_secondary(w, secondary_lo, secondary_hi, only_items=allowed)
        w = replace(w, sparsity_cap=mapping.sparsity_cap)
    elif reallocation.operation == "threshold":
        w = sparsify_threshold(w, reallocation.tau if reallocation.tau is not None else tau, allowed)
        w = replace(w, tau=mapping.tau)
    else:
        replacements = {row.item_id: replace(row, proposer="refinement") for row in reallocation.rows}
        rows = [replacements.get(row.item_id, row) for row in w.rows]
        w = w.with_rows(rows)
    w = replace(w, taxonomy_version=t.version).bind(t)

    report = validate_mapping(w, t)
    if not report.ok:
        raise ConstraintViolation(
            "refined mapping fails validation", codes=",".join(sorted(set(report.codes())))
        )

    before = {row.item_id: row for row in mapping.rows}
    changed = tuple(row.item_id for row in w.rows if before.get(row.item_id) != row)
    LOGGER.info(
        "Refinement %s on %s changed %d rows (taxonomy v%d, mapping v%d)",
        reallocation.operation,
        target or "|".join(cluster),
        len(changed),
        t.version,
        w.version,
    )
    return RefinementResult(t, w, changed)


def apply_refinement(
    state: IterationState, cluster: Sequence[str], reallocation: Reallocation, **bands
) -> RefinementResult:
    """Refine the artifacts a round was evaluated on."""
    return refine_artifacts(state.taxonomy, state.mapping, cluster, reallocation, **bands)


class IterationLog:
    """Append-only JSON-lines log, one record per round."""

    def __init__(self, path: Optional[str]):
        self._path = path

    def append(self, state: IterationState):
        if self._path is None:
            return
        with open(self._path, "a", encoding="utf-8") as stream:
            stream.write(json.dumps(state.to_json(), sort_keys=True, default=float) + "\n")

    @staticmethod
    def read(path: str) -> List[Mapping[str, Any]]:
        with open(path, encoding="utf-8") as stream:
            return [json.loads(line) for line in stream if line.strip()]


def replay_artifacts(
    taxonomy: Taxonomy, mapping: MappingMatrix, records: Iterable[Mapping[str, Any]]
) -> Tuple[Taxonomy, MappingMatrix]:
    """Rebuild the final taxonomy and mapping by reapplying every logged refinement."""
    for record in records:
        refinement = record.get("refinement")
        if not refinement:
            continue
        result = refine_artifacts(
            taxonomy,
            mapping,
            refinement["cluster"],
            Reallocation.from_json(refinement["reallocation"]),
            refinement["secondary_lo"],
            refinement["secondary_hi"],
            refinement["tau"],
        )
        taxonomy, mapping = result.taxonomy, result.mapping
    return taxonomy, mapping


def primary_metrics(inputs: EvaluationInputs) -> Tuple[str, ...]:
    """First listed metric of every outcome."""
    return tuple(dict.fromkeys(inputs.metrics_for(o)[0].name for o in inputs.outcomes))


def _best(reports: Sequence[DeltaReport], metrics: Collection[str]) -> Dict[str, float]:
    best: Dict[str, float] = {}
    for report in _primary(reports, metrics):
        if np.isfinite(report.mean):
            best[report.outcome_id] = max(best.get(report.outcome_id, -np.inf), report.mean)
    return best


def _gain(previous: Mapping[str, float], current: Mapping[str, float]) -> float:
    gains = [current[o] - previous[o] for o in current if o in previous]
    return max(gains) if gains else 0.0


def _pick_target(
    decisions: Sequence[SubdimDecision], reports: Sequence[DeltaReport], taxonomy: Taxonomy, metrics
) -> Optional[str]:
    """The refinable subdimension with the lowest mean gain; ties by id."""
    targets = [
        d.subdim_id
        for d in decisions
        if d.decision == Decision.REFINE and not taxonomy.get(d.subdim_id).anchored
    ]
    if not targets:
        return None
    means = {}
    for report in _primary(reports, metrics):
        if report.members[0] in targets and np.isfinite(report.mean):
            key = report.members[0]
            means[key] = min(means.get(key, np.inf), report.mean)
    return min(targets, key=lambda k: (means.get(k, np.inf), k))


def _refinement_request(
    state: IterationState,
    target: str,
    cluster: Sequence[str],
    items: Optional[Sequence[SurveyItem]],
    settings: LoopSettings,
):
    nearby = neighborhood(state.mapping, cluster)
    if items is not None:
        stems = {item.item_id: item for item in items}
        nearby = [stems.get(item_id, item_id) for item_id in nearby]
    constraints = ProposalConstraints(
        secondary_lo=settings.secondary_lo,
        secondary_hi=settings.secondary_hi,
        neighborhood=tuple(neighborhood(state.mapping, cluster)),
        leaf_ids=tuple(state.taxonomy.leaf_ids),
        target=target,
    )
    return render_prompt(
        ProposalKind.REFINEMENT,
        {
            "cluster": ", ".join(cluster),
            "constructs": state.taxonomy.leaves,
            "neighborhood": nearby,
            "secondary_lo": settings.secondary_lo,
            "secondary_hi": settings.secondary_hi,
            "target": target,
        },
        constraints,
        taxonomy_version=state.taxonomy_version,
        mapping_version=state.mapping_version,
    )


def evaluate_round(
    inputs: EvaluationInputs,
    plan: FoldPlan,
    outer_index: int,
    round_index: int,
    settings: LoopSettings,
    streaks: Mapping[str, int],
    discard_after: int,
    n_jobs: int = 1,
) -> Tuple[IterationState, Dict[str, int]]:
    """One evaluate, diagnose, and decide pass on the inner splits of one outer fold."""
    inputs.check_versions()
    splits = plan.inner_splits(outer_index)
    leaves = inputs.candidate_leaves()
    reports = evaluate_candidates(inputs, splits, leaves, n_jobs=n_jobs)

    # Overlap and support are measured on the outer training rows only.
    context = build_fold_context(inputs, plan.outer[outer_index], leaves)
    overlap = correlation_screen(context.scores_train, settings.cutoff, subdim_ids=leaves)
    limits = data_limit_flags(
        context.scores_train,
        thresholds=settings.data_limits,
        mapping=inputs.mapping,
        degenerate_items=context.degenerate_items | degenerate_training_items(inputs, splits),
    )
    contributions = cluster_contributions(overlap, inputs, splits, settings.pass_share, n_jobs)
    cross = cross_loading_concentration(inputs.mapping, settings.closeness)
    metrics = primary_metrics(inputs)
    decisions, streaks = decide(
        reports, overlap, limits, contributions, streaks, discard_after, settings.thresholds, metrics
    )
    state = IterationState(
        round_index,
        inputs.taxonomy,
        inputs.mapping,
        tuple(reports),
        overlap,
        cross,
        tuple(decisions),
        _best(reports, metrics),
        outer_index,
        tuple(limits),
        tuple(contributions),
    )
    LOGGER.info(
        "Round %d (outer %d): %d retain, %d refine, %d defer, %d discard; %d overlap clusters",
        round_index,
        outer_index,
        len(state.with_decision(Decision.RETAIN)),
        len(state.with_decision(Decision.REFINE)),
        len(state.with_decision(Decision.DEFER)),
        len(state.with_decision(Decision.DISCARD)),
        len(overlap.clusters),
    )
    return state, streaks


def run_loop(
    inputs: EvaluationInputs,
    plan: FoldPlan,
    stopping: StoppingRule,
    proposer: Proposer,
    outer_index: int = 0,
    settings: LoopSettings = LoopSettings(),
    items: Optional[Sequence[SurveyItem]] = None,
    log_path: Optional[str] = None,
    audit: Optional[AuditStore] = None,
    n_jobs: int = 1,
) -> List[IterationState]:
    """
    Iterate until the stopping rule fires and return every round's state.

    The last state's taxonomy and mapping are the frozen artifacts for this
    outer fold. A proposal that cannot be obtained or applied ends the loop
    with the failure recorded on the last round.
    """
    log = IterationLog(log_path)
    states: List[IterationState] = []
    streaks: Dict[str, int] = {}
    plateau = 0
    round_index = 0
    while True:
        state, streaks = evaluate_round(
            inputs, plan, outer_index, round_index, settings, streaks, stopping.discard_after, n_jobs
        )

        if states:
            if _gain(states[-1].best, state.best) < stopping.plateau_delta:
                plateau += 1
            else:
                plateau = 0

        target = _pick_target(state.decisions, state.reports, state.taxonomy, primary_metrics(inputs))
        status = "continue"
        if round_index >= stopping.max_rounds:
            status = "max_rounds"
        elif target is None:
            status = "no_refinement"
        elif plateau >= stopping.patience:
            status = "plateau"

        if status != "continue":
            state = replace(state, status=status)
            states.append(state)
            log.append(state)
            LOGGER.info("Refinement loop stopped after round %d: %s", round_index, status)
            return states

        cluster = list(state.overlap.cluster_of(target))
        try:
            request = _refinement_request(state, target, cluster, items, settings)
            response = request_proposal(proposer, request, settings.proposer_retries, audit)
            result = apply_refinement(
                state,
                cluster,
                response.payload,
                secondary_lo=settings.secondary_lo,
                secondary_hi=settings.secondary_hi,
                tau=settings.tau,
            )
        except (ProposerFailure, NeighborhoodViolation, AnchorViolation, ConstraintViolation) as error:
            LOGGER.error("Refinement of %s failed: %s", target, error)
            state = replace(state, status=f"failed:{type(error).__name__}")
            states.append(state)
            log.append(state)
            return states

        state = replace(
            state,
            refinement={
                "target": target,
                "cluster": cluster,
                "reallocation": response.payload.to_json(),
                "secondary_lo": settings.secondary_lo,
                "secondary_hi": settings.secondary_hi,
                "tau": settings.tau,
                "changed_items": list(result.changed_items),
                "findings": response.findings.to_json(),
            },
        )
        states.append(state)
        log.append(state)
        inputs = inputs.with_mapping(result.mapping, result.taxonomy)
        round_index += 1
