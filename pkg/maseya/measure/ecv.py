"""
Embedded cross-validation.

Outer folds are untouched evaluation sets. Inner folds partition each outer
training set and drive every refinement decision. Each split fits its own
harmonization transform and score standardization on its training rows.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from sklearn.model_selection import KFold, RepeatedKFold, RepeatedStratifiedKFold, StratifiedKFold

from .errors import LeakageError, PreconditionError, StaleVersion, TooFewRows
from .evalcore import MetricSpec, ModelSpec, Task, fit_predict, get_metric, metrics_for
from .harmonize import (
    HarmonizationRule,
    HarmonizedMatrix,
    apply_fold_transform,
    fit_fold_transform,
)
from .instrument import OutcomeKind, OutcomeSpec, extract_outcome
from .mapping import HardMapping, MappingMatrix, coverage_weights, reweight_by_coverage
from .math_helper import sample_sd
from .scoring import (
    ScoreMatrix,
    ScoreStandardizer,
    ScoringRule,
    ScoringRuleKind,
    build_scores,
)
from .taxonomy import AnchorRole, Taxonomy

LOGGER = logging.getLogger(__name__)

INNER = "inner"
OUTER = "outer"


@dataclass(frozen=True)
class Split:
    """Sorted global row indices of one train/test split."""

    outer: int
    repeat: int
    fold: int
    train: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class FoldPlan:
    n: int
    k_out: int
    k_in: int
    repeats: int
    seed: int
    outer: Tuple[Split, ...]
    inner: Tuple[Tuple[Split, ...], ...]

    def __post_init__(self):
        self.verify()

    def verify(self):
        """Raise LeakageError unless the folds keep every outer test set untouched."""
        tests = np.sort(np.concatenate([split.test for split in self.outer]))
        if not np.array_equal(tests, np.arange(self.n)):
            raise LeakageError("outer test folds do not partition the rows")
        if len(self.inner) != len(self.outer):
            raise LeakageError("every outer fold needs its own inner splits")

        for split, inner_splits in zip(self.outer, self.inner):
            test_rows = set(split.test.tolist())
            train_rows = set(split.train.tolist())
            if test_rows & train_rows or len(test_rows) + len(train_rows) != self.n:
                raise LeakageError(f"outer fold {split.outer} mixes train and test rows")
            for inner in inner_splits:
                used = set(inner.train.tolist()) | set(inner.test.tolist())
                if used & test_rows:
                    raise LeakageError(
                        f"inner split {inner.repeat}/{inner.fold} reads outer test rows of fold {split.outer}"
                    )
                if set(inner.train.tolist()) & set(inner.test.tolist()):
                    raise LeakageError(f"inner split {inner.repeat}/{inner.fold} mixes train and test rows")

    def inner_splits(self, outer_index: int) -> Tuple[Split, ...]:
        return self.inner[outer_index]

    def to_json(self) -> Mapping[str, int]:
        return {
            "n": self.n,
            "k_out": self.k_out,
            "k_in": self.k_in,
            "repeats": self.repeats,
            "seed": self.seed,
        }


def _strata(labels: Optional[Sequence[float]], n: int) -> Optional[np.ndarray]:
    if labels is None:
        return None
    labels = np.asarray(labels, dtype=float)
    if labels.shape != (n,):
        raise PreconditionError("labels must have one entry per row")
    finite = labels[~np.isnan(labels)]
    if not np.isin(finite, (0.0, 1.0)).all():
        raise PreconditionError("stratification labels must be 0, 1, or missing")
    # Missing labels form their own stratum.
    return np.where(np.isnan(labels), 2, labels).astype(int)


def make_fold_plan(
    n: int,
    labels: Optional[Sequence[float]] = None,
    k_out: int = 5,
    k_in: int = 5,
    repeats: int = 5,
    seed: int = 0,
) -> FoldPlan:
    """Assign rows to outer folds and repeated inner folds, stratified when labels are given."""
    if k_out < 2 or k_in < 2:
        raise PreconditionError(f"fold counts must be at least 2, got {k_out} and {k_in}")
    if repeats < 1:
        raise PreconditionError(f"repeats must be at least 1, got {repeats}")
    if n < k_out * k_in:
        raise TooFewRows(f"{n} rows cannot fill {k_out} x {k_in} folds", n=n)

    strata = _strata(labels, n)
    rows = np.arange(n)
    if strata is None:
        outer_splitter = KFold(n_splits=k_out, shuffle=True, random_state=seed)
        outer_pairs = outer_splitter.split(rows)
    else:
        outer_splitter = StratifiedKFold(n_splits=k_out, shuffle=True, random_state=seed)
        outer_pairs = outer_splitter.split(rows, strata)

    outer = []
    inner = []
    for k, (train, test) in enumerate(outer_pairs):
        train, test = np.sort(train), np.sort(test)
        outer.append(Split(k, -1, k, train, test))

        inner_seed = seed + 1 + k
        if strata is None:
            splitter = RepeatedKFold(n_splits=k_in, n_repeats=repeats, random_state=inner_seed)
            pairs = splitter.split(train)
        else:
            splitter = RepeatedStratifiedKFold(
                n_splits=k_in, n_repeats=repeats, random_state=inner_seed
            )
            pairs = splitter.split(train, strata[train])
        inner.append(
            tuple(
                Split(k, i // k_in, i % k_in, np.sort(train[a]), np.sort(train[b]))
                for i, (a, b) in enumerate(pairs)
            )
        )

    LOGGER.info(
        "Fold plan: %d rows, %d outer folds, %d x %d inner splits each", n, k_out, repeats, k_in
    )
    return FoldPlan(n, k_out, k_in, repeats, seed, tuple(outer), tuple(inner))


@dataclass(frozen=True)
class Candidate:
    """Subdimensions added jointly to a baseline that may include retained scores."""

    members: Tuple[str, ...]
    extra: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.members:
            raise PreconditionError("a candidate needs at least one subdimension")
        overlap = set(self.members) & set(self.extra)
        if overlap:
            raise PreconditionError(
                "candidate is already in the baseline", subdims=",".join(sorted(overlap))
            )

    @classmethod
    def of(cls, value: Union[str, Sequence[str], "Candidate"], extra: Sequence[str] = ()):
        if isinstance(value, Candidate):
            return value
        if isinstance(value, str):
            return cls((value,), tuple(extra))
        return cls(tuple(value), tuple(extra))

    @property
    def label(self) -> str:
        return "+".join(self.members)


@dataclass(frozen=True)
class EvaluationInputs:
    """Everything one validation run reads; frozen per outer fold for final evaluation."""

    h: HarmonizedMatrix
    rules: Tuple[HarmonizationRule, ...]
    taxonomy: Taxonomy
    mapping: MappingMatrix
    outcomes: Tuple[OutcomeSpec, ...]
    covariates: Tuple[str, ...] = ()
    scoring: ScoringRule = ScoringRule()
    l2: float = 1e-6
    max_iter: int = 1000
    metric_names: Mapping[str, Tuple[str, ...]] = field(default_factory=dict)

    def with_mapping(self, mapping: MappingMatrix, taxonomy: Optional[Taxonomy] = None):
        return replace(self, mapping=mapping, taxonomy=taxonomy or self.taxonomy)

    def outcome(self, outcome_id: str) -> OutcomeSpec:
        for outcome in self.outcomes:
            if outcome.outcome_id == outcome_id:
                return outcome
        raise PreconditionError(f"no outcome {outcome_id!r}")

    def model_for(self, outcome: OutcomeSpec) -> ModelSpec:
        task = Task.BINARY if outcome.kind == OutcomeKind.BINARY else Task.CONTINUOUS
        return ModelSpec(task, self.l2, self.max_iter)

    def metrics_for(self, outcome: OutcomeSpec) -> List[MetricSpec]:
        names = self.metric_names.get(outcome.outcome_id)
        if names:
            return [get_metric(name) for name in names]
        return metrics_for(self.model_for(outcome).task)

    def covariates_for(self, outcome: OutcomeSpec) -> Tuple[str, ...]:
        if outcome.covariate_item_ids is not None:
            return tuple(outcome.covariate_item_ids)
        return self.covariates

    def candidate_leaves(self) -> List[str]:
        """Leaves under mechanism anchors."""
        roles = {anchor.anchor_id: anchor.role for anchor in self.taxonomy.anchors}
        return [s.subdim_id for s in self.taxonomy.leaves if roles[s.anchor_id] == AnchorRole.MECHANISM]

    def check_versions(self):
        if self.mapping.taxonomy_version != self.taxonomy.version:
            raise StaleVersion(
                f"mapping v{self.mapping.version} targets taxonomy v{self.mapping.taxonomy_version}, "
                f"frozen taxonomy is v{self.taxonomy.version}"
            )


@dataclass(frozen=True)
class DeltaReport:
    """Per-fold incremental gains of one candidate on one outcome and metric."""

    candidate: str
    members: Tuple[str, ...]
    outcome_id: str
    metric: str
    stage: str
    deltas: Tuple[float, ...]
    raw_deltas: Tuple[float, ...]
    n: int
    items: int
    mapping_version: int = 0
    taxonomy_version: int = 0
    skipped_folds: int = 0

    @property
    def folds(self) -> int:
        return len(self.deltas)

    @property
    def mean(self) -> float:
        return float(np.mean(self.deltas)) if self.deltas else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.deltas)) if self.deltas else float("nan")

    @property
    def sd(self) -> float:
        return sample_sd(self.deltas)

    @property
    def share(self) -> float:
        """Share of listed folds with an oriented improvement."""
        if not self.deltas:
            return 0.0
        return sum(delta > 0 for delta in self.deltas) / len(self.deltas)

    def to_json(self) -> Mapping[str, object]:
        return {
            "candidate": self.candidate,
            "members": list(self.members),
            "outcome_id": self.outcome_id,
            "metric": self.metric,
            "stage": self.stage,
            "items": self.items,
            "n": self.n,
            "delta_mean": self.mean,
            "delta_median": self.median,
            "delta_sd": self.sd,
            "share_improve": self.share,
            "deltas": list(self.deltas),
            "raw_deltas": list(self.raw_deltas),
            "skipped_folds": self.skipped_folds,
            "mapping_version": self.mapping_version,
            "taxonomy_version": self.taxonomy_version,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, object]) -> "DeltaReport":
        return cls(
            str(data["candidate"]),
            tuple(data.get("members", [data["candidate"]])),
            str(data["outcome_id"]),
            str(data["metric"]),
            str(data.get("stage", INNER)),
            tuple(float(x) for x in data.get("deltas", [])),
            tuple(float(x) for x in data.get("raw_deltas", [])),
            int(data.get("n", 0)),
            int(data.get("items", 0)),
            int(data.get("mapping_version", 0)),
            int(data.get("taxonomy_version", 0)),
            int(data.get("skipped_folds", 0)),
        )


class Label(str, Enum):
    SIGNAL = "signal"
    WEAK_SIGNAL = "weak_signal"
    NOISE_LIKE = "noise_like"


@dataclass(frozen=True)
class Thresholds:
    signal_share: float = 0.90
    weak_share: float = 0.60

    def to_json(self) -> Mapping[str, float]:
        return {"signal_share": self.signal_share, "weak_share": self.weak_share}


@dataclass(frozen=True)
class TriageLabel:
    label: Label
    thresholds: Thresholds


def classify_values(mean: float, share: float, thresholds: Thresholds = Thresholds()) -> Label:
    if not np.isfinite(mean) or mean <= 0:
        return Label.NOISE_LIKE
    if share >= thresholds.signal_share:
        return Label.SIGNAL
    if share >= thresholds.weak_share:
        return Label.WEAK_SIGNAL
    return Label.NOISE_LIKE


def classify(report: DeltaReport, thresholds: Thresholds = Thresholds()) -> TriageLabel:
    """Label from the oriented mean gain and the stability share."""
    return TriageLabel(classify_values(report.mean, report.share, thresholds), thresholds)


@dataclass(frozen=True)
class FoldContext:
    """Fold-transformed features of one split, shared by every candidate."""

    split: Split
    covariates: Tuple[str, ...]
    x_train: np.ndarray
    x_test: np.ndarray
    scores_train: ScoreMatrix
    scores_test: ScoreMatrix
    targets_train: Mapping[str, Tuple[np.ndarray, np.ndarray]]
    targets_test: Mapping[str, Tuple[np.ndarray, np.ndarray]]
    degenerate_items: FrozenSet[str] = frozenset()


def _fit_transform(inputs: "EvaluationInputs", split: Split):
    return fit_fold_transform(
        inputs.h,
        split.train,
        inputs.rules,
        force_standardize=inputs.scoring.kind == ScoringRuleKind.ZSCORE_THEN_MEAN,
    )


def degenerate_training_items(inputs: "EvaluationInputs", splits: Sequence[Split]) -> FrozenSet[str]:
    """Items constant on the whole sample or on the training rows of any split."""
    found = set(inputs.h.degenerate_items)
    for split in splits:
        found.update(_fit_transform(inputs, split).degenerate_items)
    return frozenset(found)


def build_fold_context(
    inputs: EvaluationInputs, split: Split, score_ids: Sequence[str]
) -> FoldContext:
    """Fit every transform on the split's training rows and apply it to both sides."""
    h = inputs.h
    scoring = inputs.scoring
    transform = _fit_transform(inputs, split)
    h_train = apply_fold_transform(h, transform, split.train)
    h_test = apply_fold_transform(h, transform, split.test)

    mapping = inputs.mapping
    if scoring.kind == ScoringRuleKind.COVERAGE_REWEIGHTED_MEAN:
        mapping = reweight_by_coverage(mapping, coverage_weights(h, split.train))

    scores_train = build_scores(h_train, mapping, scoring, score_ids)
    scores_test = build_scores(h_test, mapping, scoring, score_ids)
    if scoring.post_standardize:
        standardizer = ScoreStandardizer.fit(scores_train)
        scores_train = standardizer.apply(scores_train)
        scores_test = standardizer.apply(scores_test)

    covariates = tuple(dict.fromkeys(c for o in inputs.outcomes for c in inputs.covariates_for(o)))
    for item_id in covariates:
        if item_id not in h.item_ids:
            raise PreconditionError(f"covariate {item_id} was not harmonized", item_id=item_id)
    columns = [h.item_ids.index(item_id) for item_id in covariates]

    targets_train = {}
    targets_test = {}
    for outcome in inputs.outcomes:
        y, mask = extract_outcome(h, outcome)
        targets_train[outcome.outcome_id] = (y[split.train], mask[split.train])
        targets_test[outcome.outcome_id] = (y[split.test], mask[split.test])

    return FoldContext(
        split,
        covariates,
        h_train.values[:, columns],
        h_test.values[:, columns],
        scores_train,
        scores_test,
        targets_train,
        targets_test,
        transform.degenerate_items,
    )


def _fold_metrics(
    inputs: EvaluationInputs,
    context: FoldContext,
    candidate: Candidate,
    outcome: OutcomeSpec,
) -> Dict[str, Tuple[float, float]]:
    """Baseline and augmented metric values on identical rows; empty when the fold is unusable."""
    columns = [context.covariates.index(c) for c in inputs.covariates_for(outcome)]

    def designs(x: np.ndarray, scores: ScoreMatrix):
        base = np.hstack([x[:, columns], scores.columns(candidate.extra)])
        return base, np.hstack([base, scores.columns(candidate.members)])

    base_train, aug_train = designs(context.x_train, context.scores_train)
    base_test, aug_test = designs(context.x_test, context.scores_test)
    y_train, mask_train = context.targets_train[outcome.outcome_id]
    y_test, mask_test = context.targets_test[outcome.outcome_id]

    keep_train = mask_train & ~np.isnan(aug_train).any(axis=1)
    keep_test = mask_test & ~np.isnan(aug_test).any(axis=1)
    if keep_train.sum() < 2 or keep_test.sum() < 1:
        return {}
    model = inputs.model_for(outcome)
    if model.task == Task.BINARY and np.unique(y_train[keep_train]).size < 2:
        return {}

    base = fit_predict(base_train[keep_train], y_train[keep_train], base_test[keep_test], model)
    aug = fit_predict(aug_train[keep_train], y_train[keep_train], aug_test[keep_test], model)
    truth = y_test[keep_test]
    return {
        metric.name: (metric(base, truth), metric(aug, truth)) for metric in inputs.metrics_for(outcome)
    }


def _evaluate(
    pairs: Sequence[Tuple[EvaluationInputs, Split]],
    candidates: Sequence[Candidate],
    stage: str,
    n_jobs: int,
) -> List[DeltaReport]:
    score_ids = sorted({k for c in candidates for k in c.members + c.extra})

    def run(inputs: EvaluationInputs, split: Split):
        context = build_fold_context(inputs, split, score_ids)
        return [
            [_fold_metrics(inputs, context, candidate, outcome) for outcome in inputs.outcomes]
            for candidate in candidates
        ]

    per_split = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(run)(inputs, split) for inputs, split in pairs
    )

    reference = pairs[0][0]
    coverage = build_scores(reference.h, reference.mapping, ScoringRule(), score_ids)
    reports = []
    for c, candidate in enumerate(candidates):
        present = ~np.isnan(coverage.columns(candidate.members)).any(axis=1)
        items = sum(coverage.item_counts.get(k, 0) for k in candidate.members)
        for o, outcome in enumerate(reference.outcomes):
            _, mask = extract_outcome(reference.h, outcome)
            n = int((mask & present).sum())
            for metric in reference.metrics_for(outcome):
                deltas, raw, skipped = [], [], 0
                for result in per_split:
                    values = result[c][o].get(metric.name)
                    if values is None or not np.all(np.isfinite(values)):
                        skipped += 1
                        continue
                    difference = values[1] - values[0]
                    raw.append(float(difference))
                    deltas.append(float(metric.orient(difference)))
                if skipped:
                    LOGGER.debug(
                        "%s on %s/%s skipped %d folds", candidate.label, outcome.outcome_id, metric.name, skipped
                    )
                reports.append(
                    DeltaReport(
                        candidate.label,
                        candidate.members,
                        outcome.outcome_id,
                        metric.name,
                        stage,
                        tuple(deltas),
                        tuple(raw),
                        n,
                        items,
                        reference.mapping.version,
                        reference.taxonomy.version,
                        skipped,
                    )
                )
    return reports


def evaluate_candidates(
    inputs: EvaluationInputs,
    splits: Sequence[Split],
    candidates: Optional[Sequence[Union[str, Sequence[str], Candidate]]] = None,
    stage: str = INNER,
    n_jobs: int = 1,
) -> List[DeltaReport]:
    """Delta reports for several candidates over the same splits."""
    if candidates is None:
        candidates = inputs.candidate_leaves()
    candidates = [Candidate.of(candidate) for candidate in candidates]
    if not candidates or not splits:
        return []
    return _evaluate([(inputs, split) for split in splits], candidates, stage, n_jobs)


def incremental_validity(
    candidate: Union[str, Sequence[str], Candidate],
    inputs: EvaluationInputs,
    plan: FoldPlan,
    outer_index: int = 0,
    extra: Sequence[str] = (),
    n_jobs: int = 1,
) -> List[DeltaReport]:
    """
    Gain from adding a candidate to the baseline on every inner split of one outer fold.

    Rows missing the candidate, a baseline feature, or the outcome are dropped
    from both models, so each fold compares identical samples.
    """
    candidate = Candidate.of(candidate, extra)
    return evaluate_candidates(inputs, plan.inner_splits(outer_index), [candidate], INNER, n_jobs)


def outer_evaluate(
    frozen: Union[EvaluationInputs, Sequence[EvaluationInputs]],
    plan: FoldPlan,
    candidates: Optional[Sequence[Union[str, Sequence[str], Candidate]]] = None,
    n_jobs: int = 1,
) -> List[DeltaReport]:
    """
    Evaluate frozen artifacts once per outer fold.

    `frozen` is either one set of artifacts used for every outer fold or one
    set per outer fold, as produced by refining inside each outer training set.
    """
    if isinstance(frozen, EvaluationInputs):
        frozen = [frozen] * plan.k_out
    frozen = list(frozen)
    if len(frozen) != plan.k_out:
        raise PreconditionError(f"need {plan.k_out} frozen artifact sets, got {len(frozen)}")
    for inputs in frozen:
        inputs.check_versions()

    if candidates is None:
        candidates = list(dict.fromkeys(k for inputs in frozen for k in inputs.candidate_leaves()))
    candidates = [Candidate.of(candidate) for candidate in candidates]
    pairs = list(zip(frozen, plan.outer))
    return _evaluate(pairs, candidates, OUTER, n_jobs)


def compare_hard_soft(
    inputs: EvaluationInputs,
    hard: HardMapping,
    plan: FoldPlan,
    outer_index: int = 0,
    n_jobs: int = 1,
) -> Mapping[str, List[DeltaReport]]:
    """Incremental validity of hard-mapping dimensions and soft-mapping leaves on the same splits."""
    splits = plan.inner_splits(outer_index)
    soft = evaluate_candidates(inputs, splits, None, INNER, n_jobs)

    mechanism_items = {
        row.item_id for row in inputs.mapping.rows if not inputs.mapping.is_control(row)
    }
    dimensions = sorted({hard[i] for i in hard.assignments if i in mechanism_items})
    harmonized = HardMapping(
        {i: d for i, d in hard.assignments.items() if i in inputs.h.item_ids}
    )
    hard_matrix = harmonized.as_mapping_matrix(inputs.taxonomy.version)
    hard_inputs = inputs.with_mapping(hard_matrix)
    return {
        "soft": soft,
        "hard": evaluate_candidates(hard_inputs, splits, dimensions, INNER, n_jobs),
    }
