"""Permutation placebos for the incremental-validity statistic."""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .ecv import OUTER, Candidate, EvaluationInputs, Split, evaluate_candidates
from .errors import PreconditionError
from .harmonize import HarmonizedMatrix
from .instrument import OutcomeSpec, extract_outcome
from .mapping import MappingMatrix
from .math_helper import sample_sd

LOGGER = logging.getLogger(__name__)


class PlaceboKind(str, Enum):
    OUTCOME = "outcome"
    MAPPING = "mapping"


@dataclass(frozen=True)
class PlaceboReport:
    kind: PlaceboKind
    outcome_id: str
    metric: str
    candidate: str
    observed: float
    placebo: Tuple[float, ...]
    seed: int
    smooth: bool = False

    @property
    def draws(self) -> int:
        return len(self.placebo)

    @property
    def p_value(self) -> float:
        """Share of defined draws at or above the observed statistic."""
        finite = [value for value in self.placebo if np.isfinite(value)]
        exceed = sum(value >= self.observed for value in finite)
        if self.smooth:
            return (1 + exceed) / (1 + len(finite))
        return exceed / len(finite) if finite else float("nan")

    def summary(self) -> Mapping[str, float]:
        values = np.asarray(self.placebo, dtype=float)
        finite = values[np.isfinite(values)]
        if finite.size == 0:
            return {"mean": float("nan"), "sd": float("nan"), "min": float("nan"), "max": float("nan")}
        return {
            "mean": float(finite.mean()),
            "sd": sample_sd(finite),
            "min": float(finite.min()),
            "max": float(finite.max()),
        }

    def to_json(self) -> Mapping[str, object]:
        return {
            "kind": self.kind.value,
            "outcome_id": self.outcome_id,
            "metric": self.metric,
            "candidate": self.candidate,
            "draws": self.draws,
            "seed": self.seed,
            "observed": self.observed,
            "summary": self.summary(),
            "p_value": self.p_value,
            "smooth": self.smooth,
        }


def write_draws(report: PlaceboReport, path: str):
    """Histogram-ready CSV of the placebo draws."""
    frame = pd.DataFrame(
        {
            "draw": np.arange(report.draws),
            "delta": list(report.placebo),
            "observed": report.observed,
        }
    )
    frame.to_csv(path, index=False)


def _outcome(inputs: EvaluationInputs, outcome_id: Optional[str]) -> OutcomeSpec:
    if not inputs.outcomes:
        raise PreconditionError("placebo needs at least one outcome")
    return inputs.outcome(outcome_id) if outcome_id else inputs.outcomes[0]


def _group(inputs: EvaluationInputs, members: Optional[Sequence[str]]) -> Candidate:
    if members:
        return Candidate(tuple(members))
    loaded = set(inputs.mapping.subdim_ids)
    leaves = tuple(k for k in inputs.candidate_leaves() if k in loaded)
    if not leaves:
        raise PreconditionError("no candidate subdimension has mapped items")
    return Candidate(leaves)


def placebo_statistic(
    inputs: EvaluationInputs,
    splits: Sequence[Split],
    outcome: OutcomeSpec,
    members: Optional[Sequence[str]] = None,
) -> Tuple[float, str, str]:
    """Mean oriented gain of the candidate group on the outcome's primary metric."""
    inputs = replace(inputs, outcomes=(outcome,))
    candidate = _group(inputs, members)
    metric = inputs.metrics_for(outcome)[0].name
    reports = evaluate_candidates(inputs, splits, [candidate], OUTER)
    for report in reports:
        if report.metric == metric:
            return report.mean, metric, candidate.label
    return float("nan"), metric, candidate.label


def permute_outcome(h: HarmonizedMatrix, outcome: OutcomeSpec, rng: np.random.Generator) -> HarmonizedMatrix:
    """Shuffle the outcome among the rows of its evaluation sample."""
    y, mask = extract_outcome(h, outcome)
    rows = np.flatnonzero(mask)
    values = h.values.copy()
    column = h.item_ids.index(outcome.outcome_id)
    values[rows, column] = y[rows][rng.permutation(rows.size)]
    return replace(h, values=values)


def permute_mapping(w: MappingMatrix, leaves: Sequence[str], rng: np.random.Generator) -> MappingMatrix:
    """
    Redraw the subdimension labels of every mechanism row.

    Each row keeps its weights; the labels are drawn without replacement from
    the leaves, so simplex and sparsity pattern survive. Control rows stay.
    """
    leaves = sorted(leaves)
    rows = []
    for row in w.rows:
        if w.is_control(row):
            rows.append(row)
            continue
        if len(row.weights) > len(leaves):
            raise PreconditionError(f"row {row.item_id} has more weights than there are leaves")
        labels = rng.choice(leaves, size=len(row.weights), replace=False)
        rows.append(row.with_weights(zip((str(k) for k in labels), (v for _, v in row.weights))))
    return w.with_rows(rows)


def outcome_permutation(
    inputs: EvaluationInputs,
    splits: Sequence[Split],
    draws: int,
    seed: int,
    outcome_id: Optional[str] = None,
    members: Optional[Sequence[str]] = None,
    smooth: bool = False,
    n_jobs: int = 1,
) -> PlaceboReport:
    """Rerun the evaluation with outcome labels permuted within the evaluation sample."""
    if draws < 1:
        raise PreconditionError(f"draws must be at least 1, got {draws}")
    outcome = _outcome(inputs, outcome_id)
    members = tuple(members) if members else _group(inputs, None).members
    observed, metric, label = placebo_statistic(inputs, splits, outcome, members)

    def draw(index: int) -> float:
        rng = np.random.default_rng([seed, index])
        permuted = replace(inputs, h=permute_outcome(inputs.h, outcome, rng))
        return placebo_statistic(permuted, splits, outcome, members)[0]

    placebo = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(draw)(i) for i in range(draws))
    report = PlaceboReport(
        PlaceboKind.OUTCOME, outcome.outcome_id, metric, label, observed, tuple(placebo), seed, smooth
    )
    LOGGER.info("Outcome placebo: observed %.4f, p=%.3f over %d draws", observed, report.p_value, draws)
    return report


def mapping_permutation(
    inputs: EvaluationInputs,
    splits: Sequence[Split],
    draws: int,
    seed: int,
    outcome_id: Optional[str] = None,
    members: Optional[Sequence[str]] = None,
    smooth: bool = False,
    n_jobs: int = 1,
) -> PlaceboReport:
    """
    Rerun the evaluation with item-to-subdimension labels permuted within each row.

    The candidate group is fixed from the observed mapping; a draw that leaves a
    member without items is undefined and left out of the p-value.
    """
    if draws < 1:
        raise PreconditionError(f"draws must be at least 1, got {draws}")
    leaves = inputs.candidate_leaves()
    if len(leaves) < 2:
        raise PreconditionError("mapping permutation needs at least two candidate leaves")
    outcome = _outcome(inputs, outcome_id)
    members = tuple(members) if members else _group(inputs, None).members
    observed, metric, label = placebo_statistic(inputs, splits, outcome, members)

    def draw(index: int) -> float:
        rng = np.random.default_rng([seed, index])
        permuted = inputs.with_mapping(permute_mapping(inputs.mapping, leaves, rng))
        return placebo_statistic(permuted, splits, outcome, members)[0]

    placebo = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(draw)(i) for i in range(draws))
    report = PlaceboReport(
        PlaceboKind.MAPPING, outcome.outcome_id, metric, label, observed, tuple(placebo), seed, smooth
    )
    LOGGER.info("Mapping placebo: observed %.4f, p=%.3f over %d draws", observed, report.p_value, draws)
    return report
