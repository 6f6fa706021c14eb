"""
Discriminant-validity diagnostics: correlation screening, overlap clusters,
conditional contribution within clusters, and data-limitation flags.
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Collection, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .ecv import Candidate, DeltaReport, EvaluationInputs, Split, evaluate_candidates
from .errors import PreconditionError
from .mapping import MappingMatrix
from .scoring import ScoreCoverage, ScoreMatrix, score_coverage

LOGGER = logging.getLogger(__name__)

MIN_PAIR_ROWS = 3

# Gains at or below this size count as ties, and ties fail.
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class PairCorrelation:
    subdim_a: str
    subdim_b: str
    rho: float
    n: int


@dataclass(frozen=True)
class SkippedPair:
    subdim_a: str
    subdim_b: str
    n: int
    reason: str


@dataclass(frozen=True)
class OverlapReport:
    cutoff: float
    pairs: Tuple[PairCorrelation, ...]
    flagged: Tuple[PairCorrelation, ...]
    clusters: Tuple[Tuple[str, ...], ...]
    skipped: Tuple[SkippedPair, ...] = ()

    @property
    def flagged_subdims(self) -> List[str]:
        return sorted({k for cluster in self.clusters for k in cluster})

    def cluster_of(self, subdim_id: str) -> Optional[Tuple[str, ...]]:
        for cluster in self.clusters:
            if subdim_id in cluster:
                return cluster
        return None

    def top_pair(self) -> Optional[PairCorrelation]:
        if not self.pairs:
            return None
        return max(self.pairs, key=lambda pair: abs(pair.rho))

    def flagged_among(self, subdim_ids: Collection[str]) -> int:
        return sum(p.subdim_a in subdim_ids and p.subdim_b in subdim_ids for p in self.flagged)

    def to_json(self) -> Mapping[str, object]:
        return {
            "cutoff": self.cutoff,
            "flagged": [
                {"subdim_a": p.subdim_a, "subdim_b": p.subdim_b, "rho": p.rho, "n": p.n}
                for p in self.flagged
            ],
            "clusters": [list(cluster) for cluster in self.clusters],
            "skipped": [
                {"subdim_a": p.subdim_a, "subdim_b": p.subdim_b, "n": p.n, "reason": p.reason}
                for p in self.skipped
            ],
        }


def _clusters(flagged: Iterable[PairCorrelation]) -> Tuple[Tuple[str, ...], ...]:
    """Connected components of the flagged-pair graph."""
    flagged = list(flagged)
    nodes = sorted({k for pair in flagged for k in (pair.subdim_a, pair.subdim_b)})
    if not nodes:
        return ()
    index = {k: i for i, k in enumerate(nodes)}
    rows = [index[pair.subdim_a] for pair in flagged]
    cols = [index[pair.subdim_b] for pair in flagged]
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
    _, labels = connected_components(graph, directed=False)

    groups: Dict[int, List[str]] = {}
    for node, label in zip(nodes, labels):
        groups.setdefault(int(label), []).append(node)
    return tuple(sorted(tuple(sorted(group)) for group in groups.values()))


def correlation_screen(
    s: ScoreMatrix,
    cutoff: float,
    rows: Optional[Sequence[int]] = None,
    subdim_ids: Optional[Sequence[str]] = None,
) -> OverlapReport:
    """
    Flag score pairs with |rho| at or above the cutoff.

    Correlations are Pearson on pairwise-complete rows. Pairs with fewer than
    three complete rows or a constant side are skipped and recorded.
    """
    if not 0.0 < cutoff < 1.0:
        raise PreconditionError(f"cutoff must lie in (0, 1), got {cutoff}")
    subdim_ids = list(subdim_ids) if subdim_ids is not None else list(s.subdim_ids)
    values = s.values if rows is None else s.values[np.asarray(rows, dtype=int)]

    pairs, skipped = [], []
    for a, b in combinations(subdim_ids, 2):
        x = values[:, s.subdim_ids.index(a)]
        y = values[:, s.subdim_ids.index(b)]
        both = ~np.isnan(x) & ~np.isnan(y)
        n = int(both.sum())
        if n < MIN_PAIR_ROWS:
            skipped.append(SkippedPair(a, b, n, "insufficient_overlap_rows"))
            continue
        x, y = x[both], y[both]
        if np.std(x) == 0 or np.std(y) == 0:
            skipped.append(SkippedPair(a, b, n, "zero_variance"))
            continue
        pairs.append(PairCorrelation(a, b, float(np.corrcoef(x, y)[0, 1]), n))

    flagged = tuple(pair for pair in pairs if abs(pair.rho) >= cutoff)
    for pair in flagged:
        LOGGER.info("Overlap %s ~ %s: rho=%.3f", pair.subdim_a, pair.subdim_b, pair.rho)
    return OverlapReport(cutoff, tuple(pairs), flagged, _clusters(flagged), tuple(skipped))


@dataclass(frozen=True)
class ConditionalContributionResult:
    cluster: Tuple[str, ...]
    candidate: str
    outcome_id: str
    metric: str
    deltas: Tuple[float, ...]
    pass_share: float = 0.60

    @property
    def cluster_id(self) -> str:
        return "|".join(self.cluster)

    @property
    def share(self) -> float:
        if not self.deltas:
            return 0.0
        return sum(delta > TIE_TOLERANCE for delta in self.deltas) / len(self.deltas)

    @property
    def mean(self) -> float:
        return float(np.mean(self.deltas)) if self.deltas else float("nan")

    @property
    def passed(self) -> bool:
        return bool(self.deltas) and self.share >= self.pass_share and self.mean > TIE_TOLERANCE

    def to_json(self) -> Mapping[str, object]:
        return {
            "cluster": list(self.cluster),
            "candidate": self.candidate,
            "outcome_id": self.outcome_id,
            "metric": self.metric,
            "delta_mean": self.mean,
            "share_improve": self.share,
            "passed": self.passed,
        }


def _cluster_candidate(cluster: Sequence[str], candidate: str) -> Candidate:
    if len(cluster) < 2:
        raise PreconditionError("conditional contribution needs a cluster of at least two")
    if candidate not in cluster:
        raise PreconditionError(f"{candidate} is not in the cluster")
    return Candidate((candidate,), tuple(k for k in cluster if k != candidate))


def _results(
    cluster: Tuple[str, ...],
    candidate: str,
    reports: Iterable[DeltaReport],
    inputs: EvaluationInputs,
    pass_share: float,
) -> List[ConditionalContributionResult]:
    results = []
    for outcome in inputs.outcomes:
        primary = inputs.metrics_for(outcome)[0].name
        for report in reports:
            if report.outcome_id == outcome.outcome_id and report.metric == primary:
                results.append(
                    ConditionalContributionResult(
                        cluster, candidate, outcome.outcome_id, primary, report.deltas, pass_share
                    )
                )
    return results


def conditional_contribution(
    cluster: Sequence[str],
    candidate: str,
    inputs: EvaluationInputs,
    splits: Sequence[Split],
    pass_share: float = 0.60,
    n_jobs: int = 1,
) -> List[ConditionalContributionResult]:
    """
    Gain of the full cluster over the cluster without the candidate.

    One result per outcome, on that outcome's primary metric.
    """
    cluster = tuple(sorted(cluster))
    reports = evaluate_candidates(
        inputs, splits, [_cluster_candidate(cluster, candidate)], n_jobs=n_jobs
    )
    return _results(cluster, candidate, reports, inputs, pass_share)


def cluster_contributions(
    overlap: OverlapReport,
    inputs: EvaluationInputs,
    splits: Sequence[Split],
    pass_share: float = 0.60,
    n_jobs: int = 1,
) -> List[ConditionalContributionResult]:
    """Conditional contribution of every member of every overlap cluster."""
    targets = [(cluster, member) for cluster in overlap.clusters for member in cluster]
    if not targets:
        return []
    candidates = [_cluster_candidate(cluster, member) for cluster, member in targets]
    reports = evaluate_candidates(inputs, splits, candidates, n_jobs=n_jobs)

    results = []
    for (cluster, member), candidate in zip(targets, candidates):
        mine = [report for report in reports if report.members == candidate.members]
        results.extend(_results(cluster, member, mine, inputs, pass_share))
    return results


@dataclass(frozen=True)
class DataLimitThresholds:
    min_n: int = 100
    min_items: int = 2
    min_sd: float = 0.05

    def to_json(self) -> Mapping[str, float]:
        return {"min_n": self.min_n, "min_items": self.min_items, "min_sd": self.min_sd}


@dataclass(frozen=True)
class DataLimitFlag:
    subdim: str
    reasons: Tuple[str, ...]
    thresholds: DataLimitThresholds

    def to_json(self) -> Mapping[str, object]:
        return {
            "subdim": self.subdim,
            "reasons": list(self.reasons),
            "thresholds": self.thresholds.to_json(),
        }


def data_limit_flags(
    s: ScoreMatrix,
    coverage: Optional[Mapping[str, ScoreCoverage]] = None,
    thresholds: DataLimitThresholds = DataLimitThresholds(),
    mapping: Optional[MappingMatrix] = None,
    degenerate_items: Collection[str] = (),
) -> List[DataLimitFlag]:
    """Flag subdimensions whose support is too thin to judge."""
    coverage = coverage if coverage is not None else score_coverage(s)
    flags = []
    for subdim_id in s.subdim_ids:
        support = coverage.get(subdim_id, ScoreCoverage(0, 0))
        reasons = []
        if support.n_nonmissing < thresholds.min_n:
            reasons.append("low_n")
        if support.item_count < thresholds.min_items:
            reasons.append("few_items")

        column = s.column(subdim_id)
        column = column[~np.isnan(column)]
        if column.size >= 2 and float(np.std(column)) < thresholds.min_sd:
            reasons.append("low_variance")

        if mapping is not None and degenerate_items:
            loaded = mapping.items_loading_on([subdim_id])
            if any(item_id in degenerate_items for item_id in loaded):
                reasons.append("degenerate_columns")

        if reasons:
            flags.append(DataLimitFlag(subdim_id, tuple(reasons), thresholds))
    return flags
