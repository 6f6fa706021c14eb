"""Build respondent-level subdimension scores from harmonized responses."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import PreconditionError, StaleMapping
from .harmonize import HarmonizedMatrix
from .instrument import RESPONDENT_COLUMN
from .mapping import MappingMatrix

LOGGER = logging.getLogger(__name__)


class ScoringRuleKind(str, Enum):
    WEIGHTED_MEAN = "weighted_mean"
    WEIGHTED_SUM = "weighted_sum"
    ZSCORE_THEN_MEAN = "zscore_then_mean"
    COVERAGE_REWEIGHTED_MEAN = "coverage_reweighted_mean"


@dataclass(frozen=True)
class ScoringRule:
    kind: ScoringRuleKind = ScoringRuleKind.WEIGHTED_MEAN
    post_standardize: bool = False

    @classmethod
    def parse(cls, text: str, post_standardize: bool = False) -> "ScoringRule":
        return cls(ScoringRuleKind(text), post_standardize)


@dataclass(frozen=True)
class ScoreMatrix:
    """Scores S_ik with NaN for MISSING, plus per-cell contributing-item counts."""

    respondent_ids: Tuple[str, ...]
    subdim_ids: Tuple[str, ...]
    values: np.ndarray
    counts: np.ndarray
    item_counts: Mapping[str, int] = field(default_factory=dict)
    rule: ScoringRule = ScoringRule()

    def __post_init__(self):
        shape = (len(self.respondent_ids), len(self.subdim_ids))
        if self.values.shape != shape or self.counts.shape != shape:
            raise PreconditionError("score arrays do not match the respondent and subdim ids")
        self.values.flags.writeable = False

    @property
    def n_rows(self) -> int:
        return len(self.respondent_ids)

    def column(self, subdim_id: str) -> np.ndarray:
        return self.values[:, self.subdim_ids.index(subdim_id)]

    def columns(self, subdim_ids: Sequence[str]) -> np.ndarray:
        return self.values[:, [self.subdim_ids.index(k) for k in subdim_ids]]

    def with_values(self, values: np.ndarray) -> "ScoreMatrix":
        return ScoreMatrix(
            self.respondent_ids, self.subdim_ids, values, self.counts, self.item_counts, self.rule
        )


def build_scores(
    h: HarmonizedMatrix,
    w: MappingMatrix,
    rule: ScoringRule = ScoringRule(),
    subdim_ids: Optional[Sequence[str]] = None,
) -> ScoreMatrix:
    """
    Aggregate item values into subdimension scores.

    Missing item values leave both numerator and denominator; a score with a
    zero denominator is MISSING.

    Parameters
    ----------
    h : HarmonizedMatrix
        Item values, already fold-transformed when the rule needs z-scores.
    w : MappingMatrix
        Weights; row scale factors are used by the coverage rule only.
    rule : ScoringRule
        Aggregation rule. Post-standardization is applied by ScoreStandardizer.
    subdim_ids : sequence of str, optional
        Score columns to build, for example every taxonomy leaf. Defaults to the
        subdimensions the mapping references.
    """
    for item_id in w.item_ids:
        if item_id not in h.item_ids:
            raise StaleMapping(f"mapped item {item_id} is not in the harmonized matrix", item_id=item_id)
    if rule.kind == ScoringRuleKind.ZSCORE_THEN_MEAN:
        unscaled = [i for i in w.item_ids if i not in h.standardized_items]
        if unscaled:
            raise PreconditionError(
                "zscore_then_mean needs fold-standardized items", items=",".join(unscaled)
            )

    subdim_ids = tuple(subdim_ids) if subdim_ids is not None else tuple(w.subdim_ids)
    item_ids = [item_id for item_id in h.item_ids if w.has_row(item_id)]
    x = h.values[:, [h.item_ids.index(item_id) for item_id in item_ids]]
    scaled = rule.kind == ScoringRuleKind.COVERAGE_REWEIGHTED_MEAN
    weights = w.dense(item_ids, subdim_ids, scaled=scaled)

    present = ~np.isnan(x)
    numerator = np.where(present, x, 0.0) @ weights
    denominator = present.astype(float) @ weights
    defined = denominator > 0
    if rule.kind == ScoringRuleKind.WEIGHTED_SUM:
        values = np.where(defined, numerator, np.nan)
    else:
        values = np.divide(numerator, denominator, out=np.full_like(numerator, np.nan), where=defined)

    loads = w.dense(item_ids, subdim_ids) > 0
    counts = present.astype(int) @ loads.astype(int)
    item_counts = {k: int(loads[:, c].sum()) for c, k in enumerate(subdim_ids)}
    return ScoreMatrix(h.respondent_ids, subdim_ids, values, counts, item_counts, rule)


@dataclass(frozen=True)
class ScoreCoverage:
    n_nonmissing: int
    item_count: int


def score_coverage(s: ScoreMatrix) -> Dict[str, ScoreCoverage]:
    """Non-missing respondents and contributing items per subdimension."""
    result = {}
    for c, subdim_id in enumerate(s.subdim_ids):
        n = int((~np.isnan(s.values[:, c])).sum())
        result[subdim_id] = ScoreCoverage(n, s.item_counts.get(subdim_id, 0))
    return result


@dataclass(frozen=True)
class ScoreStandardizer:
    """Per-score mean and sd fitted on training rows of S."""

    subdim_ids: Tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, train: ScoreMatrix) -> "ScoreStandardizer":
        mean = np.zeros(len(train.subdim_ids))
        sd = np.ones(len(train.subdim_ids))
        for c in range(len(train.subdim_ids)):
            column = train.values[:, c]
            column = column[~np.isnan(column)]
            if column.size == 0:
                continue
            mean[c] = float(np.mean(column))
            spread = float(np.std(column))
            if spread > 0:
                sd[c] = spread
        return cls(train.subdim_ids, mean, sd)

    def apply(self, s: ScoreMatrix) -> ScoreMatrix:
        if s.subdim_ids != self.subdim_ids:
            raise PreconditionError("standardizer was fitted on different score columns")
        return s.with_values((s.values - self.mean) / self.sd)


def write_scores(s: ScoreMatrix, path: str):
    """Write scores as CSV with MISSING as an empty cell."""
    frame = pd.DataFrame(s.values, columns=list(s.subdim_ids))
    frame.insert(0, RESPONDENT_COLUMN, list(s.respondent_ids))
    frame.to_csv(path, index=False, na_rep="", encoding="utf-8")
    LOGGER.info("Wrote %d x %d scores to %s", s.n_rows, len(s.subdim_ids), path)
