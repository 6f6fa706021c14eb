"""
Convert raw response tokens into numeric values and fit fold-local transforms.

Winsorization cuts, means, and standard deviations are only ever computed from
the rows a FoldTransform was fitted on.
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from .errors import (
    CodeTableGap,
    DuplicateId,
    LeakageError,
    MissingRule,
    PreconditionError,
    SchemaError,
    ShapeMismatch,
)
from .instrument import ResponseMatrix, SurveyItem, Usage
from .math_helper import lower_quantile

LOGGER = logging.getLogger(__name__)

# Define several ways to spell out binary values.
YES_REGEX = re.compile(r"y(?:es)?|t(?:rue)?|1", re.I)
NO_REGEX = re.compile(r"n(?:o)?|f(?:alse)?|0", re.I)

DEFAULT_WINSORIZE = (0.01, 0.99)


class RuleKind(str, Enum):
    IDENTITY_ORDINAL = "identity_ordinal"
    CATEGORICAL = "categorical_to_ordered_codes"
    LOG1P_NUMERIC = "log1p_numeric"
    IDENTITY_NUMERIC = "identity_numeric"
    BINARY_01 = "binary_01"
    DROP = "drop"


class RuleParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    code_table: Optional[Dict[str, Optional[float]]] = None
    winsorize: Optional[Tuple[float, float]] = DEFAULT_WINSORIZE
    standardize: bool = True

    @field_validator("winsorize")
    @classmethod
    def _quantiles_ordered(cls, value):
        if value is not None and not 0.0 <= value[0] < value[1] <= 1.0:
            raise ValueError(f"winsorize quantiles must satisfy 0 <= lo < hi <= 1, got {value}")
        return value


class HarmonizationRule(BaseModel):
    """How one item's tokens become numbers."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    item_id: str
    kind: RuleKind
    params: RuleParams = RuleParams()


@dataclass(frozen=True)
class HarmonizedMatrix:
    """Numeric responses, respondents by items; NaN is MISSING."""

    respondent_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    values: np.ndarray
    induced_missing: Mapping[str, int] = field(default_factory=dict)
    outcome_items: FrozenSet[str] = frozenset()
    standardized_items: FrozenSet[str] = frozenset()
    degenerate_items: FrozenSet[str] = frozenset()

    def __post_init__(self):
        if self.values.shape != (len(self.respondent_ids), len(self.item_ids)):
            raise ShapeMismatch(
                "harmonized values do not match the respondent and item ids",
                shape=self.values.shape,
            )
        self.values.flags.writeable = False

    @property
    def n_rows(self) -> int:
        return len(self.respondent_ids)

    def column(self, item_id: str) -> np.ndarray:
        return self.values[:, self.item_ids.index(item_id)]

    def take(self, rows: Sequence[int]) -> "HarmonizedMatrix":
        """Subset rows without transforming them."""
        rows = np.asarray(rows, dtype=int)
        return HarmonizedMatrix(
            tuple(self.respondent_ids[i] for i in rows),
            self.item_ids,
            self.values[rows].copy(),
            self.induced_missing,
            self.outcome_items,
            self.standardized_items,
            self.degenerate_items,
        )


def load_rules(path: str) -> List[HarmonizationRule]:
    with open(path, encoding="utf-8") as stream:
        try:
            records = json.load(stream)
        except json.JSONDecodeError as error:
            raise SchemaError(f"{path} is not valid JSON: {error}") from error
    if not isinstance(records, list):
        raise SchemaError(f"{path} must hold a list of rules")
    try:
        return [HarmonizationRule.model_validate(record) for record in records]
    except ValidationError as error:
        raise SchemaError(f"malformed rule in {path}: {error}") from error


def save_rules(rules: Iterable[HarmonizationRule], path: str):
    with open(path, "w", encoding="utf-8") as stream:
        json.dump([rule.model_dump(mode="json") for rule in rules], stream, indent=2)


def _parse_real(token: str) -> float:
    try:
        value = float(token)
    except ValueError:
        return math.nan
    return value if math.isfinite(value) else math.nan


def _code_token(token: str, item: SurveyItem, rule: HarmonizationRule) -> float:
    """Map one non-missing token to a number; NaN marks rule-induced missingness."""
    kind = rule.kind
    if kind == RuleKind.IDENTITY_ORDINAL:
        if token not in item.option_labels:
            raise CodeTableGap(
                f"{token!r} is not an option of ordinal item {item.item_id}",
                item_id=item.item_id,
                token=token,
            )
        return float(item.option_labels.index(token))

    if kind == RuleKind.CATEGORICAL:
        table = rule.params.code_table or {}
        if token not in table:
            raise CodeTableGap(
                f"{token!r} has no code for item {item.item_id}", item_id=item.item_id, token=token
            )
        code = table[token]
        return math.nan if code is None else float(code)

    if kind == RuleKind.LOG1P_NUMERIC:
        value = _parse_real(token)
        return math.log1p(value) if value > -1.0 else math.nan

    if kind == RuleKind.IDENTITY_NUMERIC:
        return _parse_real(token)

    if kind == RuleKind.BINARY_01:
        if len(item.option_labels) == 2 and token in item.option_labels:
            return float(item.option_labels.index(token))
        if YES_REGEX.fullmatch(token.strip()):
            return 1.0
        if NO_REGEX.fullmatch(token.strip()):
            return 0.0
        raise CodeTableGap(
            f"{token!r} is not a binary response for item {item.item_id}",
            item_id=item.item_id,
            token=token,
        )

    raise PreconditionError(f"rule kind {kind.value} does not code tokens")


def _check_code_table(item: SurveyItem, rule: HarmonizationRule):
    table = rule.params.code_table
    if table is None:
        raise CodeTableGap(f"categorical item {item.item_id} has no code table", item_id=item.item_id)
    for label in item.option_labels:
        if label not in table:
            raise CodeTableGap(
                f"code table for {item.item_id} misses option {label!r}",
                item_id=item.item_id,
                token=label,
            )


def apply_rules(raw: ResponseMatrix, rules: Iterable[HarmonizationRule]) -> HarmonizedMatrix:
    """
    Map every raw token into the unified numeric representation.

    Parameters
    ----------
    raw : ResponseMatrix
        Raw tokens with MISSING cells.
    rules : iterable of HarmonizationRule
        Exactly one rule per harmonized item. Excluded items and items ruled
        `drop` are left out; outcome items without a rule are left out too.

    Returns
    -------
    HarmonizedMatrix with NaN where the input was MISSING or the rule could not
    produce a value.
    """
    by_item: Dict[str, HarmonizationRule] = {}
    for rule in rules:
        if rule.item_id in by_item:
            raise DuplicateId(f"item {rule.item_id} has two rules", item_id=rule.item_id)
        by_item[rule.item_id] = rule

    kept: List[str] = []
    columns: List[np.ndarray] = []
    induced: Dict[str, int] = {}
    outcome_items = set()
    degenerate = set()
    for j, item_id in enumerate(raw.item_ids):
        item = raw.item(item_id)
        if item.usage == Usage.EXCLUDED:
            continue
        rule = by_item.get(item_id)
        if rule is None:
            if item.usage == Usage.OUTCOME:
                LOGGER.debug("Outcome item %s has no rule; left out", item_id)
                continue
            raise MissingRule(f"item {item_id} has no harmonization rule", item_id=item_id)
        if rule.kind == RuleKind.DROP:
            continue
        if rule.kind == RuleKind.CATEGORICAL:
            _check_code_table(item, rule)

        column = np.full(raw.n_respondents, np.nan)
        count = 0
        for i, token in enumerate(raw.cells[:, j]):
            if token is None:
                continue
            column[i] = _code_token(token, item, rule)
            if math.isnan(column[i]):
                count += 1

        if count:
            LOGGER.info("Rule %s left %d cells of %s missing", rule.kind.value, count, item_id)
        kept.append(item_id)
        columns.append(column)
        induced[item_id] = count
        if item.usage == Usage.OUTCOME:
            outcome_items.add(item_id)
        elif _is_constant(column[~np.isnan(column)]):
            LOGGER.warning("Item %s takes a single value", item_id)
            degenerate.add(item_id)

    values = np.column_stack(columns) if columns else np.empty((raw.n_respondents, 0))
    return HarmonizedMatrix(
        raw.respondent_ids,
        tuple(kept),
        values,
        induced,
        frozenset(outcome_items),
        degenerate_items=frozenset(degenerate),
    )


@dataclass(frozen=True)
class FoldTransform:
    """Per-item training statistics; columns follow `item_ids`."""

    item_ids: Tuple[str, ...]
    n_rows: int
    train_rows: FrozenSet[int]
    lo_cut: np.ndarray
    hi_cut: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    standardized_items: FrozenSet[str]
    degenerate_items: FrozenSet[str]

    def statistics(self, item_id: str) -> Mapping[str, float]:
        j = self.item_ids.index(item_id)
        return {
            "lo_cut": float(self.lo_cut[j]),
            "hi_cut": float(self.hi_cut[j]),
            "mean": float(self.mean[j]),
            "sd": float(self.sd[j]),
        }


def winsorize(values: np.ndarray, lo_cut, hi_cut) -> np.ndarray:
    """Clip to the cuts; NaN passes through."""
    return np.clip(values, lo_cut, hi_cut)


def _is_constant(present: np.ndarray) -> bool:
    return present.size >= 2 and float(np.ptp(present)) == 0.0


def _as_row_index(rows: Iterable[int], n_rows: int) -> np.ndarray:
    rows = np.asarray(sorted(set(int(i) for i in rows)), dtype=int)
    if rows.size and (rows[0] < 0 or rows[-1] >= n_rows):
        raise PreconditionError("row index out of range", n_rows=n_rows)
    return rows


def fit_fold_transform(
    h: HarmonizedMatrix,
    train_rows: Iterable[int],
    rules: Iterable[HarmonizationRule],
    force_standardize: bool = False,
) -> FoldTransform:
    """Fit winsorization cuts, then mean and sd, on the training rows only."""
    rows = _as_row_index(train_rows, h.n_rows)
    if rows.size == 0:
        raise PreconditionError("cannot fit a fold transform on zero training rows")

    by_item = {rule.item_id: rule for rule in rules}
    n_items = len(h.item_ids)
    lo_cut = np.full(n_items, -np.inf)
    hi_cut = np.full(n_items, np.inf)
    mean = np.zeros(n_items)
    sd = np.ones(n_items)
    standardized = set()
    degenerate = set()

    train = h.values[rows]
    for j, item_id in enumerate(h.item_ids):
        rule = by_item.get(item_id)
        params = rule.params if rule is not None else RuleParams(winsorize=None, standardize=False)
        column = train[:, j]
        present = column[~np.isnan(column)]

        if params.winsorize is not None and present.size:
            lo_cut[j] = lower_quantile(present, params.winsorize[0])
            hi_cut[j] = lower_quantile(present, params.winsorize[1])

        clipped = winsorize(present, lo_cut[j], hi_cut[j])
        constant = _is_constant(clipped) and item_id not in h.outcome_items
        if constant:
            LOGGER.warning("Item %s is constant on the training rows", item_id)
            degenerate.add(item_id)

        wants_standard = params.standardize or (
            force_standardize and item_id not in h.outcome_items
        )
        if not wants_standard:
            continue
        if present.size < 2:
            raise PreconditionError(
                f"item {item_id} has fewer than two training values to standardize",
                item_id=item_id,
            )

        mean[j] = float(np.mean(clipped))
        if not constant:
            sd[j] = float(np.std(clipped))
        standardized.add(item_id)

    return FoldTransform(
        h.item_ids,
        h.n_rows,
        frozenset(int(i) for i in rows),
        lo_cut,
        hi_cut,
        mean,
        sd,
        frozenset(standardized),
        frozenset(degenerate),
    )


def apply_fold_transform(
    h: HarmonizedMatrix, t: FoldTransform, rows: Iterable[int]
) -> HarmonizedMatrix:
    """Winsorize and standardize the given rows with the fitted training statistics."""
    if h.item_ids != t.item_ids or h.n_rows != t.n_rows:
        raise ShapeMismatch(
            "fold transform was fitted on a different matrix shape",
            fitted=(t.n_rows, len(t.item_ids)),
            given=(h.n_rows, len(h.item_ids)),
        )
    rows = _as_row_index(rows, h.n_rows)
    row_set = frozenset(int(i) for i in rows)
    if row_set != t.train_rows and not row_set.isdisjoint(t.train_rows):
        raise LeakageError("rows partially overlap the transform's training rows")

    values = (winsorize(h.values[rows], t.lo_cut, t.hi_cut) - t.mean) / t.sd
    return HarmonizedMatrix(
        tuple(h.respondent_ids[i] for i in rows),
        h.item_ids,
        values,
        h.induced_missing,
        h.outcome_items,
        t.standardized_items,
        t.degenerate_items,
    )
