"""
Represent the survey instrument, raw responses, and outcome designations.

Nothing here coerces tokens to numbers; harmonization owns that step.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .errors import DuplicateId, PreconditionError, SchemaError, UnknownItem

LOGGER = logging.getLogger(__name__)

# Raw cells use None for a missing response.
MISSING = None

DEFAULT_MISSING_TOKENS = ("", "NA", "Prefer not to say")

RESPONDENT_COLUMN = "respondent_id"


class ResponseKind(str, Enum):
    BINARY = "binary"
    ORDINAL = "ordinal"
    CATEGORICAL = "categorical"
    NUMERIC = "numeric"
    FREE_TEXT = "free_text"


class Usage(str, Enum):
    MECHANISM = "mechanism"
    CONTROL = "control"
    OUTCOME = "outcome"
    EXCLUDED = "excluded"


class SurveyItem(BaseModel):
    """One question stem and how the study uses it."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    item_id: str
    stem_text: str
    response_kind: ResponseKind
    option_labels: Tuple[str, ...] = ()
    usage: Usage = Usage.MECHANISM

    @field_validator("item_id")
    @classmethod
    def _item_id_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("item_id must not be blank")
        return value

    @model_validator(mode="after")
    def _options_for_ordered_kinds(self) -> "SurveyItem":
        ordered = (ResponseKind.ORDINAL, ResponseKind.CATEGORICAL)
        if self.response_kind in ordered and len(self.option_labels) < 2:
            raise ValueError(f"{self.response_kind.value} item needs at least two option labels")
        return self


class OutcomeKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class OutcomeSpec(BaseModel):
    """A downstream outcome and the rows and covariates it is evaluated with."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    outcome_id: str
    kind: OutcomeKind
    subsample_filter: Optional[str] = None
    filter_item_id: Optional[str] = None
    covariate_item_ids: Optional[Tuple[str, ...]] = None

    @model_validator(mode="after")
    def _filter_is_defined(self) -> "OutcomeSpec":
        if self.subsample_filter is None:
            return self
        if self.subsample_filter not in SUBSAMPLE_FILTERS:
            raise ValueError(f"undefined subsample filter {self.subsample_filter!r}")
        if self.filter_item_id is None:
            raise ValueError(f"filter {self.subsample_filter!r} needs filter_item_id")
        return self


def _accepters_only(filter_values: np.ndarray) -> np.ndarray:
    return filter_values == 1


# Predicates receive the harmonized filter column and return a row mask.
SUBSAMPLE_FILTERS: Mapping[str, Callable[[np.ndarray], np.ndarray]] = {
    "accepters_only": _accepters_only,
}


@dataclass(frozen=True)
class ResponseMatrix:
    """Raw response tokens, respondents by items."""

    respondent_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    cells: np.ndarray
    instrument: Tuple[SurveyItem, ...] = ()

    def __post_init__(self):
        if self.cells.shape != (len(self.respondent_ids), len(self.item_ids)):
            raise SchemaError(
                "response cells do not match the respondent and item ids",
                shape=self.cells.shape,
            )
        self.cells.flags.writeable = False

    @property
    def n_respondents(self) -> int:
        return len(self.respondent_ids)

    def item(self, item_id: str) -> SurveyItem:
        for item in self.instrument:
            if item.item_id == item_id:
                return item
        raise UnknownItem(f"item {item_id!r} is not in the instrument", item_id=item_id)

    def column(self, item_id: str) -> Sequence[Optional[str]]:
        return list(self.cells[:, self.item_ids.index(item_id)])

    def equals(self, other: "ResponseMatrix") -> bool:
        """Cell-by-cell equality including MISSING placement."""
        return (
            self.respondent_ids == other.respondent_ids
            and self.item_ids == other.item_ids
            and self.cells.shape == other.cells.shape
            and all(a == b for a, b in zip(self.cells.ravel(), other.cells.ravel()))
        )


def parse_instrument(records: object) -> List[SurveyItem]:
    """Validate decoded instrument JSON into survey items."""
    if not isinstance(records, list) or not records:
        raise SchemaError("instrument must be a non-empty list of item records")
    try:
        items = [SurveyItem.model_validate(record) for record in records]
    except ValidationError as error:
        raise SchemaError(f"malformed instrument record: {error}") from error

    seen = set()
    for item in items:
        if item.item_id in seen:
            raise DuplicateId(f"item id {item.item_id!r} appears twice", item_id=item.item_id)
        seen.add(item.item_id)
    return items


def load_instrument(path: str) -> List[SurveyItem]:
    """Read the instrument JSON file; items keep file order."""
    try:
        with open(path, encoding="utf-8") as stream:
            records = json.load(stream)
    except json.JSONDecodeError as error:
        raise SchemaError(f"{path} is not valid JSON: {error}") from error

    items = parse_instrument(records)
    LOGGER.info("Loaded %d items from %s", len(items), path)
    return items


def save_instrument(items: Iterable[SurveyItem], path: str):
    with open(path, "w", encoding="utf-8") as stream:
        json.dump([item.model_dump(mode="json") for item in items], stream, indent=2)


def load_responses(
    path: str,
    instrument: Sequence[SurveyItem],
    missing_tokens: Iterable[str] = DEFAULT_MISSING_TOKENS,
) -> ResponseMatrix:
    """Read the responses CSV, mapping blank cells and missing tokens to MISSING."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as error:
        raise SchemaError(f"{path} has no header row") from error
    except pd.errors.ParserError as error:
        raise SchemaError(f"{path} is not valid CSV: {error}") from error

    columns = list(frame.columns)
    if not columns or columns[0] != RESPONDENT_COLUMN:
        raise SchemaError(f"first column of {path} must be {RESPONDENT_COLUMN!r}")
    if len(set(columns)) != len(columns):
        raise DuplicateId(f"{path} repeats a column name")

    known = {item.item_id for item in instrument}
    item_ids = tuple(columns[1:])
    for item_id in item_ids:
        if item_id not in known:
            raise UnknownItem(f"column {item_id!r} is not an instrument item", item_id=item_id)

    respondent_ids = tuple(frame[RESPONDENT_COLUMN])
    if len(set(respondent_ids)) != len(respondent_ids):
        raise DuplicateId(f"{path} repeats a respondent id")

    missing = set(missing_tokens) | {""}
    cells = np.empty((len(respondent_ids), len(item_ids)), dtype=object)
    for j, item_id in enumerate(item_ids):
        for i, token in enumerate(frame[item_id]):
            cells[i, j] = MISSING if token in missing else token

    LOGGER.info(
        "Loaded %d respondents x %d items from %s", len(respondent_ids), len(item_ids), path
    )
    return ResponseMatrix(respondent_ids, item_ids, cells, tuple(instrument))


def write_responses(matrix: ResponseMatrix, path: str):
    """Write responses as CSV with MISSING as an empty cell."""
    frame = pd.DataFrame(matrix.cells, columns=list(matrix.item_ids))
    frame.insert(0, RESPONDENT_COLUMN, list(matrix.respondent_ids))
    frame.to_csv(path, index=False, na_rep="", encoding="utf-8")


def load_outcomes(path: str) -> List[OutcomeSpec]:
    with open(path, encoding="utf-8") as stream:
        records = json.load(stream)
    try:
        return [OutcomeSpec.model_validate(record) for record in records]
    except (ValidationError, TypeError) as error:
        raise SchemaError(f"malformed outcome spec in {path}: {error}") from error


def extract_outcome(h, spec: OutcomeSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Get the outcome vector of a harmonized matrix and its evaluation mask.

    The mask keeps rows with a non-missing outcome that also satisfy the
    subsample filter.
    """
    if spec.outcome_id not in h.item_ids:
        raise PreconditionError(
            f"outcome {spec.outcome_id} was not harmonized", outcome_id=spec.outcome_id
        )
    y = np.asarray(h.column(spec.outcome_id), dtype=float)
    mask = ~np.isnan(y)
    if spec.kind == OutcomeKind.BINARY and not np.isin(y[mask], (0.0, 1.0)).all():
        raise PreconditionError(
            f"binary outcome {spec.outcome_id} holds values other than 0 and 1",
            outcome_id=spec.outcome_id,
        )

    if spec.subsample_filter is not None:
        if spec.filter_item_id not in h.item_ids:
            raise PreconditionError(
                f"filter item {spec.filter_item_id} was not harmonized",
                item_id=spec.filter_item_id,
            )
        predicate = SUBSAMPLE_FILTERS[spec.subsample_filter]
        mask &= predicate(np.asarray(h.column(spec.filter_item_id), dtype=float))
    return y, mask


def default_covariates(instrument: Iterable[SurveyItem]) -> Tuple[str, ...]:
    """Baseline covariates default to every control item."""
    return tuple(item.item_id for item in instrument if item.usage == Usage.CONTROL)


def items_by_id(instrument: Iterable[SurveyItem]) -> Dict[str, SurveyItem]:
    return {item.item_id: item for item in instrument}


def require_items(instrument: Iterable[SurveyItem], item_ids: Iterable[str]):
    known = {item.item_id for item in instrument}
    for item_id in item_ids:
        if item_id not in known:
            raise PreconditionError(f"item {item_id!r} is not in the instrument", item_id=item_id)
