"""
Hold the item-to-subdimension weight matrix and its sparsifying transforms.

Every row is a point on the simplex: weights are nonnegative and sum to one.
Ties between equal weights always resolve by ascending subdimension id.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import (
    Any,
    Callable,
    Collection,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from .errors import MissingCoverage, PreconditionError, SchemaError
from .findings import Finding, ValidationReport
from .instrument import SurveyItem, Usage
from .math_helper import SIMPLEX_TOLERANCE, clamp, rank_weights, renormalize

LOGGER = logging.getLogger(__name__)

# Extra slack on the closeness comparison so decimal gaps like 0.25 are inclusive.
CLOSENESS_EPSILON = 1e-12

Weights = Tuple[Tuple[str, float], ...]


@dataclass(frozen=True)
class MappingRow:
    """Sparse weights of one item, ranked by weight then id."""

    item_id: str
    weights: Weights
    rationale: str = ""
    not_this: str = ""
    proposer: str = ""
    scale: float = 1.0

    @classmethod
    def of(
        cls,
        item_id: str,
        weights: Union[Mapping[str, float], Iterable[Tuple[str, float]]],
        **kwargs,
    ) -> "MappingRow":
        pairs = weights.items() if isinstance(weights, Mapping) else weights
        return cls(item_id, tuple((k, float(v)) for k, v in rank_weights(pairs)), **kwargs)

    def weight(self, subdim_id: str) -> float:
        return dict(self.weights).get(subdim_id, 0.0)

    def as_dict(self) -> Dict[str, float]:
        return dict(self.weights)

    @property
    def subdim_ids(self) -> List[str]:
        return [subdim_id for subdim_id, _ in self.weights]

    @property
    def total(self) -> float:
        return float(sum(weight for _, weight in self.weights))

    def with_weights(self, weights: Iterable[Tuple[str, float]]) -> "MappingRow":
        return replace(self, weights=tuple(rank_weights(weights)))


@dataclass(frozen=True)
class MappingMatrix:
    """
    Soft mapping W for one taxonomy version.

    `anchored_subdims` and `control_subdims` are copied from the taxonomy by
    `bind`; a row whose whole mass sits on anchored subdimensions is frozen.
    """

    taxonomy_version: int
    version: int
    rows: Tuple[MappingRow, ...]
    sparsity_cap: Optional[int] = None
    tau: Optional[float] = None
    anchored_subdims: FrozenSet[str] = frozenset()
    control_subdims: FrozenSet[str] = frozenset()

    @property
    def item_ids(self) -> List[str]:
        return [row.item_id for row in self.rows]

    @property
    def subdim_ids(self) -> List[str]:
        """Every referenced subdimension, sorted."""
        return sorted({subdim_id for row in self.rows for subdim_id, _ in row.weights})

    def row(self, item_id: str) -> MappingRow:
        for row in self.rows:
            if row.item_id == item_id:
                return row
        raise PreconditionError(f"item {item_id} has no mapping row", item_id=item_id)

    def has_row(self, item_id: str) -> bool:
        return any(row.item_id == item_id for row in self.rows)

    def is_anchored(self, row: MappingRow) -> bool:
        return bool(row.weights) and all(k in self.anchored_subdims for k, _ in row.weights)

    def is_control(self, row: MappingRow) -> bool:
        return bool(row.weights) and all(k in self.control_subdims for k, _ in row.weights)

    def items_loading_on(self, subdim_ids: Collection[str]) -> List[str]:
        return [
            row.item_id
            for row in self.rows
            if any(k in subdim_ids and v > 0 for k, v in row.weights)
        ]

    def bind(self, taxonomy) -> "MappingMatrix":
        """Copy anchoring and control roles from a taxonomy snapshot."""
        return replace(
            self,
            anchored_subdims=frozenset(taxonomy.anchored_ids),
            control_subdims=frozenset(taxonomy.control_leaf_ids()),
        )

    def with_rows(self, rows: Iterable[MappingRow], **changes) -> "MappingMatrix":
        """New version holding the given rows."""
        changes.setdefault("version", self.version + 1)
        return replace(self, rows=tuple(rows), **changes)

    def dense(
        self, item_ids: Sequence[str], subdim_ids: Sequence[str], scaled: bool = False
    ) -> np.ndarray:
        """Items by subdimensions weight array, optionally times each row's coverage factor."""
        column = {subdim_id: k for k, subdim_id in enumerate(subdim_ids)}
        rows = {row.item_id: row for row in self.rows}
        result = np.zeros((len(item_ids), len(subdim_ids)))
        for j, item_id in enumerate(item_ids):
            row = rows.get(item_id)
            if row is None:
                continue
            for subdim_id, weight in row.weights:
                if subdim_id in column:
                    result[j, column[subdim_id]] = weight * row.scale if scaled else weight
        return result


@dataclass(frozen=True)
class HardMapping:
    """One target dimension per item."""

    assignments: Mapping[str, str] = field(default_factory=dict)

    def __getitem__(self, item_id: str) -> str:
        return self.assignments[item_id]

    @property
    def dimension_ids(self) -> List[str]:
        return sorted(set(self.assignments.values()))

    def as_mapping_matrix(self, taxonomy_version: int = 0, version: int = 1) -> MappingMatrix:
        rows = [
            MappingRow.of(item_id, {dimension: 1.0}, proposer="hard")
            for item_id, dimension in self.assignments.items()
        ]
        return MappingMatrix(taxonomy_version, version, tuple(rows), sparsity_cap=1)


def _transform(
    w: MappingMatrix,
    function: Callable[[MappingRow], MappingRow],
    only_items: Optional[Collection[str]],
    **changes,
) -> MappingMatrix:
    rows = []
    for row in w.rows:
        if w.is_anchored(row) or (only_items is not None and row.item_id not in only_items):
            rows.append(row)
        else:
            rows.append(function(row))
    return w.with_rows(rows, **changes)


def sparsify_threshold(
    w: MappingMatrix, tau: float, only_items: Optional[Collection[str]] = None
) -> MappingMatrix:
    """Drop weights below tau and renormalize; an all-below row keeps its max at 1.0."""
    if not 0.0 <= tau < 1.0:
        raise PreconditionError(f"tau must lie in [0, 1), got {tau}")

    def threshold(row: MappingRow) -> MappingRow:
        survivors = [(k, v) for k, v in row.weights if v >= tau]
        if len(survivors) == len(row.weights):
            return row
        if not survivors:
            return row.with_weights([(row.weights[0][0], 1.0)])
        return row.with_weights(renormalize(survivors))

    return _transform(w, threshold, only_items, tau=tau)


def sparsify_top_m(
    w: MappingMatrix, m: int, only_items: Optional[Collection[str]] = None
) -> MappingMatrix:
    """Keep the m largest weights per row and renormalize."""
    if m < 1:
        raise PreconditionError(f"m must be at least 1, got {m}")

    def top_m(row: MappingRow) -> MappingRow:
        if len(row.weights) <= m:
            return row
        return row.with_weights(renormalize(row.weights[:m]))

    return _transform(w, top_m, only_items, sparsity_cap=m)


def tighten_primary_secondary(
    w: MappingMatrix,
    secondary_lo: float,
    secondary_hi: float,
    only_items: Optional[Collection[str]] = None,
) -> MappingMatrix:
    """Project rows to one primary plus at most one secondary in the band."""
    if not 0.0 < secondary_lo < secondary_hi < 0.5:
        raise PreconditionError(
            f"secondary band must satisfy 0 < lo < hi < 0.5, got [{secondary_lo}, {secondary_hi}]"
        )

    def tighten(row: MappingRow) -> MappingRow:
        if not row.weights:
            return row
        (primary, top1) = row.weights[0]
        if len(row.weights) == 1:
            return row if top1 == 1.0 else row.with_weights([(primary, 1.0)])

        (secondary, top2) = row.weights[1]
        share = top2 / (top1 + top2) if top1 + top2 > 0 else 0.0
        if share < secondary_lo:
            return row.with_weights([(primary, 1.0)])
        share = clamp(share, secondary_lo, secondary_hi)
        weights = ((primary, 1.0 - share), (secondary, share))
        if len(row.weights) == 2 and tuple(rank_weights(weights)) == row.weights:
            return row
        return row.with_weights(weights)

    return _transform(w, tighten, only_items, sparsity_cap=2)


def coverage_weights(h, train_rows: Iterable[int]) -> Dict[str, float]:
    """Share of non-missing training values per item."""
    rows = np.asarray(sorted(set(int(i) for i in train_rows)), dtype=int)
    if rows.size == 0:
        raise PreconditionError("coverage needs at least one training row")
    present = ~np.isnan(h.values[rows])
    return {item_id: float(present[:, j].mean()) for j, item_id in enumerate(h.item_ids)}


def reweight_by_coverage(w: MappingMatrix, c: Mapping[str, float]) -> MappingMatrix:
    """
    Attach c_j to every row as a scoring-time scale factor.

    Row weights are left as they are, since renormalizing w_jk * c_j within a
    row cancels c_j; the factor acts across items inside the score sums.
    """
    rows = []
    for row in w.rows:
        if row.item_id not in c:
            raise MissingCoverage(f"item {row.item_id} has no coverage weight", item_id=row.item_id)
        value = float(c[row.item_id])
        if not 0.0 <= value <= 1.0:
            raise PreconditionError(f"coverage of {row.item_id} is outside [0, 1]", value=value)
        rows.append(replace(row, scale=value))
    return w.with_rows(rows)


@dataclass(frozen=True)
class CrossLoading:
    item_id: str
    gap: Optional[float]
    flagged: bool


@dataclass(frozen=True)
class CrossLoadingReport:
    closeness: float
    items: Tuple[CrossLoading, ...]
    share: float

    @property
    def flagged_items(self) -> List[str]:
        return [entry.item_id for entry in self.items if entry.flagged]

    def to_json(self) -> Mapping[str, Any]:
        return {
            "closeness": self.closeness,
            "share": self.share,
            "flagged_items": self.flagged_items,
        }


def cross_loading_concentration(w: MappingMatrix, closeness: float) -> CrossLoadingReport:
    """Flag mechanism items whose top-2 weights are within `closeness`."""
    if not 0.0 < closeness <= 1.0:
        raise PreconditionError(f"closeness must lie in (0, 1], got {closeness}")

    entries = []
    for row in w.rows:
        if w.is_control(row):
            continue
        nonzero = [v for _, v in row.weights if v > 0]
        if len(nonzero) < 2:
            entries.append(CrossLoading(row.item_id, None, False))
            continue
        gap = nonzero[0] - nonzero[1]
        entries.append(CrossLoading(row.item_id, gap, gap <= closeness + CLOSENESS_EPSILON))

    share = sum(entry.flagged for entry in entries) / len(entries) if entries else 0.0
    return CrossLoadingReport(closeness, tuple(entries), share)


def to_hard_mapping(w: MappingMatrix) -> HardMapping:
    """Argmax per row with the lexicographic tie-break."""
    return HardMapping({row.item_id: row.weights[0][0] for row in w.rows if row.weights})


def merge_subdimensions(
    w: MappingMatrix, pairs: Iterable[Tuple[str, str]], taxonomy_version: int
) -> MappingMatrix:
    """
    Carry consolidation merges into the rows: the second id's mass joins the first.

    Pairs apply in order, so a survivor that is merged away later takes its
    earlier merges along.
    """
    target: Dict[str, str] = {}
    for keep, drop in pairs:
        keep = target.get(keep, keep)
        if keep == drop:
            raise PreconditionError(f"cannot merge {drop} into itself")
        target = {merged: keep if survivor == drop else survivor for merged, survivor in target.items()}
        target[drop] = keep

    rows = []
    for row in w.rows:
        if not any(subdim_id in target for subdim_id in row.subdim_ids):
            rows.append(row)
            continue
        merged: Dict[str, float] = {}
        for subdim_id, weight in row.weights:
            key = target.get(subdim_id, subdim_id)
            merged[key] = merged.get(key, 0.0) + weight
        rows.append(row.with_weights(merged.items()))
    return w.with_rows(rows, taxonomy_version=taxonomy_version)


def validate_mapping(
    w: MappingMatrix, t, instrument: Optional[Sequence[SurveyItem]] = None
) -> ValidationReport:
    """Check every row against the simplex, sparsity, and taxonomy."""
    findings: List[Finding] = []
    if w.taxonomy_version != t.version:
        findings.append(
            Finding(
                "version_mismatch",
                f"v{w.version}",
                f"mapping targets taxonomy v{w.taxonomy_version}, taxonomy is v{t.version}",
            )
        )

    leaves = set(t.leaf_ids)
    known = {subdim.subdim_id for subdim in t.subdimensions}
    usage = {item.item_id: item.usage for item in instrument} if instrument is not None else None
    control = set(t.control_leaf_ids())
    seen = set()
    for row in w.rows:
        item_id = row.item_id
        if item_id in seen:
            findings.append(Finding("duplicate_row", item_id, "item has more than one row"))
        seen.add(item_id)

        if not row.weights:
            findings.append(Finding("empty_row", item_id, "row has no weights"))
            continue
        values = np.array([v for _, v in row.weights], dtype=float)
        if not np.isfinite(values).all():
            findings.append(Finding("non_finite", item_id, "row holds a non-finite weight"))
            continue
        if (values < 0).any():
            findings.append(Finding("negative_weight", item_id, "row holds a negative weight"))
        if abs(values.sum() - 1.0) > SIMPLEX_TOLERANCE:
            findings.append(Finding("row_sum", item_id, f"weights sum to {values.sum():.12g}"))
        nonzero = int((values > 0).sum())
        if w.sparsity_cap is not None and nonzero > w.sparsity_cap:
            findings.append(
                Finding("sparsity", item_id, f"{nonzero} nonzero weights exceed cap {w.sparsity_cap}")
            )

        for subdim_id, _ in row.weights:
            if subdim_id not in known:
                findings.append(
                    Finding("unknown_subdimension", item_id, f"{subdim_id!r} is not in the taxonomy")
                )
            elif subdim_id not in leaves:
                findings.append(
                    Finding("stale_reference", item_id, f"{subdim_id!r} was split and is not a leaf")
                )

        if usage is None:
            continue
        if item_id not in usage:
            findings.append(Finding("unknown_item", item_id, "item is not in the instrument"))
        elif usage[item_id] in (Usage.OUTCOME, Usage.EXCLUDED):
            findings.append(Finding("usage", item_id, f"{usage[item_id].value} item has a row"))
        elif usage[item_id] == Usage.CONTROL and not all(k in control for k, _ in row.weights):
            findings.append(Finding("usage", item_id, "control item loads on a mechanism subdimension"))

    return ValidationReport(findings)


class _WeightEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    subdim_id: str
    weight: float


class MappingRecord(BaseModel):
    """One row as written in mapping files and proposer payloads."""

    model_config = ConfigDict(extra="ignore")

    item_id: str
    weights: Union[List[_WeightEntry], Dict[str, float]]
    rationale: str = ""
    not_this: str = ""
    proposer: str = ""

    @field_validator("weights")
    @classmethod
    def _no_duplicates(cls, value):
        if isinstance(value, list):
            ids = [entry.subdim_id for entry in value]
            if len(ids) != len(set(ids)):
                raise ValueError("a subdimension appears twice in one row")
        return value

    def pairs(self) -> List[Tuple[str, float]]:
        if isinstance(self.weights, dict):
            return list(self.weights.items())
        return [(entry.subdim_id, entry.weight) for entry in self.weights]

    def to_row(self) -> MappingRow:
        return MappingRow.of(
            self.item_id,
            self.pairs(),
            rationale=self.rationale,
            not_this=self.not_this,
            proposer=self.proposer,
        )


def parse_mapping(data: Any, taxonomy_version: int = 1) -> MappingMatrix:
    """Accept a bare list of rows or an object with version fields and `rows`."""
    header: Mapping[str, Any] = {}
    if isinstance(data, Mapping):
        header = data
        data = data.get("rows")
    if not isinstance(data, list):
        raise SchemaError("mapping must be a list of rows")
    try:
        rows = tuple(MappingRecord.model_validate(record).to_row() for record in data)
    except ValidationError as error:
        raise SchemaError(f"malformed mapping row: {error}") from error
    return MappingMatrix(
        int(header.get("taxonomy_version", taxonomy_version)),
        int(header.get("version", 1)),
        rows,
        sparsity_cap=header.get("sparsity_cap"),
        tau=header.get("tau"),
    )


def mapping_to_json(w: MappingMatrix) -> Mapping[str, Any]:
    return {
        "taxonomy_version": w.taxonomy_version,
        "version": w.version,
        "sparsity_cap": w.sparsity_cap,
        "tau": w.tau,
        "rows": [
            {
                "item_id": row.item_id,
                "weights": [{"subdim_id": k, "weight": v} for k, v in row.weights],
                "rationale": row.rationale,
                "not_this": row.not_this,
                "proposer": row.proposer,
            }
            for row in w.rows
        ],
    }


def load_mapping(path: str, taxonomy_version: int = 1) -> MappingMatrix:
    with open(path, encoding="utf-8") as stream:
        try:
            data = json.load(stream)
        except json.JSONDecodeError as error:
            raise SchemaError(f"{path} is not valid JSON: {error}") from error
    w = parse_mapping(data, taxonomy_version)
    LOGGER.info("Loaded mapping v%s with %d rows from %s", w.version, len(w.rows), path)
    return w


def save_mapping(w: MappingMatrix, path: str):
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(mapping_to_json(w), stream, indent=2)


def load_hard_mapping(path: str) -> HardMapping:
    """Read `{item_id: dimension}` or a list of `{item_id, dimension}` records."""
    with open(path, encoding="utf-8") as stream:
        data = json.load(stream)
    if isinstance(data, list):
        try:
            data = {record["item_id"]: record["dimension"] for record in data}
        except (KeyError, TypeError) as error:
            raise SchemaError(f"malformed hard mapping in {path}: {error}") from error
    if not isinstance(data, dict):
        raise SchemaError(f"{path} must map items to dimensions")
    return HardMapping(dict(data))
