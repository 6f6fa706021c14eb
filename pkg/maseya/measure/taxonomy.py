"""
Represent anchors, subdimensions, and their nesting as versioned snapshots.

Every edit returns a new Taxonomy whose version is one higher and whose edit
log gains one record, so any snapshot can be rebuilt from its base.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import (
    AnchorViolation,
    CrossAnchorMerge,
    DuplicateChildId,
    NotALeaf,
    PreconditionError,
    SchemaError,
    StaleVersion,
    UnknownSubdimension,
)
from .findings import Finding, ValidationReport

LOGGER = logging.getLogger(__name__)

MAX_DEPTH = 2


class AnchorRole(str, Enum):
    MECHANISM = "mechanism"
    CONTROL = "control"


class Anchor(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    anchor_id: str
    definition: str
    role: AnchorRole = AnchorRole.MECHANISM


class Subdimension(BaseModel):
    """A construct under one anchor; children carry their parent's id."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    subdim_id: str
    anchor_id: str
    parent_id: Optional[str] = None
    definition: str = ""
    inclusion_rules: Tuple[str, ...] = ()
    exclusion_rules: Tuple[str, ...] = ()
    representative_item_ids: Tuple[str, ...] = ()
    anchored: bool = False


class EditRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    version: int
    op: str
    payload: Dict[str, Any]


@dataclass(frozen=True)
class Taxonomy:
    version: int
    anchors: Tuple[Anchor, ...]
    subdimensions: Tuple[Subdimension, ...]
    edit_log: Tuple[EditRecord, ...] = field(default_factory=tuple)

    def get(self, subdim_id: str) -> Subdimension:
        for subdim in self.subdimensions:
            if subdim.subdim_id == subdim_id:
                return subdim
        raise UnknownSubdimension(f"no subdimension {subdim_id!r}", subdim_id=subdim_id)

    def has(self, subdim_id: str) -> bool:
        return any(subdim.subdim_id == subdim_id for subdim in self.subdimensions)

    def anchor(self, anchor_id: str) -> Anchor:
        for anchor in self.anchors:
            if anchor.anchor_id == anchor_id:
                return anchor
        raise PreconditionError(f"no anchor {anchor_id!r}", anchor_id=anchor_id)

    def children(self, subdim_id: str) -> List[Subdimension]:
        return [subdim for subdim in self.subdimensions if subdim.parent_id == subdim_id]

    def is_leaf(self, subdim_id: str) -> bool:
        return not self.children(subdim_id)

    @property
    def leaves(self) -> List[Subdimension]:
        parents = {subdim.parent_id for subdim in self.subdimensions}
        return [subdim for subdim in self.subdimensions if subdim.subdim_id not in parents]

    @property
    def leaf_ids(self) -> List[str]:
        return [subdim.subdim_id for subdim in self.leaves]

    @property
    def parent_ids(self) -> List[str]:
        return sorted({s.parent_id for s in self.subdimensions if s.parent_id is not None})

    @property
    def k(self) -> int:
        return len(self.leaves)

    @property
    def anchored_ids(self) -> List[str]:
        return [subdim.subdim_id for subdim in self.subdimensions if subdim.anchored]

    def control_leaf_ids(self) -> List[str]:
        roles = {anchor.anchor_id: anchor.role for anchor in self.anchors}
        return [s.subdim_id for s in self.leaves if roles.get(s.anchor_id) == AnchorRole.CONTROL]

    def _next(self, subdimensions: Sequence[Subdimension], op: str, payload) -> "Taxonomy":
        version = self.version + 1
        record = EditRecord(version=version, op=op, payload=payload)
        LOGGER.info("Taxonomy %s -> %s (%s)", self.version, version, op)
        return Taxonomy(version, self.anchors, tuple(subdimensions), self.edit_log + (record,))


def validate_taxonomy(t: Taxonomy) -> ValidationReport:
    """Report naming and boundary problems; never raises."""
    findings = []
    counts = Counter(subdim.subdim_id for subdim in t.subdimensions)
    for subdim_id, count in sorted(counts.items()):
        if count > 1:
            findings.append(Finding("duplicate_id", subdim_id, f"id appears {count} times"))

    anchor_ids = {anchor.anchor_id for anchor in t.anchors}
    for anchor_id, count in Counter(anchor.anchor_id for anchor in t.anchors).items():
        if count > 1:
            findings.append(Finding("duplicate_anchor", anchor_id, f"anchor appears {count} times"))

    by_id = {subdim.subdim_id: subdim for subdim in t.subdimensions}
    for subdim in t.subdimensions:
        sid = subdim.subdim_id
        if subdim.anchor_id not in anchor_ids:
            findings.append(Finding("unknown_anchor", sid, f"anchor {subdim.anchor_id!r} is undefined"))
        if not subdim.definition.strip():
            findings.append(Finding("empty_definition", sid, "definition is empty"))
        if subdim.anchored and not t.is_leaf(sid):
            findings.append(Finding("anchored_non_leaf", sid, "anchored subdimension has children"))
        if subdim.parent_id is None:
            continue

        parent = by_id.get(subdim.parent_id)
        if parent is None:
            findings.append(Finding("orphan_parent", sid, f"parent {subdim.parent_id!r} is undefined"))
            continue
        if parent.anchor_id != subdim.anchor_id:
            findings.append(Finding("anchor_mismatch", sid, "child and parent have different anchors"))

        # Walk up the parent chain to catch cycles and excess depth.
        seen = {sid}
        depth = 1
        cursor = parent
        while cursor is not None:
            if cursor.subdim_id in seen:
                findings.append(Finding("cycle", sid, "parent chain loops back"))
                break
            seen.add(cursor.subdim_id)
            depth += 1
            cursor = by_id.get(cursor.parent_id) if cursor.parent_id else None
        else:
            if depth > MAX_DEPTH:
                findings.append(Finding("too_deep", sid, f"nesting depth {depth} exceeds {MAX_DEPTH}"))

    return ValidationReport(findings)


def _require_leaf(t: Taxonomy, subdim_id: str) -> Subdimension:
    subdim = t.get(subdim_id)
    if not t.is_leaf(subdim_id):
        raise NotALeaf(f"{subdim_id} has children", subdim_id=subdim_id)
    return subdim


def _union(first: Iterable[str], second: Iterable[str]) -> Tuple[str, ...]:
    return tuple(dict.fromkeys(list(first) + list(second)))


def consolidate(t: Taxonomy, merge_pairs: Iterable[Tuple[str, str]]) -> Taxonomy:
    """Merge the second id of each pair into the first."""
    merge_pairs = [tuple(pair) for pair in merge_pairs]
    subdims = {subdim.subdim_id: subdim for subdim in t.subdimensions}
    order = [subdim.subdim_id for subdim in t.subdimensions]

    current = t
    for keep_id, drop_id in merge_pairs:
        if keep_id == drop_id:
            raise PreconditionError(f"cannot merge {keep_id} into itself")
        if keep_id not in subdims or drop_id not in subdims:
            missing = keep_id if keep_id not in subdims else drop_id
            raise UnknownSubdimension(f"no subdimension {missing!r}", subdim_id=missing)
        keep, drop = subdims[keep_id], subdims[drop_id]
        for subdim in (keep, drop):
            _require_leaf(current, subdim.subdim_id)
            if subdim.anchored:
                raise AnchorViolation(f"{subdim.subdim_id} is anchored", subdim_id=subdim.subdim_id)
        if keep.anchor_id != drop.anchor_id:
            raise CrossAnchorMerge(
                f"{keep_id} and {drop_id} sit under different anchors",
                first=keep.anchor_id,
                second=drop.anchor_id,
            )

        subdims[keep_id] = keep.model_copy(
            update={
                "representative_item_ids": _union(
                    keep.representative_item_ids, drop.representative_item_ids
                ),
                "inclusion_rules": _union(keep.inclusion_rules, drop.inclusion_rules),
                "exclusion_rules": _union(keep.exclusion_rules, drop.exclusion_rules),
            }
        )
        del subdims[drop_id]
        order.remove(drop_id)
        current = Taxonomy(t.version, t.anchors, tuple(subdims[i] for i in order))

    return t._next(
        [subdims[i] for i in order],
        "consolidate",
        {"pairs": [list(pair) for pair in merge_pairs]},
    )


def split_subdimension(
    t: Taxonomy, parent: str, children: Sequence[Subdimension]
) -> Taxonomy:
    """
    Nest new leaf children under a leaf parent.

    Children inherit the parent's anchor; the parent's definition is copied into
    each child's definition as a prefix.
    """
    target = _require_leaf(t, parent)
    if target.anchored:
        raise NotALeaf(f"{parent} is anchored and cannot be split", subdim_id=parent)
    if target.parent_id is not None:
        raise PreconditionError(
            f"{parent} is already a child; nesting is limited to depth {MAX_DEPTH}"
        )
    if len(children) < 2:
        raise PreconditionError("a split needs at least two children")

    child_ids = [child.subdim_id for child in children]
    for child_id in child_ids:
        if t.has(child_id) or child_ids.count(child_id) > 1:
            raise DuplicateChildId(f"child id {child_id!r} is not fresh", subdim_id=child_id)

    new_children = []
    for child in children:
        definition = target.definition
        if child.definition:
            definition = f"{target.definition} {child.definition}".strip()
        new_children.append(
            child.model_copy(
                update={
                    "anchor_id": target.anchor_id,
                    "parent_id": target.subdim_id,
                    "definition": definition,
                    "anchored": False,
                }
            )
        )

    payload = {
        "parent": parent,
        "children": [child.model_dump(mode="json") for child in children],
        "definition_prefix": target.definition,
    }
    return t._next(list(t.subdimensions) + new_children, "split", payload)


def add_subdimension(t: Taxonomy, subdim: Subdimension) -> Taxonomy:
    """Add a new top-level leaf."""
    if t.has(subdim.subdim_id):
        raise DuplicateChildId(f"id {subdim.subdim_id!r} already exists", subdim_id=subdim.subdim_id)
    if subdim.parent_id is not None:
        raise PreconditionError("use split_subdimension to add children")
    t.anchor(subdim.anchor_id)
    payload = {"subdimension": subdim.model_dump(mode="json")}
    return t._next(list(t.subdimensions) + [subdim], "add", payload)


def _apply_edit(t: Taxonomy, record: EditRecord) -> Taxonomy:
    payload = record.payload
    if record.op == "consolidate":
        return consolidate(t, [tuple(pair) for pair in payload["pairs"]])
    if record.op == "split":
        children = [Subdimension.model_validate(child) for child in payload["children"]]
        return split_subdimension(t, payload["parent"], children)
    if record.op == "add":
        return add_subdimension(t, Subdimension.model_validate(payload["subdimension"]))
    raise SchemaError(f"unknown taxonomy edit {record.op!r}")


def replay_edits(base: Taxonomy, edits: Iterable[EditRecord]) -> Taxonomy:
    """Rebuild a snapshot by reapplying logged edits to an earlier snapshot."""
    current = base
    for record in edits:
        if record.version != current.version + 1:
            raise StaleVersion(
                f"edit for version {record.version} cannot follow version {current.version}"
            )
        current = _apply_edit(current, record)
    return current


def parse_taxonomy(data: Mapping[str, Any]) -> Taxonomy:
    """Build a Taxonomy from the anchors-as-keys JSON object."""
    try:
        anchors = []
        subdims = []
        for anchor_id, body in data["anchors"].items():
            anchors.append(
                Anchor(
                    anchor_id=anchor_id,
                    definition=body.get("definition", ""),
                    role=body.get("role", AnchorRole.MECHANISM),
                )
            )
            for record in body.get("subdimensions", []):
                subdims.append(Subdimension.model_validate({"anchor_id": anchor_id, **record}))
        edit_log = tuple(EditRecord.model_validate(r) for r in data.get("edit_log", []))
        return Taxonomy(int(data.get("version", 1)), tuple(anchors), tuple(subdims), edit_log)
    except (KeyError, AttributeError, TypeError, ValidationError) as error:
        raise SchemaError(f"malformed taxonomy: {error}") from error


def taxonomy_to_json(t: Taxonomy) -> Dict[str, Any]:
    anchors = {}
    for anchor in t.anchors:
        anchors[anchor.anchor_id] = {
            "definition": anchor.definition,
            "role": anchor.role.value,
            "subdimensions": [
                s.model_dump(mode="json", exclude={"anchor_id"})
                for s in t.subdimensions
                if s.anchor_id == anchor.anchor_id
            ],
        }
    return {
        "version": t.version,
        "anchors": anchors,
        "edit_log": [record.model_dump(mode="json") for record in t.edit_log],
    }


def load_taxonomy(path: str) -> Taxonomy:
    with open(path, encoding="utf-8") as stream:
        try:
            data = json.load(stream)
        except json.JSONDecodeError as error:
            raise SchemaError(f"{path} is not valid JSON: {error}") from error
    t = parse_taxonomy(data)
    LOGGER.info("Loaded taxonomy v%s with %d leaves from %s", t.version, t.k, path)
    return t


def save_taxonomy(t: Taxonomy, path: str):
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(taxonomy_to_json(t), stream, indent=2)
