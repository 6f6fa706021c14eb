"""
Produce taxonomy, mapping, and refinement proposals and validate them before use.

Proposals come from fixture files or from a remote chat-style endpoint; both
sit behind the same `Proposer.fetch` contract. No request ever carries outcome
data.
"""

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from string import Template
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import requests
from joblib import Parallel, delayed
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, RootModel, ValidationError

from .errors import (
    ConstraintViolation,
    MaxRetries,
    MissingSlot,
    NetworkError,
    OutcomeLeak,
    ProposerFailure,
    RateLimited,
    UnparseableResponse,
)
from .findings import Finding, ValidationReport
from .instrument import SurveyItem, Usage
from .mapping import MappingMatrix, MappingRecord, MappingRow
from .math_helper import SIMPLEX_TOLERANCE, renormalize
from .taxonomy import Anchor, Subdimension, Taxonomy

LOGGER = logging.getLogger(__name__)

ENDPOINT_ENV = "MASEYA_MEASURE_ENDPOINT"
MODEL_ENV = "MASEYA_MEASURE_MODEL"
API_KEY_ENV = "MASEYA_MEASURE_API_KEY"

# Rows whose weights sum inside this band are renormalized with a finding.
SUM_BAND = (0.9, 1.1)

# Context keys that would carry outcome data into a request.
OUTCOME_KEYS = frozenset({"outcome", "outcomes", "outcome_values", "responses", "labels"})


class ProposalKind(str, Enum):
    TAXONOMY_INDUCTION = "taxonomy_induction"
    SOFT_MAPPING = "soft_mapping"
    REFINEMENT = "refinement"


class ProposalConstraints(BaseModel):
    model_config = ConfigDict(frozen=True)

    m: Optional[int] = None
    secondary_lo: float = 0.05
    secondary_hi: float = 0.20
    neighborhood: Tuple[str, ...] = ()
    leaf_ids: Tuple[str, ...] = ()
    target: Optional[str] = None


class ProposalRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ProposalKind
    prompt: str
    template_version: str
    constraints: ProposalConstraints = ProposalConstraints()
    taxonomy_version: Optional[int] = None
    mapping_version: Optional[int] = None

    def request_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()

    def to_messages(self) -> List[Mapping[str, str]]:
        return [
            {"role": "system", "content": "Reply with a single JSON payload."},
            {"role": "user", "content": self.prompt},
        ]


def _read_internal_text(name: str, text_dir: str = None) -> str:
    """Read a text file in the internal "data" folder."""
    if not text_dir:
        text_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "templates")
    with open(os.path.join(text_dir, name), encoding="utf-8") as stream:
        return stream.read()


def load_template(kind: ProposalKind, template_dir: str = None) -> Tuple[str, str]:
    """Return (version, body) of a prompt template."""
    text = _read_internal_text(f"{kind.value}.txt", template_dir)
    header, _, body = text.partition("\n")
    if not header.startswith("# template-version:"):
        raise MissingSlot(f"template {kind.value} has no version header")
    return header.split(":", 1)[1].strip(), body


def _lines(values: Iterable[Any]) -> str:
    lines = []
    for value in values:
        if isinstance(value, SurveyItem):
            lines.append(f"- Item {value.item_id}: {value.stem_text}")
        elif isinstance(value, Anchor):
            lines.append(f"- {value.anchor_id}: {value.definition}")
        elif isinstance(value, Subdimension):
            text = f"- {value.subdim_id} ({value.anchor_id}): {value.definition}"
            if value.inclusion_rules:
                text += " Include: " + "; ".join(value.inclusion_rules) + "."
            if value.exclusion_rules:
                text += " Exclude: " + "; ".join(value.exclusion_rules) + "."
            lines.append(text)
        else:
            lines.append(f"- {value}")
    return "\n".join(lines)


def _slot_text(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return _lines(value)
    return str(value)


def _check_outcome_blind(context: Mapping[str, Any]):
    for key, value in context.items():
        if key in OUTCOME_KEYS:
            raise OutcomeLeak(f"context key {key!r} would send outcome data", key=key)
        values = value if isinstance(value, (list, tuple)) else [value]
        for entry in values:
            if isinstance(entry, SurveyItem) and entry.usage == Usage.OUTCOME:
                raise OutcomeLeak(f"outcome item {entry.item_id} is in the request", item_id=entry.item_id)


def render_prompt(
    kind: ProposalKind,
    context: Mapping[str, Any],
    constraints: ProposalConstraints = ProposalConstraints(),
    taxonomy_version: Optional[int] = None,
    mapping_version: Optional[int] = None,
    template_dir: str = None,
) -> ProposalRequest:
    """Fill a template's slots from the context; the template version heads the prompt."""
    kind = ProposalKind(kind)
    _check_outcome_blind(context)
    version, body = load_template(kind, template_dir)
    slots = {key: _slot_text(value) for key, value in context.items()}
    try:
        text = Template(body).substitute(slots)
    except KeyError as error:
        raise MissingSlot(f"template {kind.value} needs slot {error.args[0]!r}", slot=error.args[0]) from None
    return ProposalRequest(
        kind=kind,
        prompt=f"[{kind.value} template v{version}]\n{text}",
        template_version=version,
        constraints=constraints,
        taxonomy_version=taxonomy_version,
        mapping_version=mapping_version,
    )


class ProposedSubdimension(BaseModel):
    model_config = ConfigDict(extra="ignore")

    subdim_id: str = Field(validation_alias=AliasChoices("subdim_id", "name"))
    definition: str = ""
    inclusion_rules: Tuple[str, ...] = ()
    exclusion_rules: Tuple[str, ...] = ()
    representative_item_ids: Tuple[str, ...] = Field(
        default=(), validation_alias=AliasChoices("representative_item_ids", "representative_items")
    )

    def to_subdimension(self, anchor_id: str) -> Subdimension:
        return Subdimension(anchor_id=anchor_id, **self.model_dump())


class TaxonomyPayload(RootModel[Dict[str, List[ProposedSubdimension]]]):
    pass


class MappingPayload(BaseModel):
    rows: List[MappingRecord]


class PrimarySecondaryRow(BaseModel):
    model_config = ConfigDict(extra="ignore")

    item_id: str
    primary: str
    primary_weight: float = 1.0
    secondary: Optional[str] = None
    secondary_weight: Optional[float] = None
    rationale: str = ""
    not_this: str = ""


class RefinementPayload(BaseModel):
    model_config = ConfigDict(extra="ignore")

    target: Optional[str] = None
    operation: str = "split"
    children: List[ProposedSubdimension] = []
    new_subdimensions: List[ProposedSubdimension] = []
    rows: List[MappingRecord] = []
    primary_secondary: List[PrimarySecondaryRow] = []
    tau: Optional[float] = None


@dataclass(frozen=True)
class Reallocation:
    """A validated refinement proposal."""

    operation: str
    target: Optional[str] = None
    children: Tuple[ProposedSubdimension, ...] = ()
    new_subdimensions: Tuple[ProposedSubdimension, ...] = ()
    rows: Tuple[MappingRow, ...] = ()
    tau: Optional[float] = None

    def to_json(self) -> Mapping[str, Any]:
        return {
            "operation": self.operation,
            "target": self.target,
            "children": [child.model_dump(mode="json") for child in self.children],
            "new_subdimensions": [s.model_dump(mode="json") for s in self.new_subdimensions],
            "rows": [
                {"item_id": row.item_id, "weights": dict(row.weights), "rationale": row.rationale, "not_this": row.not_this}
                for row in self.rows
            ],
            "tau": self.tau,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "Reallocation":
        return cls(
            data.get("operation", "split"),
            data.get("target"),
            tuple(ProposedSubdimension.model_validate(c) for c in data.get("children", [])),
            tuple(ProposedSubdimension.model_validate(s) for s in data.get("new_subdimensions", [])),
            tuple(MappingRecord.model_validate(r).to_row() for r in data.get("rows", [])),
            data.get("tau"),
        )


@dataclass(frozen=True)
class ProposalResponse:
    kind: ProposalKind
    raw: str
    payload: Any
    findings: ValidationReport = field(default_factory=ValidationReport)


def extract_json(raw: str) -> Any:
    """Decode the first JSON object or array in the text, ignoring surrounding prose."""
    decoder = json.JSONDecoder()
    for start, char in enumerate(raw):
        if char not in "{[":
            continue
        try:
            value, _ = decoder.raw_decode(raw, start)
        except json.JSONDecodeError:
            continue
        return value
    raise UnparseableResponse("no JSON payload in the response", raw_response=raw)


def _check_row(
    row: MappingRow,
    constraints: ProposalConstraints,
    allowed: Sequence[str],
    findings: List[Finding],
) -> MappingRow:
    if not row.weights:
        raise ConstraintViolation(f"row {row.item_id} has no weights", item_id=row.item_id)
    for subdim_id, weight in row.weights:
        if not math.isfinite(weight) or weight < 0:
            raise ConstraintViolation(f"row {row.item_id} has weight {weight} on {subdim_id}", item_id=row.item_id)
        if allowed and subdim_id not in allowed:
            raise ConstraintViolation(f"row {row.item_id} names unknown construct {subdim_id!r}", item_id=row.item_id)

    nonzero = sum(weight > 0 for _, weight in row.weights)
    if constraints.m is not None and nonzero > constraints.m:
        raise ConstraintViolation(
            f"row {row.item_id} has {nonzero} nonzero weights, cap is {constraints.m}", item_id=row.item_id
        )

    total = row.total
    if abs(total - 1.0) <= SIMPLEX_TOLERANCE:
        return row
    if SUM_BAND[0] <= total <= SUM_BAND[1]:
        findings.append(Finding("renormalized", row.item_id, f"weights summed to {total:.6g}"))
        return row.with_weights(renormalize(row.weights))
    raise ConstraintViolation(f"row {row.item_id} sums to {total:.6g}", item_id=row.item_id)


def _project_primary_secondary(
    entry: PrimarySecondaryRow, constraints: ProposalConstraints, findings: List[Finding]
) -> MappingRow:
    if abs(entry.primary_weight - 1.0) > SIMPLEX_TOLERANCE:
        raise ConstraintViolation(f"primary weight of {entry.item_id} must be 1.0", item_id=entry.item_id)
    if entry.secondary is None or not entry.secondary_weight:
        weights = {entry.primary: 1.0}
    else:
        share = entry.secondary_weight
        if not constraints.secondary_lo <= share <= constraints.secondary_hi:
            raise ConstraintViolation(
                f"secondary weight {share} of {entry.item_id} is outside "
                f"[{constraints.secondary_lo}, {constraints.secondary_hi}]",
                item_id=entry.item_id,
            )
        weights = {entry.primary: 1.0 - share, entry.secondary: share}
        findings.append(Finding("projected", entry.item_id, f"primary set to {1.0 - share:.6g}"))
    return MappingRow.of(entry.item_id, weights, rationale=entry.rationale, not_this=entry.not_this)


def _normalize_mapping(data: Any) -> Any:
    if isinstance(data, dict) and "rows" in data:
        return data
    if isinstance(data, dict):
        return {"rows": [data]}
    return {"rows": data}


def _normalize_taxonomy(data: Any) -> Any:
    if isinstance(data, dict) and "taxonomy" in data:
        data = data["taxonomy"]
    if isinstance(data, dict) and isinstance(data.get("anchors"), dict):
        data = data["anchors"]
    return data


def parse_and_validate(
    raw: str, kind: ProposalKind, constraints: ProposalConstraints = ProposalConstraints()
) -> ProposalResponse:
    """
    Extract the JSON payload of a response and check it against its schema and constraints.

    The only repair is renormalizing rows that sum within [0.9, 1.1]; every
    repair is recorded as a finding.
    """
    kind = ProposalKind(kind)
    data = extract_json(raw)
    findings: List[Finding] = []
    try:
        if kind == ProposalKind.TAXONOMY_INDUCTION:
            parsed = TaxonomyPayload.model_validate(_normalize_taxonomy(data))
        elif kind == ProposalKind.SOFT_MAPPING:
            parsed = MappingPayload.model_validate(_normalize_mapping(data))
        else:
            parsed = RefinementPayload.model_validate(data)
    except ValidationError as error:
        raise UnparseableResponse(
            f"{kind.value} payload does not match its schema", raw_response=raw, validation_error=error
        ) from error

    if kind == ProposalKind.TAXONOMY_INDUCTION:
        subdims = [
            proposed.to_subdimension(anchor_id)
            for anchor_id, proposals in parsed.root.items()
            for proposed in proposals
        ]
        seen = set()
        for subdim in subdims:
            if subdim.subdim_id in seen:
                findings.append(Finding("duplicate_id", subdim.subdim_id, "proposed twice"))
            seen.add(subdim.subdim_id)
        return ProposalResponse(kind, raw, subdims, ValidationReport(findings))

    if kind == ProposalKind.SOFT_MAPPING:
        rows = [_check_row(r.to_row(), constraints, constraints.leaf_ids, findings) for r in parsed.rows]
        return ProposalResponse(kind, raw, rows, ValidationReport(findings))

    allowed = list(constraints.leaf_ids)
    if allowed:
        allowed += [child.subdim_id for child in parsed.children]
        allowed += [new.subdim_id for new in parsed.new_subdimensions]
        if parsed.operation == "split" and parsed.target in allowed:
            allowed.remove(parsed.target)
    rows = [_check_row(r.to_row(), constraints, allowed, findings) for r in parsed.rows]
    rows += [_project_primary_secondary(r, constraints, findings) for r in parsed.primary_secondary]
    reallocation = Reallocation(
        parsed.operation,
        parsed.target or constraints.target,
        tuple(parsed.children),
        tuple(parsed.new_subdimensions),
        tuple(rows),
        parsed.tau,
    )
    return ProposalResponse(kind, raw, reallocation, ValidationReport(findings))


class AuditStore:
    """Directory of content-addressed request/response records."""

    def __init__(self, directory: str):
        self._directory = directory
        os.makedirs(directory, exist_ok=True)

    @property
    def directory(self) -> str:
        return self._directory

    def record(self, request: ProposalRequest, raw: str, response: ProposalResponse = None) -> str:
        record = {
            "request": request.model_dump(mode="json"),
            "request_hash": request.request_hash(),
            "template_version": request.template_version,
            "response": raw,
        }
        if response is not None:
            record["findings"] = response.findings.to_json()
            payload = response.payload
            if isinstance(payload, Reallocation):
                record["payload"] = payload.to_json()
        text = json.dumps(record, sort_keys=True, indent=2, default=str)
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        path = os.path.join(self._directory, f"{digest}.json")
        if not os.path.exists(path):
            with open(path, "w", encoding="utf-8") as stream:
                stream.write(text)
            LOGGER.debug("Archived proposal record %s", path)
        return path


class Proposer:
    """Turns a request into raw response text."""

    name = "proposer"

    def fetch(self, request: ProposalRequest) -> str:
        raise NotImplementedError


class FixtureProposer(Proposer):
    """Read responses from files keyed by request hash, then by kind and target."""

    name = "fixture"

    def __init__(self, directory: str):
        self._directory = directory

    def candidates(self, request: ProposalRequest) -> List[str]:
        names = [f"{request.request_hash()}.json"]
        if request.constraints.target:
            names.append(f"{request.kind.value}-{request.constraints.target}.json")
        names.append(f"{request.kind.value}.json")
        return [os.path.join(self._directory, name) for name in names]

    def fetch(self, request: ProposalRequest) -> str:
        for path in self.candidates(request):
            if os.path.isfile(path):
                LOGGER.info("Using fixture proposal %s", path)
                with open(path, encoding="utf-8") as stream:
                    return stream.read()
        raise ProposerFailure(
            f"no fixture for {request.kind.value} request in {self._directory}",
            request_hash=request.request_hash(),
        )


@dataclass(frozen=True)
class EndpointConfig:
    url: Optional[str] = None
    model: str = ""
    temperature: float = 0.0
    api_key: Optional[str] = field(default=None, repr=False)
    max_retries: int = 5
    backoff: float = 1.0
    timeout: float = 60.0

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        values = {
            "url": os.environ.get(ENDPOINT_ENV),
            "model": os.environ.get(MODEL_ENV, ""),
            "api_key": os.environ.get(API_KEY_ENV),
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)


def _response_text(response) -> str:
    try:
        body = response.json()
    except ValueError:
        return response.text
    if isinstance(body, dict):
        choices = body.get("choices")
        if choices:
            message = choices[0].get("message") or {}
            return message.get("content") or choices[0].get("text", "")
        for key in ("content", "text", "output"):
            if isinstance(body.get(key), str):
                return body[key]
    return json.dumps(body)


def fetch_remote(
    request: ProposalRequest,
    config: EndpointConfig,
    session=None,
    audit: Optional[AuditStore] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """
    POST the request as chat messages and return the response text.

    Connection errors, HTTP 5xx and HTTP 429 are retried with exponential
    backoff up to `config.max_retries` times.
    """
    if not config.url:
        raise NetworkError(f"no proposer endpoint configured; set {ENDPOINT_ENV}")
    session = session or requests.Session()
    body = {
        "model": config.model,
        "temperature": config.temperature,
        "messages": request.to_messages(),
    }
    headers = {"Content-Type": "application/json"}
    if config.api_key:
        headers["Authorization"] = f"Bearer {config.api_key}"

    for attempt in range(config.max_retries + 1):
        try:
            response = session.post(config.url, json=body, headers=headers, timeout=config.timeout)
        except requests.RequestException as error:
            failure = NetworkError(f"request failed: {error}")
        else:
            status = response.status_code
            if status == 429:
                failure = RateLimited("endpoint rate limited the request", status=status)
            elif status >= 500:
                failure = NetworkError(f"endpoint returned HTTP {status}", status=status)
            elif status >= 400:
                raise NetworkError(f"endpoint rejected the request with HTTP {status}", status=status)
            else:
                text = _response_text(response)
                if attempt:
                    LOGGER.info("Proposer request succeeded after %d retries", attempt)
                if audit is not None:
                    audit.record(request, text)
                return text

        if attempt == config.max_retries:
            raise MaxRetries(f"gave up after {attempt} retries: {failure}", retries=attempt) from failure
        delay = config.backoff * (2 ** attempt)
        LOGGER.warning("Proposer retry %d in %.1fs: %s", attempt + 1, delay, failure)
        sleep(delay)
    raise MaxRetries("retry loop exhausted")


class RemoteProposer(Proposer):
    name = "remote"

    def __init__(self, config: EndpointConfig, session=None, audit: AuditStore = None, sleep=time.sleep):
        self._config = config
        self._session = session
        self._audit = audit
        self._sleep = sleep

    def fetch(self, request: ProposalRequest) -> str:
        return fetch_remote(request, self._config, self._session, self._audit, self._sleep)


def request_proposal(
    proposer: Proposer,
    request: ProposalRequest,
    retries: int = 2,
    audit: Optional[AuditStore] = None,
) -> ProposalResponse:
    """Fetch and validate, asking again on invalid proposals; ProposerFailure after the cap."""
    failure = None
    for attempt in range(retries + 1):
        try:
            raw = proposer.fetch(request)
        except NetworkError as error:
            raise ProposerFailure(f"proposer unreachable: {error}") from error
        try:
            response = parse_and_validate(raw, request.kind, request.constraints)
        except (UnparseableResponse, ConstraintViolation) as error:
            failure = error
            LOGGER.warning("Invalid %s proposal (attempt %d): %s", request.kind.value, attempt + 1, error)
            continue
        if audit is not None:
            audit.record(request, raw, response)
        return response
    raise ProposerFailure(
        f"no valid {request.kind.value} proposal after {retries + 1} attempts: {failure}"
    ) from failure


def propose_taxonomy(
    proposer: Proposer,
    anchors: Sequence[Anchor],
    items: Sequence[SurveyItem],
    granularity: int = 5,
    audit: AuditStore = None,
) -> Taxonomy:
    """Induce a first taxonomy from anchors and item stems."""
    stems = [item for item in items if item.usage != Usage.OUTCOME]
    request = render_prompt(
        ProposalKind.TAXONOMY_INDUCTION,
        {"anchors": list(anchors), "items": stems, "granularity": granularity},
    )
    response = request_proposal(proposer, request, audit=audit)
    known = {anchor.anchor_id for anchor in anchors}
    subdims = [s for s in response.payload if s.anchor_id in known]
    return Taxonomy(1, tuple(anchors), tuple(subdims))


def propose_mapping(
    proposer: Proposer,
    taxonomy: Taxonomy,
    items: Sequence[SurveyItem],
    m: int = 2,
    audit: AuditStore = None,
    n_jobs: int = 1,
) -> MappingMatrix:
    """One soft-mapping request per mechanism or control item, issued concurrently."""
    leaves = taxonomy.leaves
    constraints = ProposalConstraints(m=m, leaf_ids=tuple(s.subdim_id for s in leaves))
    targets = [item for item in items if item.usage in (Usage.MECHANISM, Usage.CONTROL)]

    def propose(item: SurveyItem) -> MappingRow:
        request = render_prompt(
            ProposalKind.SOFT_MAPPING,
            {"constructs": leaves, "item_id": item.item_id, "stem": item.stem_text, "m": m},
            constraints.model_copy(update={"target": item.item_id}),
            taxonomy_version=taxonomy.version,
        )
        rows = request_proposal(proposer, request, audit=audit).payload
        for row in rows:
            if row.item_id == item.item_id:
                return row
        raise ProposerFailure(f"proposal does not cover item {item.item_id}")

    rows = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(propose)(item) for item in targets)
    rows = [MappingRow.of(r.item_id, r.weights, rationale=r.rationale, not_this=r.not_this, proposer=proposer.name) for r in rows]
    return MappingMatrix(taxonomy.version, 1, tuple(rows), sparsity_cap=m).bind(taxonomy)
