"""
Generate synthetic surveys with planted latent structure.

Respondent factors are independent standard normals. Each item is a linear
combination of factors plus Gaussian noise, outcomes follow logistic or linear
index models, and missingness is uniform at random. The generator also writes
the planted split as a refinement proposal so the loop has a truth to find.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq
from scipy.special import expit

from .ecv import Label
from .harmonize import HarmonizationRule, RuleKind, RuleParams, save_rules
from .instrument import (
    MISSING,
    OutcomeKind,
    OutcomeSpec,
    ResponseKind,
    ResponseMatrix,
    SurveyItem,
    Usage,
    save_instrument,
    write_responses,
)
from .mapping import HardMapping, MappingMatrix, MappingRow, save_mapping
from .taxonomy import Anchor, AnchorRole, Subdimension, Taxonomy, save_taxonomy, split_subdimension

LOGGER = logging.getLogger(__name__)


class SynthFactor(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    factor_id: str
    role: AnchorRole = AnchorRole.MECHANISM


class SynthSubdim(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    subdim_id: str
    anchor_id: Optional[str] = None
    definition: str = ""
    anchored: bool = False


class SynthItem(BaseModel):
    """One generated item: its true loadings and the rows it gets in each mapping."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    item_id: str
    stem: str = ""
    loadings: Dict[str, float]
    proposed: Optional[Dict[str, float]] = None
    true: Optional[Dict[str, float]] = None
    usage: Usage = Usage.MECHANISM


class SynthOutcome(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    outcome_id: str
    kind: OutcomeKind = OutcomeKind.BINARY
    coefficients: Dict[str, float]
    base_rate: float = 0.5
    noise_sd: float = 1.0


class PlantedSplit(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    parent: str
    children: Tuple[SynthSubdim, ...]


class SynthSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = 2000
    seed: int = 0
    noise_sd: float = 0.5
    missing_rate: float = 0.02
    factors: Tuple[SynthFactor, ...]
    items: Tuple[SynthItem, ...]
    outcomes: Tuple[SynthOutcome, ...] = ()
    anchors: Tuple[Anchor, ...] = ()
    subdimensions: Tuple[SynthSubdim, ...] = ()
    split: Optional[PlantedSplit] = None

    @model_validator(mode="after")
    def _consistent(self) -> "SynthSpec":
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ValueError(f"missing_rate must lie in [0, 1], got {self.missing_rate}")
        factors = {factor.factor_id for factor in self.factors}
        for item in self.items:
            unknown = set(item.loadings) - factors
            if unknown:
                raise ValueError(f"item {item.item_id} loads on unknown factors {sorted(unknown)}")
        for outcome in self.outcomes:
            if not outcome.coefficients:
                raise ValueError(f"outcome {outcome.outcome_id} names no driving factor")
            unknown = set(outcome.coefficients) - factors
            if unknown:
                raise ValueError(f"outcome {outcome.outcome_id} uses unknown factors {sorted(unknown)}")
            if not 0.0 < outcome.base_rate < 1.0:
                raise ValueError(f"base rate of {outcome.outcome_id} must lie in (0, 1)")
        return self

    @property
    def factor_ids(self) -> List[str]:
        return [factor.factor_id for factor in self.factors]


@dataclass(frozen=True)
class EffectThresholds:
    signal: float = 0.25
    weak: float = 0.05


class GroundTruth(BaseModel):
    model_config = ConfigDict(frozen=True)

    loadings: Dict[str, Dict[str, float]]
    coefficients: Dict[str, Dict[str, float]]
    intercepts: Dict[str, float]
    roles: Dict[str, AnchorRole]
    labels: Dict[str, Label] = Field(default_factory=dict)


def oracle_labels(gt: GroundTruth, thresholds: EffectThresholds = EffectThresholds()) -> Dict[str, Label]:
    """Expected triage label of every mechanism factor from its largest outcome coefficient."""
    labels = {}
    for factor_id, role in gt.roles.items():
        if role != AnchorRole.MECHANISM:
            continue
        effect = max((abs(c.get(factor_id, 0.0)) for c in gt.coefficients.values()), default=0.0)
        if effect >= thresholds.signal:
            labels[factor_id] = Label.SIGNAL
        elif effect >= thresholds.weak:
            labels[factor_id] = Label.WEAK_SIGNAL
        else:
            labels[factor_id] = Label.NOISE_LIKE
    return labels


@dataclass(frozen=True)
class SyntheticData:
    spec: SynthSpec
    instrument: Tuple[SurveyItem, ...]
    responses: ResponseMatrix
    rules: Tuple[HarmonizationRule, ...]
    outcomes: Tuple[OutcomeSpec, ...]
    taxonomy: Taxonomy
    mapping: MappingMatrix
    true_taxonomy: Taxonomy
    true_mapping: MappingMatrix
    hard_mapping: HardMapping
    ground_truth: GroundTruth
    reallocation: Optional[Mapping[str, Any]]
    factors: np.ndarray


def _normalized(loadings: Mapping[str, float]) -> Dict[str, float]:
    total = sum(abs(v) for v in loadings.values())
    return {k: abs(v) / total for k, v in loadings.items() if v != 0}


def _taxonomy(spec: SynthSpec) -> Taxonomy:
    roles = {factor.factor_id: factor.role for factor in spec.factors}
    anchors = spec.anchors
    if not anchors:
        anchors = (Anchor(anchor_id="latent", definition="Planted latent factors."),)
        if AnchorRole.CONTROL in roles.values():
            anchors += (Anchor(anchor_id="controls", definition="Baseline controls.", role=AnchorRole.CONTROL),)
    subdims = spec.subdimensions
    if not subdims:
        subdims = tuple(
            SynthSubdim(
                subdim_id=factor_id,
                anchor_id="controls" if role == AnchorRole.CONTROL else "latent",
                definition=f"Planted factor {factor_id}.",
            )
            for factor_id, role in roles.items()
        )
    return Taxonomy(
        1,
        tuple(anchors),
        tuple(Subdimension(**s.model_dump()) for s in subdims),
    )


def _true_taxonomy(spec: SynthSpec, taxonomy: Taxonomy) -> Taxonomy:
    if spec.split is None:
        return taxonomy
    anchor_id = taxonomy.get(spec.split.parent).anchor_id
    children = [Subdimension(**{**c.model_dump(), "anchor_id": anchor_id}) for c in spec.split.children]
    return split_subdimension(taxonomy, spec.split.parent, children)


def _mapping(spec: SynthSpec, taxonomy: Taxonomy, true: bool) -> MappingMatrix:
    rows = []
    for item in spec.items:
        weights = item.true if true else item.proposed
        if weights is None:
            weights = _normalized(item.loadings)
        rows.append(MappingRow.of(item.item_id, weights, proposer="synthetic"))
    cap = None if true else max((len(row.weights) for row in rows), default=None)
    return MappingMatrix(taxonomy.version, 1, tuple(rows), sparsity_cap=cap).bind(taxonomy)


def _reallocation(spec: SynthSpec, proposed: MappingMatrix, true: MappingMatrix):
    if spec.split is None:
        return None
    rows = []
    for item_id in proposed.items_loading_on([spec.split.parent]):
        rows.append(
            {
                "item_id": item_id,
                "weights": true.row(item_id).as_dict(),
                "rationale": "Planted loading.",
                "not_this": f"Not the aggregate {spec.split.parent}.",
            }
        )
    return {
        "target": spec.split.parent,
        "operation": "split",
        "children": [
            {"subdim_id": child.subdim_id, "definition": child.definition} for child in spec.split.children
        ],
        "new_subdimensions": [],
        "rows": rows,
    }


def _instrument(spec: SynthSpec) -> Tuple[SurveyItem, ...]:
    items = [
        SurveyItem(
            item_id=item.item_id,
            stem_text=item.stem or f"Synthetic item {item.item_id}.",
            response_kind=ResponseKind.NUMERIC,
            usage=item.usage,
        )
        for item in spec.items
    ]
    for outcome in spec.outcomes:
        kind = ResponseKind.BINARY if outcome.kind == OutcomeKind.BINARY else ResponseKind.NUMERIC
        items.append(
            SurveyItem(
                item_id=outcome.outcome_id,
                stem_text=f"Outcome {outcome.outcome_id}.",
                response_kind=kind,
                usage=Usage.OUTCOME,
            )
        )
    return tuple(items)


def _rules(spec: SynthSpec) -> Tuple[HarmonizationRule, ...]:
    rules = [HarmonizationRule(item_id=item.item_id, kind=RuleKind.IDENTITY_NUMERIC) for item in spec.items]
    raw = RuleParams(winsorize=None, standardize=False)
    for outcome in spec.outcomes:
        kind = RuleKind.BINARY_01 if outcome.kind == OutcomeKind.BINARY else RuleKind.IDENTITY_NUMERIC
        rules.append(HarmonizationRule(item_id=outcome.outcome_id, kind=kind, params=raw))
    return tuple(rules)


def _token(value: float) -> Optional[str]:
    return MISSING if np.isnan(value) else repr(float(value))


def generate(spec: SynthSpec) -> SyntheticData:
    """Draw one synthetic survey; the same spec always yields the same data."""
    rng = np.random.default_rng(spec.seed)
    factor_ids = spec.factor_ids
    n, n_items = spec.n, len(spec.items)

    factors = rng.standard_normal((n, len(factor_ids)))
    noise = rng.standard_normal((n, n_items))
    missing = rng.random((n, n_items)) < spec.missing_rate

    loadings = np.zeros((len(factor_ids), n_items))
    for j, item in enumerate(spec.items):
        for factor_id, value in item.loadings.items():
            loadings[factor_ids.index(factor_id), j] = value
    values = factors @ loadings + spec.noise_sd * noise
    values[missing] = np.nan

    columns = [[_token(v) for v in values[:, j]] for j in range(n_items)]
    intercepts = {}
    for outcome in spec.outcomes:
        beta = np.array([outcome.coefficients.get(f, 0.0) for f in factor_ids])
        index = factors @ beta
        if outcome.kind == OutcomeKind.BINARY:
            draws = rng.random(n)
            target = outcome.base_rate

            def gap(b, index=index, target=target):
                return float(np.mean(expit(index + b))) - target

            intercept = float(brentq(gap, -50.0, 50.0))
            y = (draws < expit(index + intercept)).astype(int)
            columns.append([str(v) for v in y])
        else:
            intercept = 0.0
            y = index + outcome.noise_sd * rng.standard_normal(n)
            columns.append([_token(v) for v in y])
        intercepts[outcome.outcome_id] = intercept

    instrument = _instrument(spec)
    cells = np.empty((n, len(instrument)), dtype=object)
    for j, column in enumerate(columns):
        cells[:, j] = column
    responses = ResponseMatrix(
        tuple(f"R{i + 1:05d}" for i in range(n)),
        tuple(item.item_id for item in instrument),
        cells,
        instrument,
    )

    taxonomy = _taxonomy(spec)
    true_taxonomy = _true_taxonomy(spec, taxonomy)
    mapping = _mapping(spec, taxonomy, true=False)
    true_mapping = _mapping(spec, true_taxonomy, true=True)
    hard = HardMapping(
        {row.item_id: taxonomy.get(row.weights[0][0]).anchor_id for row in mapping.rows}
    )

    truth = GroundTruth(
        loadings={item.item_id: dict(item.loadings) for item in spec.items},
        coefficients={o.outcome_id: dict(o.coefficients) for o in spec.outcomes},
        intercepts=intercepts,
        roles={factor.factor_id: factor.role for factor in spec.factors},
    )
    truth = truth.model_copy(update={"labels": oracle_labels(truth)})

    LOGGER.info("Generated %d respondents, %d items, %d outcomes", n, n_items, len(spec.outcomes))
    return SyntheticData(
        spec,
        instrument,
        responses,
        _rules(spec),
        tuple(OutcomeSpec(outcome_id=o.outcome_id, kind=o.kind) for o in spec.outcomes),
        taxonomy,
        mapping,
        true_taxonomy,
        true_mapping,
        hard,
        truth,
        _reallocation(spec, mapping, true_mapping),
        factors,
    )


def _dump(data: Any, path: str):
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(data, stream, indent=2, sort_keys=True)


def write_synthetic(data: SyntheticData, out_dir: str) -> Dict[str, str]:
    """Write every artifact in the pipeline's file formats and return the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "spec": os.path.join(out_dir, "synth_spec.json"),
        "instrument": os.path.join(out_dir, "instrument.json"),
        "responses": os.path.join(out_dir, "responses.csv"),
        "rules": os.path.join(out_dir, "rules.json"),
        "outcomes": os.path.join(out_dir, "outcomes.json"),
        "taxonomy": os.path.join(out_dir, "taxonomy.json"),
        "mapping": os.path.join(out_dir, "mapping.json"),
        "true_taxonomy": os.path.join(out_dir, "true_taxonomy.json"),
        "true_mapping": os.path.join(out_dir, "true_mapping.json"),
        "hard_mapping": os.path.join(out_dir, "hard_mapping.json"),
        "ground_truth": os.path.join(out_dir, "ground_truth.json"),
        "proposals": os.path.join(out_dir, "proposals"),
    }
    _dump(data.spec.model_dump(mode="json"), paths["spec"])
    save_instrument(data.instrument, paths["instrument"])
    write_responses(data.responses, paths["responses"])
    save_rules(data.rules, paths["rules"])
    _dump([o.model_dump(mode="json", exclude_none=True) for o in data.outcomes], paths["outcomes"])
    save_taxonomy(data.taxonomy, paths["taxonomy"])
    save_mapping(data.mapping, paths["mapping"])
    save_taxonomy(data.true_taxonomy, paths["true_taxonomy"])
    save_mapping(data.true_mapping, paths["true_mapping"])
    _dump(dict(data.hard_mapping.assignments), paths["hard_mapping"])
    _dump(data.ground_truth.model_dump(mode="json"), paths["ground_truth"])

    os.makedirs(paths["proposals"], exist_ok=True)
    if data.reallocation is not None:
        target = data.reallocation["target"]
        _dump(data.reallocation, os.path.join(paths["proposals"], "refinement.json"))
        _dump(data.reallocation, os.path.join(paths["proposals"], f"refinement-{target}.json"))
    LOGGER.info("Wrote synthetic survey to %s", out_dir)
    return paths


def load_synth_spec(path: str) -> SynthSpec:
    with open(path, encoding="utf-8") as stream:
        return SynthSpec.model_validate(json.load(stream))


def default_spec(seed: int = 0, n: int = 2000) -> SynthSpec:
    """
    The planted design used by the acceptance checks.

    `service_tenure` drives the outcomes strongly and `health_risk` not at all.
    `generosity` aggregates items of two child factors whose effects
    cancel once the literacy share of those items is counted, so the parent
    looks noise-like; `plan_value` items load on the same composite, which
    puts the two in one overlap cluster. Splitting the parent recovers two
    signal-bearing children and clears the overlap.
    """
    mechanism = AnchorRole.MECHANISM
    factors = (
        SynthFactor(factor_id="service_tenure"),
        SynthFactor(factor_id="health_risk"),
        SynthFactor(factor_id="financial_literacy"),
        SynthFactor(factor_id="benefit_value"),
        SynthFactor(factor_id="employer_contribution"),
        SynthFactor(factor_id="demographics", role=AnchorRole.CONTROL),
    )
    anchors = (
        Anchor(anchor_id="econ_constraints", definition="Economic constraints on the decision.", role=mechanism),
        Anchor(anchor_id="cognition", definition="Financial knowledge and reasoning.", role=mechanism),
        Anchor(anchor_id="plan_beliefs", definition="Beliefs about the retirement plan.", role=mechanism),
        Anchor(anchor_id="controls", definition="Baseline respondent characteristics.", role=AnchorRole.CONTROL),
    )
    subdims = (
        SynthSubdim(subdim_id="service_tenure", anchor_id="econ_constraints", definition="Years of service locked in."),
        SynthSubdim(subdim_id="health_risk", anchor_id="econ_constraints", definition="Expected health shocks."),
        SynthSubdim(
            subdim_id="financial_literacy",
            anchor_id="cognition",
            definition="Knowledge of interest, inflation, and risk.",
            anchored=True,
        ),
        SynthSubdim(subdim_id="generosity", anchor_id="plan_beliefs", definition="How generous the plan seems."),
        SynthSubdim(subdim_id="plan_value", anchor_id="plan_beliefs", definition="Overall value of the plan."),
        SynthSubdim(subdim_id="demographics", anchor_id="controls", definition="Age, sex, and household."),
    )

    def single(prefix, factor, count, stem, usage=Usage.MECHANISM):
        return [
            SynthItem(
                item_id=f"{prefix}{i + 1}",
                stem=f"{stem} ({i + 1})",
                loadings={factor: 1.0},
                proposed={factor: 1.0},
                true={factor: 1.0},
                usage=usage,
            )
            for i in range(count)
        ]

    items = single("ST", "service_tenure", 3, "How many years of service would you give up by leaving?")
    items += single("HR", "health_risk", 3, "How likely is a major health expense in the next five years?")
    items += single("FL", "financial_literacy", 4, "Answer the following question about compound interest.")
    for i in range(2):
        items.append(
            SynthItem(
                item_id=f"GB{i + 1}",
                stem=f"How much is your pension benefit worth compared with alternatives? ({i + 1})",
                loadings={"benefit_value": 0.75, "financial_literacy": 0.25},
                proposed={"generosity": 0.75, "financial_literacy": 0.25},
                true={"benefit_value": 0.75, "financial_literacy": 0.25},
            )
        )
    for i in range(2):
        items.append(
            SynthItem(
                item_id=f"GE{i + 1}",
                stem=f"How much does your employer add to the plan for you? ({i + 1})",
                loadings={"employer_contribution": 0.60, "financial_literacy": 0.40},
                proposed={"generosity": 0.60, "financial_literacy": 0.40},
                true={"employer_contribution": 0.60, "financial_literacy": 0.40},
            )
        )
    for i in range(4):
        items.append(
            SynthItem(
                item_id=f"PV{i + 1}",
                stem=f"Overall, how good a deal is the plan? ({i + 1})",
                loadings={"benefit_value": 0.71, "employer_contribution": 0.45, "financial_literacy": 0.54},
                proposed={"plan_value": 1.0},
            )
        )
    items += single("DM", "demographics", 3, "Tell us about your household.", Usage.CONTROL)

    coefficients = {
        "service_tenure": 1.0,
        "health_risk": 0.0,
        "financial_literacy": 0.5,
        "benefit_value": 0.5,
        "employer_contribution": -1.34,
        "demographics": 0.5,
    }
    outcomes = (
        SynthOutcome(outcome_id="accept", kind=OutcomeKind.BINARY, coefficients=coefficients),
        SynthOutcome(outcome_id="contribution_rate", kind=OutcomeKind.CONTINUOUS, coefficients=coefficients),
    )
    split = PlantedSplit(
        parent="generosity",
        children=(
            SynthSubdim(subdim_id="benefit_value", definition="Value of the promised benefit."),
            SynthSubdim(subdim_id="employer_contribution", definition="Employer money added to the plan."),
        ),
    )
    return SynthSpec(
        n=n,
        seed=seed,
        factors=factors,
        items=tuple(items),
        outcomes=outcomes,
        anchors=anchors,
        subdimensions=subdims,
        split=split,
    )


def null_spec(seed: int = 0, n: int = 2000) -> SynthSpec:
    """The default design with every outcome coefficient set to zero."""
    spec = default_spec(seed, n)
    outcomes = tuple(
        o.model_copy(update={"coefficients": {k: 0.0 for k in o.coefficients}}) for o in spec.outcomes
    )
    return spec.model_copy(update={"outcomes": outcomes})
