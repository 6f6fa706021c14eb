"""
Validate soft-mapped survey constructs against downstream outcomes.
"""

from .ecv import (
    Candidate,
    DeltaReport,
    EvaluationInputs,
    FoldPlan,
    Label,
    classify,
    evaluate_candidates,
    incremental_validity,
    make_fold_plan,
    outer_evaluate,
)
from .harmonize import apply_rules, fit_fold_transform, apply_fold_transform
from .instrument import load_instrument, load_responses, load_outcomes
from .mapping import MappingMatrix, MappingRow, load_mapping, validate_mapping
from .options import get_options, resolve_config
from .pipeline import main, run_from_options
from .scoring import ScoringRule, build_scores
from .taxonomy import Taxonomy, load_taxonomy
