"""
Get options from the command line, a config file, or a previous run's manifest.
"""

import argparse
import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Mapping, Optional, Tuple

from .errors import PreconditionError, SchemaError

COMMANDS = (
    "synth",
    "harmonize",
    "score",
    "validate",
    "diagnose",
    "refine",
    "placebo",
    "grid",
    "report",
)

# Subcommands that only reformat earlier outputs.
SEEDLESS = ("report",)

MANIFEST_NAME = "manifest.json"


def _read_internal_json(json_path: str, json_dir: str = None) -> Any:
    if not json_dir:
        json_dir = os.path.join(os.path.dirname(__file__), "data")

    with open(os.path.join(json_dir, json_path), encoding="utf-8") as stream:
        return json.load(stream)


def load_defaults(json_dir: str = None) -> Dict[str, Any]:
    return _read_internal_json("defaults.json", json_dir)


_DEFAULTS = load_defaults()


@dataclass(frozen=True)
class RunConfig:
    """Every parameter of one run; echoed into the manifest before computing."""

    command: str
    seed: Optional[int] = None
    out: str = "out"
    instrument: Optional[str] = None
    responses: Optional[str] = None
    rules: Optional[str] = None
    outcomes: Optional[str] = None
    taxonomy: Optional[str] = None
    mapping: Optional[str] = None
    hard_mapping: Optional[str] = None
    missing_tokens: Tuple[str, ...] = tuple(_DEFAULTS["missing_tokens"])
    tau: float = _DEFAULTS["tau"]
    top_m: int = _DEFAULTS["top_m"]
    overlap_cutoff: float = _DEFAULTS["overlap_cutoff"]
    closeness: float = _DEFAULTS["closeness"]
    outer_folds: int = _DEFAULTS["outer_folds"]
    inner_folds: int = _DEFAULTS["inner_folds"]
    repeats: int = _DEFAULTS["repeats"]
    scoring_rule: str = _DEFAULTS["scoring_rule"]
    post_standardize: bool = _DEFAULTS["post_standardize"]
    signal_share: float = _DEFAULTS["signal_share"]
    weak_share: float = _DEFAULTS["weak_share"]
    pass_share: float = _DEFAULTS["pass_share"]
    min_n: int = _DEFAULTS["min_n"]
    min_items: int = _DEFAULTS["min_items"]
    min_sd: float = _DEFAULTS["min_sd"]
    secondary_lo: float = _DEFAULTS["secondary_lo"]
    secondary_hi: float = _DEFAULTS["secondary_hi"]
    max_rounds: int = _DEFAULTS["max_rounds"]
    plateau_delta: float = _DEFAULTS["plateau_delta"]
    patience: int = _DEFAULTS["patience"]
    discard_after: int = _DEFAULTS["discard_after"]
    proposer_retries: int = _DEFAULTS["proposer_retries"]
    outer_index: Optional[int] = None
    proposals: Optional[str] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    temperature: float = _DEFAULTS["temperature"]
    draws: int = _DEFAULTS["draws"]
    placebo_kind: str = _DEFAULTS["placebo_kind"]
    smooth: bool = _DEFAULTS["smooth"]
    outcome: Optional[str] = None
    l2: float = _DEFAULTS["l2"]
    max_iter: int = _DEFAULTS["max_iter"]
    n_jobs: int = _DEFAULTS["n_jobs"]
    spec: Optional[str] = None
    synth_n: int = _DEFAULTS["synth_n"]
    granularity: int = _DEFAULTS["granularity"]
    grid_taus: Tuple[float, ...] = tuple(_DEFAULTS["grid_taus"])
    grid_ms: Tuple[int, ...] = tuple(_DEFAULTS["grid_ms"])
    grid_cutoffs: Tuple[float, ...] = tuple(_DEFAULTS["grid_cutoffs"])
    grid_rules: Tuple[str, ...] = tuple(_DEFAULTS["grid_rules"])
    deltas: Optional[str] = None
    decisions: Optional[str] = None

    def to_json(self) -> Dict[str, Any]:
        result = asdict(self)
        for key, value in result.items():
            if isinstance(value, tuple):
                result[key] = list(value)
        return result

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        names = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(names))
        if unknown:
            raise SchemaError(f"unknown configuration keys: {', '.join(unknown)}")
        resolved = {}
        for key, value in values.items():
            if isinstance(value, list):
                value = tuple(value)
            resolved[key] = value
        return cls(**resolved)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--config",
        dest="config",
        type=str,
        default=argparse.SUPPRESS,
        help="JSON file of settings; command line flags take precedence.",
    )
    parser.add_argument(
        "--manifest",
        dest="manifest",
        type=str,
        default=argparse.SUPPRESS,
        help="Re-run the configuration recorded in a previous run's manifest.",
    )
    parser.add_argument(
        "--seed",
        type=lambda text: int(text, 0),
        dest="seed",
        default=argparse.SUPPRESS,
        help='Seed for every random choice. Hex is supported with "0x" prefix. Required.',
    )
    parser.add_argument(
        "--out",
        dest="out",
        type=str,
        default=argparse.SUPPRESS,
        help="Output directory of this run.",
    )
    parser.add_argument(
        "--n-jobs",
        dest="n_jobs",
        type=int,
        default=argparse.SUPPRESS,
        help="Worker threads for fold evaluations.",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        dest="verbose",
        default=False,
        help="Log debug messages.",
    )
    parser.add_argument(
        "-q",
        "--quiet",
        action="store_true",
        dest="quiet",
        default=False,
        help="Log warnings and errors only.",
    )


def _add_inputs(parser: argparse.ArgumentParser):
    for flag, help_text in (
        ("instrument", "Instrument JSON."),
        ("responses", "Responses CSV with a respondent_id column."),
        ("rules", "Harmonization rules JSON."),
        ("outcomes", "Outcome specs JSON."),
    ):
        parser.add_argument(f"--{flag}", dest=flag, type=str, default=argparse.SUPPRESS, help=help_text)
    parser.add_argument(
        "--missing-token",
        action="append",
        dest="missing_tokens",
        default=argparse.SUPPRESS,
        help="Token read as a missing response. Repeat to give several.",
    )


def _add_model(parser: argparse.ArgumentParser):
    parser.add_argument("--taxonomy", dest="taxonomy", type=str, default=argparse.SUPPRESS)
    parser.add_argument("--mapping", dest="mapping", type=str, default=argparse.SUPPRESS)
    parser.add_argument(
        "--hard-mapping",
        dest="hard_mapping",
        type=str,
        default=argparse.SUPPRESS,
        help="Baseline item to dimension table for the hard versus soft comparison.",
    )
    parser.add_argument(
        "--tau", dest="tau", type=float, default=argparse.SUPPRESS, help="Drop weights below tau."
    )
    parser.add_argument(
        "--top-m", dest="top_m", type=int, default=argparse.SUPPRESS, help="Keep the m largest weights."
    )
    parser.add_argument(
        "--scoring-rule",
        dest="scoring_rule",
        type=str,
        default=argparse.SUPPRESS,
        choices=["weighted_mean", "weighted_sum", "zscore_then_mean", "coverage_reweighted_mean"],
    )
    parser.add_argument(
        "--post-standardize", action="store_true", dest="post_standardize", default=argparse.SUPPRESS
    )
    parser.add_argument("--overlap-cutoff", dest="overlap_cutoff", type=float, default=argparse.SUPPRESS)
    parser.add_argument("--closeness", dest="closeness", type=float, default=argparse.SUPPRESS)
    parser.add_argument("--outer-folds", dest="outer_folds", type=int, default=argparse.SUPPRESS)
    parser.add_argument("--inner-folds", dest="inner_folds", type=int, default=argparse.SUPPRESS)
    parser.add_argument("--repeats", dest="repeats", type=int, default=argparse.SUPPRESS)
    parser.add_argument("--signal-share", dest="signal_share", type=float, default=argparse.SUPPRESS)
    parser.add_argument("--weak-share", dest="weak_share", type=float, default=argparse.SUPPRESS)


def get_options(args=None) -> dict:
    """
    Parse command line args into a dict.

    Parameters
    ----------
    args : list of str, optional
        Passed to `parse_args`. The default value is `None`, which specifies
        using the program command line arguments.

    Returns
    -------
    A dict holding `command`, `verbose`, `quiet`, and only the flags that
    were actually given, so later layers can tell them from defaults.
    """
    parser = argparse.ArgumentParser(
        prog="maseya-measure",
        description="Validate soft-mapped survey constructs with embedded cross-validation.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Generate a synthetic survey with planted structure.")
    _add_common(synth)
    synth.add_argument("--spec", dest="spec", type=str, default=argparse.SUPPRESS)
    synth.add_argument("--n", dest="synth_n", type=int, default=argparse.SUPPRESS)

    harmonize = commands.add_parser("harmonize", help="Convert raw responses to numbers.")
    _add_common(harmonize)
    _add_inputs(harmonize)

    score = commands.add_parser("score", help="Build subdimension scores.")
    _add_common(score)
    _add_inputs(score)
    _add_model(score)

    for name, help_text in (
        ("validate", "Validate artifacts and run outer-fold incremental validity."),
        ("diagnose", "Screen for overlap, data limits, and cross-loading."),
    ):
        sub = commands.add_parser(name, help=help_text)
        _add_common(sub)
        _add_inputs(sub)
        _add_model(sub)

    refine = commands.add_parser("refine", help="Run the refinement loop inside each outer fold.")
    _add_common(refine)
    _add_inputs(refine)
    _add_model(refine)
    refine.add_argument(
        "--proposals",
        dest="proposals",
        type=str,
        default=argparse.SUPPRESS,
        help="Directory of recorded proposals; used instead of a remote endpoint.",
    )
    refine.add_argument("--endpoint", dest="endpoint", type=str, default=argparse.SUPPRESS)
    refine.add_argument("--model", dest="model", type=str, default=argparse.SUPPRESS)
    refine.add_argument("--temperature", dest="temperature", type=float, default=argparse.SUPPRESS)
    refine.add_argument("--max-rounds", dest="max_rounds", type=int, default=argparse.SUPPRESS)
    refine.add_argument("--plateau-delta", dest="plateau_delta", type=float, default=argparse.SUPPRESS)
    refine.add_argument("--patience", dest="patience", type=int, default=argparse.SUPPRESS)
    refine.add_argument(
        "--outer-index",
        dest="outer_index",
        type=int,
        default=argparse.SUPPRESS,
        help="Refine inside one outer fold only.",
    )

    placebo = commands.add_parser("placebo", help="Permutation placebo for the gain statistic.")
    _add_common(placebo)
    _add_inputs(placebo)
    _add_model(placebo)
    placebo.add_argument(
        "--kind", dest="placebo_kind", type=str, choices=["outcome", "mapping"], default=argparse.SUPPRESS
    )
    placebo.add_argument("--draws", dest="draws", type=int, default=argparse.SUPPRESS)
    placebo.add_argument("--smooth", action="store_true", dest="smooth", default=argparse.SUPPRESS)
    placebo.add_argument("--outcome", dest="outcome", type=str, default=argparse.SUPPRESS)

    grid = commands.add_parser("grid", help="Sweep sparsification and scoring settings.")
    _add_common(grid)
    _add_inputs(grid)
    _add_model(grid)
    grid.add_argument("--grid-taus", dest="grid_taus", type=float, nargs="+", default=argparse.SUPPRESS)
    grid.add_argument("--grid-ms", dest="grid_ms", type=int, nargs="+", default=argparse.SUPPRESS)
    grid.add_argument(
        "--grid-cutoffs", dest="grid_cutoffs", type=float, nargs="+", default=argparse.SUPPRESS
    )
    grid.add_argument("--grid-rules", dest="grid_rules", type=str, nargs="+", default=argparse.SUPPRESS)

    report = commands.add_parser("report", help="Render the triage table from saved deltas.")
    _add_common(report)
    report.add_argument("--deltas", dest="deltas", type=str, default=argparse.SUPPRESS)
    report.add_argument("--decisions", dest="decisions", type=str, default=argparse.SUPPRESS)
    report.add_argument("--taxonomy", dest="taxonomy", type=str, default=argparse.SUPPRESS)

    return vars(parser.parse_args(args))


def _read_json_file(path: str) -> Mapping[str, Any]:
    try:
        with open(path, encoding="utf-8") as stream:
            data = json.load(stream)
    except json.JSONDecodeError as error:
        raise SchemaError(f"{path} is not valid JSON: {error}") from error
    if not isinstance(data, dict):
        raise SchemaError(f"{path} must hold a JSON object")
    return data


def resolve_config(options: Mapping[str, Any], json_dir: str = None) -> RunConfig:
    """
    Layer packaged defaults, then a config file or manifest, then flags.

    Raises PreconditionError when a computing subcommand has no seed.
    """
    command = options["command"]
    values: Dict[str, Any] = dict(load_defaults(json_dir))

    if "manifest" in options:
        manifest = _read_json_file(options["manifest"])
        if manifest.get("command") != command:
            raise PreconditionError(
                f"manifest records a {manifest.get('command')!r} run, not {command!r}"
            )
        values.update(manifest.get("config", {}))
    if "config" in options:
        values.update(_read_json_file(options["config"]))

    skip = {"config", "manifest", "verbose", "quiet"}
    values.update({key: value for key, value in options.items() if key not in skip})
    values["command"] = command

    config = RunConfig.from_mapping(values)
    if config.seed is None and command not in SEEDLESS:
        raise PreconditionError(f"{command} needs --seed")
    return config


def manifest_json(config: RunConfig, version: str) -> Dict[str, Any]:
    """The manifest records configuration only; the API key lives in the environment."""
    return {"command": config.command, "version": version, "config": config.to_json()}


def write_manifest(config: RunConfig, version: str) -> str:
    os.makedirs(config.out, exist_ok=True)
    path = os.path.join(config.out, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(manifest_json(config, version), stream, indent=2, sort_keys=True)
    return path
