"""Tables written by the command line, each as a CSV and JSON pair."""

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .ecv import DeltaReport, Thresholds, classify
from .taxonomy import Taxonomy

LOGGER = logging.getLogger(__name__)

TRIAGE_COLUMNS = ("Family", "Subdimension", "Items", "ΔAUC", "ΔR²", "labels", "notes")


@dataclass(frozen=True)
class TriageRow:
    family: str
    subdimension: str
    items: int
    delta_auc: float
    delta_r2: float
    labels: str
    notes: str = ""

    def to_record(self) -> Dict[str, Any]:
        return dict(zip(TRIAGE_COLUMNS, asdict(self).values()))


def _sort_key(row: TriageRow):
    missing = math.isnan(row.delta_auc)
    return (missing, 0.0 if missing else -row.delta_auc, row.subdimension)


def _metric_mean(by_metric: Mapping[str, List[float]], metric: str) -> float:
    values = by_metric.get(metric)
    return float(np.mean(values)) if values else float("nan")


def triage_rows(
    reports: Iterable[DeltaReport],
    taxonomy: Optional[Taxonomy] = None,
    decisions: Optional[Mapping[str, str]] = None,
    thresholds: Thresholds = Thresholds(),
) -> List[TriageRow]:
    """
    One row per candidate, sorted by mean AUC gain, largest first.

    The gain columns average over the outcomes scored with that metric. Labels
    are listed per outcome and metric as `outcome:metric=label`. The notes
    column carries the refinement decision when one is given.
    """
    grouped: Dict[str, List[DeltaReport]] = {}
    for report in reports:
        grouped.setdefault(report.candidate, []).append(report)

    decisions = decisions or {}
    rows = []
    for candidate, mine in grouped.items():
        family = ""
        if taxonomy is not None and len(mine[0].members) == 1 and taxonomy.has(candidate):
            family = taxonomy.get(candidate).anchor_id
        by_metric: Dict[str, List[float]] = {}
        for report in mine:
            by_metric.setdefault(report.metric, []).append(report.mean)
        labels = "; ".join(
            f"{r.outcome_id}:{r.metric}={classify(r, thresholds).label.value}"
            for r in sorted(mine, key=lambda r: (r.outcome_id, r.metric))
        )
        rows.append(
            TriageRow(
                family,
                candidate,
                max(report.items for report in mine),
                _metric_mean(by_metric, "auc"),
                _metric_mean(by_metric, "r2"),
                labels,
                decisions.get(candidate, ""),
            )
        )
    return sorted(rows, key=_sort_key)


def write_table(records: Sequence[Mapping[str, Any]], stem: str, columns: Sequence[str] = None):
    """Write `<stem>.csv` and `<stem>.json` holding the same records."""
    frame = pd.DataFrame(list(records), columns=list(columns) if columns else None)
    frame.to_csv(f"{stem}.csv", index=False, encoding="utf-8")
    with open(f"{stem}.json", "w", encoding="utf-8") as stream:
        json.dump(
            json.loads(frame.to_json(orient="records", force_ascii=False)),
            stream,
            indent=2,
            ensure_ascii=False,
        )
    LOGGER.info("Wrote %d rows to %s.csv and %s.json", len(frame), stem, stem)


def write_triage(rows: Sequence[TriageRow], stem: str):
    write_table([row.to_record() for row in rows], stem, TRIAGE_COLUMNS)


def write_json(data: Any, path: str):
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(data, stream, indent=2, sort_keys=True, default=float)


def delta_records(
    reports: Iterable[DeltaReport], thresholds: Thresholds = Thresholds()
) -> List[Dict[str, Any]]:
    """
    Flat summary records of delta reports, one per candidate, outcome and metric.

    `subdim` lists the member subdimensions joined by "+"; `label` is the triage
    label under the given thresholds.
    """
    records = []
    for report in reports:
        records.append(
            {
                "candidate": report.candidate,
                "subdim": "+".join(report.members),
                "outcome_id": report.outcome_id,
                "metric": report.metric,
                "stage": report.stage,
                "items": report.items,
                "n": report.n,
                "folds": report.folds,
                "delta_mean": report.mean,
                "delta_median": report.median,
                "delta_sd": report.sd,
                "share_improve": report.share,
                "label": classify(report, thresholds).label.value,
                "skipped_folds": report.skipped_folds,
                "mapping_version": report.mapping_version,
                "taxonomy_version": report.taxonomy_version,
            }
        )
    return records


def read_delta_reports(path: str) -> List[DeltaReport]:
    """Read reports written by `validate` or `refine`: a list or an object with `reports`."""
    with open(path, encoding="utf-8") as stream:
        data = json.load(stream)
    if isinstance(data, Mapping):
        data = data.get("reports", [])
    return [DeltaReport.from_json(record) for record in data]


def read_decisions(path: str) -> Dict[str, str]:
    """Decision notes from a list of `{subdim_id, decision, reason}` records."""
    with open(path, encoding="utf-8") as stream:
        data = json.load(stream)
    if isinstance(data, Mapping):
        data = data.get("decisions", [])
    return {record["subdim_id"]: f"{record['decision']} ({record['reason']})" for record in data}
