"""
Run Report
Machine-readable (JSON) and tabular (CSV) summaries of a pipeline run
"""

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Sequence

from backend.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

REPORT_JSON = "report.json"
SUMMARY_CSV = "summary.csv"
TIMINGS_JSON = "timings.json"
FORMATS = ("json", "csv")
SUMMARY_COLUMNS = ("strategy_id", "strategy", "rank", "feature_id", "alpha", "success_rate")


@dataclass
class RunReport:
    """
    Everything a run produced, section by section

    Every section is filled by exactly one pipeline stage; `timings` is the
    only part that differs between two runs of the same config and seed and
    is written to its own file.
    """
    seed: int
    config: Dict[str, Dict[str, Any]]
    strategy_names: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    sae: Dict[str, Any] = field(default_factory=dict)
    recall: Dict[str, Any] = field(default_factory=dict)
    effectiveness: Dict[str, Any] = field(default_factory=dict)
    selected: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)
    baselines: Dict[str, Any] = field(default_factory=dict)
    routing: Dict[str, Any] = field(default_factory=dict)
    correction: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunReport":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidArgumentError(f"unknown report fields: {unknown}")
        return cls(**dict(data))

    def summary_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for strategy_id, entries in sorted(self.selected.items(), key=lambda item: int(item[0])):
            for rank, entry in enumerate(entries, start=1):
                rows.append({
                    "strategy_id": int(strategy_id),
                    "strategy": self.strategy_names.get(str(strategy_id), str(strategy_id)),
                    "rank": rank,
                    "feature_id": entry["feature_id"],
                    "alpha": entry["alpha"],
                    "success_rate": entry["success_rate"],
                })
        return rows


def report_json(report: RunReport) -> str:
    """report.json content: every section except the timings"""
    data = report.to_dict()
    data.pop("timings")
    return json.dumps(data, indent=2, sort_keys=True)


def _write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
        f.write("\n")


def emit_report(report: RunReport, output_dir: str, formats: Sequence[str] = FORMATS) -> List[str]:
    """
    Write report.json and/or summary.csv into output_dir; returns the written paths

    Stage timings go to timings.json next to report.json, so two runs of the
    same config and seed leave byte-identical report files.
    """
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise InvalidArgumentError(f"unknown report formats {bad}, expected a subset of {FORMATS}")
    os.makedirs(output_dir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(output_dir, REPORT_JSON)
        _write_text(path, report_json(report))
        written.append(path)
        path = os.path.join(output_dir, TIMINGS_JSON)
        _write_text(path, json.dumps(report.timings, indent=2, sort_keys=True))
        written.append(path)
    if "csv" in formats:
        path = os.path.join(output_dir, SUMMARY_CSV)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(report.summary_rows())
        written.append(path)
    logger.info("report written: %s", ", ".join(written))
    return written


def load_report(path: str) -> RunReport:
    """Read report.json, picking up timings.json from the same directory when present"""
    with open(path, "r", encoding="utf-8") as f:
        report = RunReport.from_dict(json.load(f))
    timings_path = os.path.join(os.path.dirname(path), TIMINGS_JSON)
    if os.path.exists(timings_path):
        with open(timings_path, "r", encoding="utf-8") as f:
            report.timings = {stage: float(seconds) for stage, seconds in json.load(f).items()}
    return report
