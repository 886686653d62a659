"""CSV and markdown reports for metric rows.

Each report gets a ``<name>.meta.json`` sidecar with the config digest, the
seed, the F1 aggregation and the published reference figures, which are
labelled as not reproduced here.
"""
import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import pandas as pd
import structlog
from pydantic import BaseModel, ValidationError

from roadscope.core.exceptions import EmptyResult, IoError, MalformedInput
from roadscope.diagnostics.experiments import MASKING_SCENARIOS, ExperimentReport
from roadscope.diagnostics.metrics import MetricsRow

logger = structlog.get_logger(__name__)

ReportFormat = Literal["csv", "markdown"]
REFERENCE_LABEL = "published reference, not reproduced"


class ReferenceLine(BaseModel):
    scenario: str
    accuracy: float
    macro_f1: Optional[float] = None


MASKING_REFERENCE = [
    ReferenceLine(scenario="Peru, no mask", accuracy=0.67, macro_f1=0.66),
    ReferenceLine(scenario="Kenya, no mask", accuracy=0.80, macro_f1=0.73),
    ReferenceLine(scenario="Kenya, context occluded", accuracy=0.77, macro_f1=0.72),
    ReferenceLine(scenario="Kenya, road occluded", accuracy=0.79, macro_f1=0.71),
    ReferenceLine(scenario="Kenya, no mask, ResNet baseline", accuracy=0.70),
]

TRANSFER_REFERENCE = [
    ReferenceLine(scenario="KE->PE", accuracy=0.46),
    ReferenceLine(scenario="PE->KE", accuracy=0.60),
]

REFERENCES = {"masking": MASKING_REFERENCE, "transfer": TRANSFER_REFERENCE}


def rows_frame(rows: Sequence[MetricsRow]) -> pd.DataFrame:
    """One row per scenario, columns in the stable report order."""
    if not rows:
        raise EmptyResult("report", "no metric rows to report")
    return pd.DataFrame([r.flat() for r in rows])


def _is_rate(column: str) -> bool:
    return column in ("accuracy", "macro_f1") or column.endswith(("_precision", "_recall", "_f1"))


def _percent(value: float) -> str:
    return f"{value * 100:.1f}%"


def to_markdown(frame: pd.DataFrame) -> str:
    columns = list(frame.columns)
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for _, row in frame.iterrows():
        cells = []
        for column in columns:
            value = row[column]
            if _is_rate(column):
                cells.append(_percent(float(value)))
            elif column == "n":
                cells.append(str(int(value)))
            else:
                cells.append(str(value))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _reference_markdown(reference: Sequence[ReferenceLine]) -> str:
    lines = [f"Reference figures ({REFERENCE_LABEL}):", ""]
    for ref in reference:
        f1 = f", F1 {_percent(ref.macro_f1)}" if ref.macro_f1 is not None else ""
        lines.append(f"- {ref.scenario}: accuracy {_percent(ref.accuracy)}{f1}")
    return "\n".join(lines) + "\n"


def emit_report(
    rows: Sequence[MetricsRow],
    fmt: ReportFormat,
    path: Path,
    seed: int = 0,
    config_digest: str = "",
    experiment: Optional[str] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``rows`` as CSV or a markdown table, plus the metadata sidecar."""
    frame = rows_frame(rows)
    path = Path(path)
    reference = REFERENCES.get(experiment or "", [])
    sidecar: Dict[str, Any] = {
        "config_digest": config_digest,
        "seed": seed,
        "experiment": experiment,
        "f1_aggregation": "macro",
        "format": fmt,
        "columns": list(frame.columns),
        "reference": {"label": REFERENCE_LABEL, "rows": [r.model_dump() for r in reference]},
    }
    sidecar.update(meta or {})

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            frame.to_csv(path, index=False, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        elif fmt == "markdown":
            title = f"# {experiment} experiment\n\n" if experiment else ""
            header = f"config_digest: `{config_digest}`, seed: {seed}, F1: macro\n\n"
            body = to_markdown(frame)
            tail = "\n" + _reference_markdown(reference) if reference else ""
            path.write_text(title + header + body + tail, encoding="utf-8")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        sidecar_path = path.with_name(path.name + ".meta.json")
        sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(str(path), f"cannot write report: {e}")

    logger.info("Report written", path=str(path), format=fmt, rows=len(rows))
    return path


def emit_experiment(report: ExperimentReport, directory: Path, formats: Sequence[ReportFormat] = ("markdown", "csv")) -> List[Path]:
    """Write the experiment JSON and its rendered tables into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / f"{report.experiment}.json"
    json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    paths = [json_path]
    meta = {"test_masking": report.test_masking, "init_digests": report.init_digests}
    if report.experiment == "masking":
        meta["scenario_mask_modes"] = {name: mode.value for name, mode in MASKING_SCENARIOS}
    for fmt in formats:
        suffix = "md" if fmt == "markdown" else "csv"
        paths.append(
            emit_report(
                report.rows,
                fmt,
                directory / f"{report.experiment}.{suffix}",
                seed=report.seed,
                config_digest=report.config_digest,
                experiment=report.experiment,
                meta=meta,
            )
        )
    return paths


def load_experiment(path: Path) -> ExperimentReport:
    try:
        return ExperimentReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise IoError(str(path), f"cannot read experiment report: {e}")
    except ValidationError as e:
        raise MalformedInput(str(path), f"not an experiment report: {e.error_count()} validation errors")
