"""Unit tests for report rendering and experiment files."""

import json

import pytest

from roadscope.core.exceptions import EmptyResult, IoError, MalformedInput
from roadscope.diagnostics.experiments import ExperimentReport
from roadscope.diagnostics.metrics import ConfusionMatrix, compute_metrics
from roadscope.diagnostics.report import (
    REFERENCE_LABEL,
    emit_experiment,
    emit_report,
    load_experiment,
    rows_frame,
    to_markdown,
)


@pytest.fixture
def rows():
    return [
        compute_metrics(ConfusionMatrix(counts=[[4, 0, 0], [0, 4, 1], [0, 1, 0]]), "no_mask"),
        compute_metrics(ConfusionMatrix(counts=[[1, 0, 0], [0, 1, 0], [0, 0, 1]]), "context_occluded"),
        compute_metrics(ConfusionMatrix(counts=[[0, 1, 0], [0, 1, 0], [0, 1, 0]]), "road_occluded"),
    ]


def test_markdown_table(rows):
    """Test one table line per row with rates as percentages."""
    text = to_markdown(rows_frame(rows))
    lines = text.strip().splitlines()

    assert len(lines) == 2 + 3
    assert lines[0].startswith("| scenario | n | accuracy | macro_f1 |")
    assert lines[2].startswith("| no_mask | 10 | 80.0% |")
    assert "| 100.0% |" in lines[3]


def test_csv_report(tmp_path, rows):
    """Test raw rates in CSV plus the metadata sidecar."""
    path = emit_report(rows, "csv", tmp_path / "out" / "masking.csv", seed=3, config_digest="abc", experiment="masking")

    raw = path.read_bytes()
    assert raw.count(b"\r\n") == 4
    header, first = raw.decode().splitlines()[:2]
    assert header.split(",")[:4] == ["scenario", "n", "accuracy", "macro_f1"]
    assert first.split(",")[:3] == ["no_mask", "10", "0.8"]

    meta = json.loads((tmp_path / "out" / "masking.csv.meta.json").read_text())
    assert meta["seed"] == 3
    assert meta["config_digest"] == "abc"
    assert meta["f1_aggregation"] == "macro"
    assert meta["reference"]["label"] == REFERENCE_LABEL
    assert len(meta["reference"]["rows"]) == 5


def test_markdown_report_with_reference(tmp_path, rows):
    """Test the markdown file names its seed and reference figures."""
    text = emit_report(rows, "markdown", tmp_path / "t.md", seed=1, experiment="transfer").read_text()

    assert text.startswith("# transfer experiment\n")
    assert "seed: 1" in text
    assert REFERENCE_LABEL in text
    assert "- KE->PE: accuracy 46.0%" in text


def test_empty_rows_rejected(tmp_path):
    """Test that there is nothing to report without rows."""
    with pytest.raises(EmptyResult):
        emit_report([], "csv", tmp_path / "x.csv")
    assert not (tmp_path / "x.csv").exists()


def test_experiment_files(tmp_path, rows):
    """Test the experiment JSON and tables written side by side."""
    report = ExperimentReport(experiment="masking", rows=rows, seed=7, config_digest="d", init_digests={"no_mask": "w"})

    paths = emit_experiment(report, tmp_path / "reports")

    assert [p.name for p in paths] == ["masking.json", "masking.md", "masking.csv"]
    loaded = load_experiment(paths[0])
    assert loaded.row("no_mask").accuracy == pytest.approx(0.8)
    assert loaded.seed == 7
    meta = json.loads((tmp_path / "reports" / "masking.md.meta.json").read_text())
    assert meta["scenario_mask_modes"] == {
        "no_mask": "none",
        "context_occluded": "road_only",
        "road_occluded": "context_only",
    }
    with pytest.raises(KeyError):
        loaded.row("missing")


def test_load_experiment_errors(tmp_path):
    """Test unreadable and malformed experiment files."""
    with pytest.raises(IoError):
        load_experiment(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"experiment": "masking"}')
    with pytest.raises(MalformedInput):
        load_experiment(bad)
