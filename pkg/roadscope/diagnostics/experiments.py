"""Masking-scenario and cross-domain experiment runners.

Every run inside one experiment starts from the same seed and the same
initial weights and sees the same data order; only the masking transform or
the training domain changes.
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import structlog
import torch
from pydantic import BaseModel, Field

from roadscope.config.settings import RunConfig
from roadscope.core.exceptions import EmptyResult, ExperimentError
from roadscope.dataset.manifest import Manifest, ManifestEntry, Split
from roadscope.diagnostics.evaluation import evaluate
from roadscope.diagnostics.metrics import MetricsRow, compute_metrics
from roadscope.masking.maskgen import MaskMode
from roadscope.nn.inputs import TileLoader
from roadscope.nn.model import RoadNet, architecture, build_model
from roadscope.nn.serialization import save_model
from roadscope.nn.training import EpochRecord, load_inputs, train

logger = structlog.get_logger(__name__)

# Scenario label -> which pixels the model sees
MASKING_SCENARIOS: Tuple[Tuple[str, MaskMode], ...] = (
    ("no_mask", MaskMode.NONE),
    ("context_occluded", MaskMode.ROAD_ONLY),
    ("road_occluded", MaskMode.CONTEXT_ONLY),
)


class ExperimentReport(BaseModel):
    experiment: str
    rows: List[MetricsRow]
    seed: int
    config_digest: str
    f1_aggregation: str = "macro"
    test_masking: str = "matching scenario"
    init_digests: Dict[str, str] = Field(default_factory=dict)
    histories: Dict[str, List[EpochRecord]] = Field(default_factory=dict)
    model_paths: Dict[str, str] = Field(default_factory=dict)

    def row(self, scenario: str) -> MetricsRow:
        for r in self.rows:
            if r.scenario == scenario:
                return r
        raise KeyError(scenario)


class _Split(BaseModel):
    manifest: Manifest
    entries: List[ManifestEntry]
    lines: List[int]


def select_split(manifest: Manifest, split: Split) -> _Split:
    """Entries of one split; a manifest without splits is used whole."""
    pairs = list(zip(manifest.entries, manifest.line_numbers()))
    if any(e.split != "none" for e, _ in pairs):
        pairs = [(e, line) for e, line in pairs if e.split == split]
    if not pairs:
        raise EmptyResult(str(manifest.path), f"no {split} entries")
    return _Split(manifest=manifest, entries=[e for e, _ in pairs], lines=[line for _, line in pairs])


def _fresh_model(cfg: RunConfig) -> RoadNet:
    size = cfg.train.input_size
    return build_model(architecture(cfg.train.architecture), (3, size, size), seed=cfg.train.seed)


def _inputs(part: _Split, mode: MaskMode, cfg: RunConfig) -> torch.Tensor:
    loader = TileLoader.for_manifest(part.manifest, mode, cfg.train.input_size)
    return load_inputs(part.entries, loader, part.lines, cfg.runtime.threads)


def _run(
    name: str,
    train_parts: Sequence[_Split],
    mode: MaskMode,
    cfg: RunConfig,
    report: ExperimentReport,
    model_dir: Optional[Path],
) -> RoadNet:
    model = _fresh_model(cfg)
    entries = [e for part in train_parts for e in part.entries]
    inputs = torch.cat([_inputs(part, mode, cfg) for part in train_parts])
    result = train(model, entries, cfg.train, loader=None, inputs=inputs)
    report.init_digests[name] = result.init_digest
    report.histories[name] = result.history
    if model_dir is not None:
        path = save_model(
            model,
            Path(model_dir) / f"{report.experiment}_{name}.model",
            seed=cfg.train.seed,
            config_digest=report.config_digest,
            extra={"mask_mode": mode.value, "scenario": name},
        )
        report.model_paths[name] = str(path)
    return model


def _score(model: RoadNet, part: _Split, mode: MaskMode, cfg: RunConfig, scenario: str) -> MetricsRow:
    loader = TileLoader.for_manifest(part.manifest, mode, cfg.train.input_size)
    result = evaluate(model, part.entries, loader, part.lines, cfg.runtime.threads)
    row = compute_metrics(result.confusion, scenario)
    logger.info("Scenario scored", scenario=scenario, accuracy=round(row.accuracy, 4), macro_f1=round(row.macro_f1, 4))
    return row


def _check_same_init(report: ExperimentReport) -> None:
    if len(set(report.init_digests.values())) > 1:
        raise ExperimentError(
            report.experiment, "training runs started from different weights", details=dict(report.init_digests)
        )


def run_masking_experiment(
    train_manifest: Manifest,
    test_manifest: Manifest,
    cfg: RunConfig,
    model_dir: Optional[Path] = None,
) -> ExperimentReport:
    """Train one model per masking scenario and test each on matching masks."""
    train_part = select_split(train_manifest, "train")
    test_part = select_split(test_manifest, "test")
    missing = [e.tile_path for e in train_part.entries + test_part.entries if e.mask_path is None]
    if missing:
        raise ExperimentError("masking", "entries without masks", details={"first": missing[0], "count": len(missing)})

    report = ExperimentReport(experiment="masking", rows=[], seed=cfg.train.seed, config_digest=cfg.digest())
    for scenario, mode in MASKING_SCENARIOS:
        logger.info("Masking scenario started", scenario=scenario, mask_mode=mode.value)
        model = _run(scenario, [train_part], mode, cfg, report, model_dir)
        report.rows.append(_score(model, test_part, mode, cfg, scenario))
    _check_same_init(report)
    return report


def _country(part: _Split, fallback: str) -> str:
    countries = sorted({e.country for e in part.entries})
    return countries[0] if len(countries) == 1 else fallback


def run_transfer_experiment(
    manifest_a: Manifest,
    manifest_b: Manifest,
    cfg: RunConfig,
    pooled: bool = False,
    mask_mode: MaskMode = MaskMode.NONE,
    model_dir: Optional[Path] = None,
) -> ExperimentReport:
    """In-domain and cross-domain accuracies for two country corpora.

    Rows are named ``<train>-><test>`` by country code; with ``pooled`` a
    model trained on both training sets is scored on both test sets.
    """
    train_a, test_a = select_split(manifest_a, "train"), select_split(manifest_a, "test")
    train_b, test_b = select_split(manifest_b, "train"), select_split(manifest_b, "test")
    a, b = _country(train_a, "A"), _country(train_b, "B")

    report = ExperimentReport(experiment="transfer", rows=[], seed=cfg.train.seed, config_digest=cfg.digest())
    report.test_masking = mask_mode.value

    model_a = _run(f"train_{a}", [train_a], mask_mode, cfg, report, model_dir)
    report.rows.append(_score(model_a, test_a, mask_mode, cfg, f"{a}->{a}"))
    report.rows.append(_score(model_a, test_b, mask_mode, cfg, f"{a}->{b}"))

    model_b = _run(f"train_{b}", [train_b], mask_mode, cfg, report, model_dir)
    report.rows.append(_score(model_b, test_b, mask_mode, cfg, f"{b}->{b}"))
    report.rows.append(_score(model_b, test_a, mask_mode, cfg, f"{b}->{a}"))

    if pooled:
        model_p = _run("pooled", [train_a, train_b], mask_mode, cfg, report, model_dir)
        report.rows.append(_score(model_p, test_a, mask_mode, cfg, f"pooled->{a}"))
        report.rows.append(_score(model_p, test_b, mask_mode, cfg, f"pooled->{b}"))

    _check_same_init(report)
    return report
