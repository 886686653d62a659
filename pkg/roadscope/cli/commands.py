"""Subcommand handlers.

Each handler takes the parsed arguments and a ``CommandContext`` and returns
a JSON-serializable summary that the CLI prints to stdout.
"""
import json
from argparse import Namespace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import structlog
import torch
from pydantic import BaseModel, ConfigDict

from roadscope.config.settings import DilationConfig, RunConfig
from roadscope.core.exceptions import EmptyResult, IoError, UsageError
from roadscope.core.logging import RunLog
from roadscope.dataset.builder import build_dataset, write_masks
from roadscope.dataset.manifest import MANIFEST_SCHEMA_VERSION, read_manifest, write_manifest
from roadscope.dataset.sampler import min_separation_filter, sample_points
from roadscope.diagnostics.cam import cam_all_classes, cam_locality, save_heatmap_png
from roadscope.diagnostics.evaluation import evaluate
from roadscope.diagnostics.experiments import run_masking_experiment, run_transfer_experiment, select_split
from roadscope.diagnostics.metrics import compute_metrics
from roadscope.diagnostics.report import emit_experiment, emit_report, load_experiment
from roadscope.ingest.models import ROAD_CLASSES, RoadClass, RoadRecord
from roadscope.ingest.osm import build_lookup, parse_roads, read_road_table, write_road_table
from roadscope.masking.maskgen import MaskMode, load_mask_png
from roadscope.nn.embedding import PROTOCOL_VERSION, EmbeddingBackend, EmbeddingLoader
from roadscope.nn.inputs import TileLoader
from roadscope.nn.model import architecture, build_model, embedding_head
from roadscope.nn.serialization import MODEL_SCHEMA_VERSION, load_model, save_model
from roadscope.nn.training import downscale_area, train
from roadscope.raster.store import METADATA_FILE, SCENE_SCHEMA_VERSION, Scene, load_rgb_png, open_scene
from roadscope.synth.generator import generate_country_pair, write_corpus

logger = structlog.get_logger(__name__)

SAMPLES_SCHEMA_VERSION = 1


class CommandContext(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    cfg: RunConfig
    workspace: Path
    run_log: RunLog

    def path(self, *parts: str) -> Path:
        return self.workspace.joinpath(*parts)


# ---------------------------------------------------------------------------
# Shared loaders
# ---------------------------------------------------------------------------


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise IoError(str(p), f"{what} not found")
    return p


def load_roads(path: str, cfg: RunConfig) -> List[RoadRecord]:
    """Road table (``.jsonl``) or GeoJSON feature collection."""
    p = _existing(path, "road file")
    if p.suffix == ".jsonl":
        return read_road_table(p)
    return parse_roads(p, source=str(p), lookup=build_lookup(cfg.ingest.aggregation)).records


def load_scenes(directory: str, country: Optional[str] = None) -> List[Scene]:
    """Every scene container directly below ``directory``, sorted by name."""
    root = _existing(directory, "scene directory")
    scenes = [open_scene(d) for d in sorted(root.iterdir()) if d.is_dir() and (d / METADATA_FILE).exists()]
    if country is not None:
        scenes = [s for s in scenes if s.country == country]
    if not scenes:
        raise EmptyResult(str(root), "no scene containers" + (f" for country {country}" if country else ""))
    return scenes


def _mask_mode(value: str) -> MaskMode:
    try:
        return MaskMode(value)
    except ValueError:
        raise UsageError(f"unknown mask mode {value!r}", details={"known": [m.value for m in MaskMode]})


def _road_class(value: str) -> RoadClass:
    try:
        return RoadClass.parse(value)
    except ValueError:
        raise UsageError(f"unknown road class {value!r}", details={"known": [c.value for c in ROAD_CLASSES]})


def _per_class(value: Optional[str]):
    if value is None or value == "min":
        return value
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"--per-class must be an integer or 'min', got {value!r}")
    if n < 0:
        raise UsageError("--per-class must be non-negative")
    return n


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------


def cmd_ingest(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    source = _existing(args.geojson, "GeoJSON file")
    report = parse_roads(source, source=str(source), lookup=build_lookup(ctx.cfg.ingest.aggregation))
    out = Path(args.out) if args.out else ctx.path("roads", "roads.jsonl")
    written = write_road_table(report.records, out)
    return {
        "roads": written,
        "skipped": report.skipped,
        "class_counts": report.class_counts(),
        "out": str(out),
    }


def cmd_sample(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    roads = load_roads(args.roads, ctx.cfg)
    points = [p for road in roads for p in sample_points(road, ctx.cfg.sampler.spacing_m)]
    points = min_separation_filter(points, ctx.cfg.sampler.min_separation_m)
    out = Path(args.out) if args.out else ctx.path("manifests", "samples.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema_version": SAMPLES_SCHEMA_VERSION,
        "seed": ctx.cfg.seed,
        "config_digest": ctx.cfg.digest(),
        "spacing_m": ctx.cfg.sampler.spacing_m,
    }
    with out.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for p in points:
            fh.write(json.dumps(p.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":")) + "\n")
    return {"roads": len(roads), "samples": len(points), "out": str(out)}


def cmd_build_dataset(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    roads = load_roads(args.roads, ctx.cfg)
    scenes = load_scenes(args.scenes, args.country)
    out = Path(args.out) if args.out else ctx.path("manifests", "dataset.jsonl")
    result = build_dataset(
        roads,
        scenes,
        ctx.cfg,
        ctx.workspace,
        per_class=_per_class(args.per_class),
        with_masks=not args.no_masks,
        manifest_path=out,
    )
    return {
        "entries": len(result.entries),
        "samples": result.samples,
        "outside_scenes": result.outside_scenes,
        "cloudy": result.cloudy,
        "candidate_counts": result.candidate_counts,
        "out": str(out),
    }


def cmd_mask(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    manifest = read_manifest(_existing(args.manifest, "manifest"))
    roads = load_roads(args.roads, ctx.cfg)
    scenes = load_scenes(args.scenes)
    updated = write_masks(manifest, roads, scenes, ctx.cfg)
    write_manifest(
        updated.entries,
        updated.path,
        seed=ctx.cfg.seed,
        config_digest=ctx.cfg.digest(),
        root=updated.header.root,
    )
    return {"masks": len(updated.entries), "manifest": str(updated.path)}


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def cmd_train(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    cfg = ctx.cfg
    manifest = read_manifest(_existing(args.manifest, "manifest"))
    part = select_split(manifest, "train")
    mode = _mask_mode(args.mask_mode)
    tiles = TileLoader.for_manifest(manifest, mode, cfg.train.input_size)
    name = "embedding_head" if args.backend else cfg.train.architecture
    out = Path(args.out) if args.out else ctx.path("models", f"{name}_{mode.value}.model")
    extra: Dict[str, Any] = {"mask_mode": mode.value}

    if args.backend:
        with EmbeddingBackend(args.backend).start() as backend:
            model = build_model(embedding_head(cfg.train.head_hidden), (backend.dim,), seed=cfg.train.seed)
            result = train(model, part.entries, cfg.train, EmbeddingLoader(backend, tiles), part.lines, threads=1)
        extra["backend"] = args.backend
    else:
        size = cfg.train.input_size
        model = build_model(architecture(cfg.train.architecture), (3, size, size), seed=cfg.train.seed)
        result = train(model, part.entries, cfg.train, tiles, part.lines, threads=cfg.runtime.threads)

    save_model(model, out, seed=cfg.train.seed, config_digest=cfg.digest(), extra=extra)
    last = result.history[-1] if result.history else None
    return {
        "model": str(out),
        "samples": len(part.entries),
        "steps": result.steps,
        "init_digest": result.init_digest,
        "final_digest": result.final_digest,
        "train_loss": last.loss if last else None,
        "train_accuracy": last.accuracy if last else None,
    }


def cmd_eval(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    cfg = ctx.cfg
    model, header = load_model(_existing(args.model, "model file"))
    manifest = read_manifest(_existing(args.manifest, "manifest"))
    part = select_split(manifest, args.split)
    mode = _mask_mode(args.mask_mode or header.get("mask_mode", "none"))
    size = int(model.input_shape[-1])
    tiles = TileLoader.for_manifest(manifest, mode, size)

    backend_cmd = args.backend or header.get("backend")
    if backend_cmd:
        with EmbeddingBackend(backend_cmd).start() as backend:
            result = evaluate(model, part.entries, EmbeddingLoader(backend, tiles), part.lines, threads=1)
    else:
        result = evaluate(model, part.entries, tiles, part.lines, cfg.runtime.threads)

    scenario = args.scenario or f"{Path(args.model).stem}@{mode.value}"
    row = compute_metrics(result.confusion, scenario)
    reports: List[str] = []
    for fmt, suffix in (("markdown", "md"), ("csv", "csv")):
        path = ctx.path("reports", f"eval_{Path(args.model).stem}_{mode.value}.{suffix}")
        emit_report(
            [row],
            fmt,
            path,
            seed=cfg.seed,
            config_digest=cfg.digest(),
            meta={"model": str(args.model), "model_sha256": header.get("sha256"), "mask_mode": mode.value},
        )
        reports.append(str(path))
    return {"metrics": row.flat(), "reports": reports}


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def cmd_mask_experiment(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    train_path = _existing(args.manifest or str(ctx.path("manifests", "dataset.jsonl")), "manifest")
    train_manifest = read_manifest(train_path)
    test_manifest = read_manifest(_existing(args.test_manifest, "manifest")) if args.test_manifest else train_manifest
    model_dir = ctx.path("models") if args.save_models else None
    report = run_masking_experiment(train_manifest, test_manifest, ctx.cfg, model_dir=model_dir)
    paths = emit_experiment(report, ctx.path("reports"))
    return {"rows": [r.flat() for r in report.rows], "reports": [str(p) for p in paths]}


def cmd_transfer(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    path_a = args.manifest_a or str(ctx.path("manifests", f"{args.country_a}.jsonl"))
    path_b = args.manifest_b or str(ctx.path("manifests", f"{args.country_b}.jsonl"))
    manifest_a = read_manifest(_existing(path_a, "manifest"))
    manifest_b = read_manifest(_existing(path_b, "manifest"))
    model_dir = ctx.path("models") if args.save_models else None
    report = run_transfer_experiment(
        manifest_a,
        manifest_b,
        ctx.cfg,
        pooled=args.pooled,
        mask_mode=_mask_mode(args.mask_mode),
        model_dir=model_dir,
    )
    paths = emit_experiment(report, ctx.path("reports"))
    return {"rows": [r.flat() for r in report.rows], "reports": [str(p) for p in paths]}


def cmd_cam(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    model, header = load_model(_existing(args.model, "model file"))
    wanted = _road_class(args.road_class)
    tile_path = _existing(args.tile, "tile")
    pixels = load_rgb_png(tile_path)
    if pixels.shape[0] != pixels.shape[1]:
        raise UsageError(f"tile {tile_path} is not square", details={"shape": list(pixels.shape)})
    x = downscale_area(pixels, int(model.input_shape[-1]))

    with torch.no_grad():
        probs = model(x.unsqueeze(0))[0].cpu().numpy()
    predicted = ROAD_CLASSES[int(np.argmax(probs))]
    maps = cam_all_classes(model, x, tile_size=pixels.shape[0])
    out = save_heatmap_png(maps[wanted.value], Path(args.out))

    sidecar: Dict[str, Any] = {
        "class": wanted.value,
        "predicted_class": predicted.value,
        "probabilities": {c.value: float(p) for c, p in zip(ROAD_CLASSES, probs)},
        "model": str(args.model),
        "model_sha256": header.get("sha256"),
        "config_digest": ctx.cfg.digest(),
        "seed": ctx.cfg.seed,
        "tile": str(tile_path),
    }
    if args.mask:
        mask = load_mask_png(_existing(args.mask, "mask"))
        localities = {name: cam_locality(heat, mask) for name, heat in maps.items()}
        sidecar["locality"] = localities[wanted.value]
        sidecar["localities"] = localities
    sidecar_path = out.with_name(out.name + ".json")
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return {"out": str(out), "sidecar": str(sidecar_path), **{k: sidecar[k] for k in ("class", "predicted_class")}}


# ---------------------------------------------------------------------------
# Synthetic corpora and reports
# ---------------------------------------------------------------------------


def synth_run_config(cfg: RunConfig) -> RunConfig:
    """Config under which synthetic corpora are tiled and masked."""
    return cfg.model_copy(
        update={
            "geo": cfg.geo.model_copy(update={"tile_size_px": cfg.synth.tile_size_px}),
            "dilation": DilationConfig.uniform(cfg.synth.road_radius_px),
        }
    )


def _build_synthetic(
    ctx: CommandContext,
    cfg: RunConfig,
    country: str,
    geojson: str,
    manifest_name: str,
    per_class,
) -> Dict[str, Any]:
    roads = load_roads(geojson, cfg)
    scenes = load_scenes(str(ctx.path("scenes")), country)
    out = ctx.path("manifests", manifest_name)
    result = build_dataset(roads, scenes, cfg, ctx.workspace, per_class=per_class, manifest_path=out)
    return {"manifest": str(out), "entries": len(result.entries), "candidate_counts": result.candidate_counts}


def cmd_synth(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    cfg = synth_run_config(ctx.cfg)
    # Later commands in this workspace tile and mask with the synthetic geometry.
    cfg.write(ctx.path("config.json"))
    per_class = _per_class(args.per_class) if args.per_class is not None else "min"
    gsd, m_lat, threads = cfg.geo.gsd_m, cfg.geo.m_per_deg_lat, cfg.runtime.threads

    if not args.pair:
        corpus = write_corpus(cfg.synth, ctx.workspace, gsd, m_lat, threads)
        built = _build_synthetic(ctx, cfg, corpus.country, corpus.geojson_path, "dataset.jsonl", per_class)
        return {"corpora": [corpus.model_dump()], "datasets": [built]}

    cfg_b = cfg.synth.model_copy(update={"country": args.country_b, "country_style": args.style_b})
    corpora = generate_country_pair(cfg.synth, cfg_b, ctx.workspace, gsd, m_lat, threads)
    built = [
        _build_synthetic(ctx, cfg, c.country, c.geojson_path, f"{c.country}.jsonl", per_class) for c in corpora
    ]
    return {"corpora": [c.model_dump() for c in corpora], "datasets": built}


def cmd_report(args: Namespace, ctx: CommandContext) -> Dict[str, Any]:
    source = _existing(args.input, "experiment report")
    report = load_experiment(source)
    suffix = "md" if args.format == "markdown" else "csv"
    out = Path(args.out) if args.out else source.with_suffix(f".{suffix}")
    emit_report(
        report.rows,
        args.format,
        out,
        seed=report.seed,
        config_digest=report.config_digest,
        experiment=report.experiment,
        meta={"test_masking": report.test_masking, "init_digests": report.init_digests},
    )
    return {"out": str(out), "rows": len(report.rows)}


HANDLERS = {
    "ingest": cmd_ingest,
    "sample": cmd_sample,
    "build-dataset": cmd_build_dataset,
    "mask": cmd_mask,
    "train": cmd_train,
    "eval": cmd_eval,
    "mask-experiment": cmd_mask_experiment,
    "transfer": cmd_transfer,
    "cam": cmd_cam,
    "synth": cmd_synth,
    "report": cmd_report,
}


def schema_versions() -> Dict[str, Any]:
    return {
        "scene": SCENE_SCHEMA_VERSION,
        "manifest": MANIFEST_SCHEMA_VERSION,
        "samples": SAMPLES_SCHEMA_VERSION,
        "model": MODEL_SCHEMA_VERSION,
        "embedding_protocol": PROTOCOL_VERSION,
    }

