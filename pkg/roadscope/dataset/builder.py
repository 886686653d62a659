"""Dataset assembly: cloud filtering, class balancing and stratified splits.

``build_dataset`` wires the whole stage together: sample points along every
road, extract the tile around each point, drop cloudy tiles, balance the
classes, split train/test, then write tiles, masks and the manifest.
"""
import hashlib
import math
import os
import re
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, Field

from roadscope.config.settings import CloudFilterConfig, DilationConfig, RunConfig
from roadscope.core.concurrency import ordered_map
from roadscope.core.exceptions import EmptyResult, InsufficientClass, OutOfBounds, TileLoadError
from roadscope.core.rng import derive_rng
from roadscope.dataset.manifest import Manifest, ManifestEntry, class_histogram, class_ratio, write_manifest
from roadscope.dataset.sampler import SamplePoint, min_separation_filter, sample_points
from roadscope.geo.coords import GeoPoint, project
from roadscope.ingest.models import ROAD_CLASSES, RoadRecord
from roadscope.masking.maskgen import Mask, road_mask_for_tile, save_mask_png
from roadscope.raster.store import Scene, Tile, extract_tile, save_rgb_png, tile_origin

logger = structlog.get_logger(__name__)


# ---------------------------------------------------------------------------
# Cloud filter
# ---------------------------------------------------------------------------


def bright_fraction(pixels: np.ndarray, threshold: int) -> float:
    """Share of pixels whose darkest channel is at least ``threshold``."""
    rgb = pixels.reshape(-1, 3)
    if rgb.shape[0] == 0:
        return 0.0
    return float(np.count_nonzero(rgb.min(axis=1) >= threshold)) / rgb.shape[0]


def cloud_filter(pixels: np.ndarray, cfg: Optional[CloudFilterConfig] = None) -> bool:
    """True to keep the tile, False when it looks cloud-covered."""
    cfg = cfg or CloudFilterConfig()
    return bright_fraction(pixels, cfg.brightness_threshold) <= cfg.max_bright_fraction


# ---------------------------------------------------------------------------
# Balance and split
# ---------------------------------------------------------------------------


def _indices_by_class(entries: Sequence[ManifestEntry]) -> Dict[str, List[int]]:
    groups: Dict[str, List[int]] = {c.value: [] for c in ROAD_CLASSES}
    for i, entry in enumerate(entries):
        groups[entry.road_class.value].append(i)
    return groups


def balance(entries: Sequence[ManifestEntry], per_class: int, seed: int) -> List[ManifestEntry]:
    """Exactly ``per_class`` entries per class, drawn without replacement.

    The result keeps the input order of the chosen entries.
    """
    if per_class < 0:
        raise ValueError("per_class must be non-negative")
    groups = _indices_by_class(entries)
    for road_class in ROAD_CLASSES:
        have = len(groups[road_class.value])
        if have < per_class:
            raise InsufficientClass(road_class.value, have, per_class)

    chosen: List[int] = []
    for road_class in ROAD_CLASSES:
        members = groups[road_class.value]
        rng = derive_rng(seed, f"balance/{road_class.value}")
        picks = rng.choice(len(members), size=per_class, replace=False)
        chosen.extend(members[int(p)] for p in picks)

    return [entries[i] for i in sorted(chosen)]


def holdout_count(n: int, test_ratio: float) -> int:
    """Round-half-up of ``n * test_ratio``."""
    return int(math.floor(n * test_ratio + 0.5 + 1e-9))


def split(
    entries: Sequence[ManifestEntry],
    test_ratio: float = 0.1,
    seed: int = 0,
    by: Literal["tile", "road"] = "tile",
) -> Tuple[List[ManifestEntry], List[ManifestEntry]]:
    """Per-class stratified train/test partition via seeded shuffles.

    ``by="road"`` holds out whole roads, so overlapping tiles of one road
    never straddle the partition.
    """
    if not entries:
        raise EmptyResult("split", "no entries to split")
    groups = _indices_by_class(entries)
    test_idx = set()
    for road_class in ROAD_CLASSES:
        members = groups[road_class.value]
        if not members:
            continue
        if by == "road":
            road_ids = sorted({entries[i].road_id for i in members})
            perm = derive_rng(seed, f"split/{road_class.value}/roads").permutation(len(road_ids))
            held = {road_ids[int(p)] for p in perm[: holdout_count(len(road_ids), test_ratio)]}
            test_idx.update(i for i in members if entries[i].road_id in held)
            continue
        perm = derive_rng(seed, f"split/{road_class.value}").permutation(len(members))
        test_idx.update(members[int(p)] for p in perm[: holdout_count(len(members), test_ratio)])

    train, test = [], []
    for i, entry in enumerate(entries):
        if i in test_idx:
            test.append(entry.model_copy(update={"split": "test"}))
        else:
            train.append(entry.model_copy(update={"split": "train"}))
    return train, test


# ---------------------------------------------------------------------------
# Build orchestration
# ---------------------------------------------------------------------------


class BuildResult(BaseModel):
    entries: List[ManifestEntry] = Field(default_factory=list)
    samples: int = 0
    outside_scenes: int = 0
    cloudy: int = 0
    candidate_counts: Dict[str, int] = Field(default_factory=dict)


_SAFE = re.compile(r"[^A-Za-z0-9_.-]+")


def tile_name(sample: SamplePoint) -> str:
    """File name unique per (road id, chainage); the digest keeps sanitized ids apart."""
    digest = hashlib.sha1(sample.road_id.encode("utf-8")).hexdigest()[:8]
    return f"{_SAFE.sub('_', sample.road_id)}-{digest}_{int(round(sample.chainage * 100)):09d}.png"


def tile_mask(roads: Sequence[RoadRecord], tile: Tile, cfg: DilationConfig) -> Mask:
    """Road mask of a tile, grown from skeleton parts just outside it as well.

    The skeleton is clipped to a window padded by the largest radius, then the
    dilated mask is cropped back to the tile.
    """
    pad = max(cfg.radius_for(c) for c in ROAD_CLASSES)
    window = road_mask_for_tile(roads, tile.transform.shifted(-pad, -pad), tile.frame, tile.size + 2 * pad, cfg)
    return Mask.from_bits(window.bits[pad:pad + tile.size, pad:pad + tile.size].copy())


def roads_by_scene(roads: Sequence[RoadRecord], scenes: Sequence[Scene]) -> List[List[RoadRecord]]:
    """Roads with at least one vertex bounding box overlapping each scene."""
    out: List[List[RoadRecord]] = []
    for scene in scenes:
        min_x, min_y, max_x, max_y = scene.footprint()
        near = []
        for road in roads:
            xy = np.array([project(scene.frame, p) for p in road.polyline.points])
            if xy[:, 0].max() >= min_x and xy[:, 0].min() <= max_x and xy[:, 1].max() >= min_y and xy[:, 1].min() <= max_y:
                near.append(road)
        out.append(near)
    return out


def locate_scene(center: GeoPoint, scenes: Sequence[Scene], size: int) -> Optional[int]:
    """Index of the first scene that fully contains the tile, else None."""
    for i, scene in enumerate(scenes):
        try:
            col, row = tile_origin(scene, center, size)
        except OutOfBounds:
            continue
        if col >= 0 and row >= 0 and col + size <= scene.width and row + size <= scene.height:
            return i
    return None


def build_dataset(
    roads: Sequence[RoadRecord],
    scenes: Sequence[Scene],
    cfg: RunConfig,
    workspace: Path,
    per_class: Union[int, Literal["min"], None] = None,
    with_masks: bool = True,
    manifest_path: Optional[Path] = None,
) -> BuildResult:
    """Run sampling, extraction, filtering, balancing and splitting.

    Tiles land in ``workspace/tiles/<scene>/`` and masks in
    ``workspace/masks/<scene>/``; entry paths are relative to ``workspace``.
    ``per_class="min"`` balances down to the rarest class.
    """
    workspace = Path(workspace)
    size = cfg.geo.tile_size_px
    threads = cfg.runtime.threads
    per_class = cfg.dataset.per_class if per_class is None else per_class
    result = BuildResult()

    samples: List[SamplePoint] = [
        sp for batch in ordered_map(lambda r: sample_points(r, cfg.sampler.spacing_m), list(roads), threads) for sp in batch
    ]
    samples = min_separation_filter(samples, cfg.sampler.min_separation_m)
    result.samples = len(samples)

    def screen(sample: SamplePoint) -> Tuple[Optional[int], bool]:
        index = locate_scene(sample.point, scenes, size)
        if index is None:
            return None, False
        tile = extract_tile(scenes[index], sample.point, size, road_id=sample.road_id)
        return index, cloud_filter(tile.pixels, cfg.cloud)

    candidates: List[ManifestEntry] = []
    placement: Dict[str, int] = {}
    for sample, (index, keep) in zip(samples, ordered_map(screen, samples, threads)):
        if index is None:
            result.outside_scenes += 1
            continue
        if not keep:
            result.cloudy += 1
            continue
        scene = scenes[index]
        name = tile_name(sample)
        candidates.append(
            ManifestEntry(
                tile_path=f"tiles/{scene.scene_id}/{name}",
                mask_path=f"masks/{scene.scene_id}/{name}" if with_masks else None,
                road_class=sample.road_class,
                country=scene.country,
                road_id=sample.road_id,
                center=sample.point,
            )
        )
        placement[candidates[-1].tile_path] = index

    result.candidate_counts = class_histogram(candidates)
    logger.info(
        "Tile candidates screened",
        samples=result.samples,
        outside_scenes=result.outside_scenes,
        cloudy=result.cloudy,
        class_counts=result.candidate_counts,
        class_ratio=class_ratio(result.candidate_counts),
    )
    if not candidates:
        raise EmptyResult("build-dataset", "no tile survived extraction and cloud filtering")

    if per_class == "min":
        per_class = min(result.candidate_counts.values())
    balanced = balance(candidates, per_class, cfg.runtime.seed)
    train, test = split(balanced, cfg.dataset.test_ratio, cfg.runtime.seed, by=cfg.dataset.split_by)
    test_paths = {e.tile_path for e in test}
    entries = [
        e.model_copy(update={"split": "test" if e.tile_path in test_paths else "train"}) for e in balanced
    ]

    scene_of = placement
    near_roads = roads_by_scene(roads, scenes) if with_masks else [[] for _ in scenes]

    def materialize(entry: ManifestEntry) -> None:
        scene = scenes[scene_of[entry.tile_path]]
        tile: Tile = extract_tile(scene, entry.center, size, road_id=entry.road_id)
        save_rgb_png(tile.pixels, workspace / entry.tile_path)
        if entry.mask_path is not None:
            mask = tile_mask(near_roads[scene_of[entry.tile_path]], tile, cfg.dilation)
            save_mask_png(mask, workspace / entry.mask_path)

    ordered_map(materialize, entries, threads)
    result.entries = entries

    if manifest_path is not None:
        manifest_path = Path(manifest_path)
        write_manifest(
            entries,
            manifest_path,
            seed=cfg.runtime.seed,
            config_digest=cfg.digest(),
            root=Path(os.path.relpath(workspace, manifest_path.parent)).as_posix(),
        )

    logger.info(
        "Dataset built",
        entries=len(entries),
        train=len(train),
        test=len(test),
        per_class=per_class,
    )
    return result


def write_masks(
    manifest: Manifest,
    roads: Sequence[RoadRecord],
    scenes: Sequence[Scene],
    cfg: RunConfig,
) -> Manifest:
    """Regenerate every entry's mask PNG from the roads and scenes.

    Entries without a ``mask_path`` get ``masks/<scene>/<tile name>``; the
    returned manifest carries the updated entries.
    """
    size = cfg.geo.tile_size_px
    near_roads = roads_by_scene(roads, scenes)
    lines = manifest.line_numbers()

    def render(pair: Tuple[ManifestEntry, int]) -> ManifestEntry:
        entry, line = pair
        index = locate_scene(entry.center, scenes, size)
        if index is None:
            raise TileLoadError(entry.tile_path, line, "no scene contains the full tile")
        scene = scenes[index]
        tile = extract_tile(scene, entry.center, size, road_id=entry.road_id)
        mask_path = entry.mask_path or f"masks/{scene.scene_id}/{Path(entry.tile_path).name}"
        mask = tile_mask(near_roads[index], tile, cfg.dilation)
        save_mask_png(mask, manifest.resolve(mask_path))
        return entry.model_copy(update={"mask_path": mask_path})

    entries = ordered_map(render, list(zip(manifest.entries, lines)), cfg.runtime.threads)
    logger.info("Masks regenerated", entries=len(entries), radii=cfg.dilation.model_dump())
    return manifest.model_copy(update={"entries": entries})
