"""Synthetic scenes with a known class signal location.

Each scene holds one road through its center, straight or bent. The road is
painted with a uniform width for every class, so the mask geometry carries no
label. The class code (a tint plus an oriented stripe texture) is painted on
the road pixels, the context pixels, or both, and is left off a thin band on
either side of the road edge. Road codes are shared by all countries; context
codes come from the country style, so two styles give the same road signal
but assign different context codes to each class.
"""
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict
from scipy.ndimage import distance_transform_edt, zoom

from roadscope.config.settings import DilationConfig, SynthConfig
from roadscope.core.concurrency import ordered_map
from roadscope.core.exceptions import ConfigInfeasible
from roadscope.core.rng import derive_rng
from roadscope.geo.coords import (
    DEFAULT_GSD,
    M_PER_DEG_LAT,
    MAX_FRAME_LAT,
    GeoPoint,
    GeoTransform,
    LocalFrame,
    PixelCoord,
    Polyline,
    pixel_to_geo,
    unproject,
)
from roadscope.ingest.models import ROAD_CLASSES, RoadClass, RoadRecord
from roadscope.masking.maskgen import Mask, road_mask_for_tile, save_mask_png
from roadscope.raster.store import write_scene

logger = structlog.get_logger(__name__)

TRUTH_MASK_FILE = "road_mask.png"

CLASS_TAGS = {RoadClass.MAJOR: "primary", RoadClass.MINOR: "residential", RoadClass.TWO_TRACK: "track"}

ROAD_BASE = (118.0, 112.0, 106.0)

# Shared road codes, one tint per class.
ROAD_TINTS = (
    (1.0, -0.5, -0.5),
    (-0.5, 1.0, -0.5),
    (-0.5, -0.5, 1.0),
)


class CountryStyle(BaseModel):
    """Background palette and context class codes of one synthetic country."""

    model_config = ConfigDict(frozen=True)

    name: str
    base: Tuple[float, float, float]
    texture: float
    context_tints: Tuple[Tuple[float, float, float], ...]
    stripe_offset: float  # radians added to the stripe orientation


STYLES: Dict[str, CountryStyle] = {
    "savanna": CountryStyle(
        name="savanna",
        base=(158.0, 136.0, 92.0),
        texture=9.0,
        context_tints=((1.0, 0.6, -0.8), (-0.8, 1.0, 0.3), (0.2, -0.7, 1.0)),
        stripe_offset=0.0,
    ),
    "andes": CountryStyle(
        name="andes",
        base=(150.0, 130.0, 100.0),
        texture=12.0,
        context_tints=((-0.9, 0.1, 0.8), (0.9, -0.9, 0.1), (0.1, 0.8, -1.0)),
        stripe_offset=math.pi / 6,
    ),
    "delta": CountryStyle(
        name="delta",
        base=(84.0, 128.0, 88.0),
        texture=7.0,
        context_tints=((0.3, 1.0, -0.6), (1.0, -0.2, 0.6), (-0.7, -0.4, 1.0)),
        stripe_offset=math.pi / 4,
    ),
}

COUNTRY_ORIGINS: Dict[str, Tuple[float, float]] = {
    "KE": (36.8, -1.3),
    "PE": (-75.0, -9.2),
}


def country_style(name: str) -> CountryStyle:
    try:
        return STYLES[name]
    except KeyError:
        raise ConfigInfeasible(f"unknown country style {name!r}", details={"known": sorted(STYLES)})


def country_origin(country: str) -> Tuple[float, float]:
    if country in COUNTRY_ORIGINS:
        return COUNTRY_ORIGINS[country]
    rng = derive_rng(0, f"synth/origin/{country}")
    return float(rng.uniform(-150.0, 150.0)), float(rng.uniform(-50.0, 50.0))


class SyntheticScene(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    scene_id: str
    origin: GeoPoint
    road: RoadRecord
    pixels: np.ndarray
    mask: Mask

    def feature(self) -> Dict[str, Any]:
        """GeoJSON feature of the scene's road."""
        return {
            "type": "Feature",
            "id": self.road.id,
            "properties": {"highway": self.road.raw_tag, "scene": self.scene_id, "synthetic": True},
            "geometry": {
                "type": "LineString",
                "coordinates": [[p.lon, p.lat] for p in self.road.polyline.points],
            },
        }


def check_feasible(cfg: SynthConfig) -> None:
    if cfg.scene_size_px < cfg.tile_size_px:
        raise ConfigInfeasible(
            "scene cannot hold a full tile",
            details={"scene_size_px": cfg.scene_size_px, "tile_size_px": cfg.tile_size_px},
        )
    if 2 * cfg.road_radius_px >= cfg.tile_size_px:
        raise ConfigInfeasible(
            "road is wider than a tile",
            details={"road_radius_px": cfg.road_radius_px, "tile_size_px": cfg.tile_size_px},
        )
    if cfg.guard_px >= cfg.road_radius_px:
        raise ConfigInfeasible(
            "guard band leaves no road core",
            details={"guard_px": cfg.guard_px, "road_radius_px": cfg.road_radius_px},
        )
    country_style(cfg.country_style)


def scene_origin(cfg: SynthConfig, index: int, gsd: float = DEFAULT_GSD, m_per_deg_lat: float = M_PER_DEG_LAT) -> GeoPoint:
    """Top-left corner of scene ``index``; scenes sit side by side with gaps."""
    lon0, lat0 = country_origin(cfg.country)
    if abs(lat0) >= MAX_FRAME_LAT:
        raise ConfigInfeasible(f"country origin latitude {lat0} outside the supported band")
    side_m = cfg.scene_size_px * gsd
    m_per_deg_lon = m_per_deg_lat * math.cos(math.radians(lat0))
    per_row = 20
    lon = lon0 + (index % per_row) * 2.0 * side_m / m_per_deg_lon
    lat = lat0 - (index // per_row) * 2.0 * side_m / m_per_deg_lat
    return GeoPoint(lon=lon, lat=lat)


def road_vertices(rng: np.random.Generator, size: int) -> List[PixelCoord]:
    """Integer pixel vertices of a road through the scene center."""
    center = (size - 1) / 2.0
    half = 0.45 * (size - 1)
    theta = float(rng.uniform(0.0, math.pi))
    bend = 0.0 if rng.random() < 0.5 else float(rng.choice([-1.0, 1.0]) * rng.uniform(math.pi / 12, math.pi / 4))

    def clamp(v: float) -> int:
        return int(min(max(round(v), 0), size - 1))

    start = PixelCoord(clamp(center - half * math.cos(theta)), clamp(center - half * math.sin(theta)))
    mid = PixelCoord(clamp(center), clamp(center))
    end = PixelCoord(clamp(center + half * math.cos(theta + bend)), clamp(center + half * math.sin(theta + bend)))
    return [start, mid, end] if bend else [start, end]


def _texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    """Low-frequency RGB texture, bilinear-upsampled from a coarse grid."""
    cells = max(2, size // 64 + 2)
    coarse = rng.normal(0.0, amplitude, size=(cells, cells, 3))
    fine = zoom(coarse, (size / cells, size / cells, 1), order=1)[:size, :size]
    short = size - fine.shape[0], size - fine.shape[1]
    if short[0] > 0 or short[1] > 0:
        fine = np.pad(fine, ((0, max(short[0], 0)), (0, max(short[1], 0)), (0, 0)), mode="edge")
    return fine


def class_code(
    tint: Sequence[float],
    angle: float,
    size: int,
    period: float,
    amplitude: float,
) -> np.ndarray:
    """Tint plus an oriented stripe texture, shape (size, size, 3)."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = 2.0 * math.pi * (cols * math.cos(angle) + rows * math.sin(angle)) / period
    stripes = 0.5 * amplitude * np.sin(phase)
    return np.asarray(tint, dtype=np.float64)[None, None, :] * amplitude + stripes[..., None]


def generate_scene(
    cfg: SynthConfig,
    index: int,
    road_class: RoadClass,
    gsd: float = DEFAULT_GSD,
    m_per_deg_lat: float = M_PER_DEG_LAT,
) -> SyntheticScene:
    """Render one scene with a single road of ``road_class``."""
    check_feasible(cfg)
    style = country_style(cfg.country_style)
    size = cfg.scene_size_px
    rng = derive_rng(cfg.seed, f"synth/{cfg.country}/{index}")

    origin = scene_origin(cfg, index, gsd, m_per_deg_lat)
    frame = LocalFrame.at(origin, m_per_deg_lat)
    transform = GeoTransform(origin_x=0.0, origin_y=0.0, gsd=gsd)
    scene_id = f"{cfg.country}-{index:04d}"

    vertices = road_vertices(rng, size)
    points = [unproject(frame, pixel_to_geo(transform, v)) for v in vertices]
    road = RoadRecord(
        id=f"{scene_id}-road",
        raw_tag=CLASS_TAGS[road_class],
        polyline=Polyline(points=points),
        road_class=road_class,
    )
    mask = road_mask_for_tile([road], transform, frame, size, DilationConfig.uniform(cfg.road_radius_px))
    on_road = mask.bits[..., None]
    # class codes stay guard_px away from the road edge on both sides
    road_core = (distance_transform_edt(mask.bits) > cfg.guard_px)[..., None]
    context_core = (distance_transform_edt(~mask.bits) > cfg.guard_px)[..., None]

    k = road_class.index
    period = cfg.tile_size_px / 6.0
    context = np.asarray(style.base, dtype=np.float64) + _texture(rng, size, style.texture)
    road_px = np.asarray(ROAD_BASE, dtype=np.float64) + _texture(rng, size, 4.0)
    if cfg.signal_location in ("context", "both"):
        context += context_core * class_code(
            style.context_tints[k], k * math.pi / 3 + style.stripe_offset, size, period, cfg.signal_amplitude
        )
    if cfg.signal_location in ("road", "both"):
        road_px += road_core * class_code(ROAD_TINTS[k], k * math.pi / 3, size, period, cfg.signal_amplitude)

    image = np.where(on_road, road_px, context)
    if cfg.noise_sigma > 0:
        image += rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    return SyntheticScene(scene_id=scene_id, origin=origin, road=road, pixels=pixels, mask=mask)


class CorpusSummary(BaseModel):
    country: str
    style: str
    signal_location: str
    scene_ids: List[str]
    geojson_path: str
    class_counts: Dict[str, int]


def write_corpus(
    cfg: SynthConfig,
    workspace: Path,
    gsd: float = DEFAULT_GSD,
    m_per_deg_lat: float = M_PER_DEG_LAT,
    threads: int = 1,
) -> CorpusSummary:
    """Generate ``n_roads`` scenes per class into ``workspace``.

    Scenes go to ``scenes/<id>/`` with their ground-truth mask and roads to
    ``roads/<country>.geojson``.
    """
    check_feasible(cfg)
    workspace = Path(workspace)
    jobs = [(i, ROAD_CLASSES[i % len(ROAD_CLASSES)]) for i in range(cfg.n_roads * len(ROAD_CLASSES))]

    def render(job: Tuple[int, RoadClass]) -> Dict[str, Any]:
        index, road_class = job
        scene = generate_scene(cfg, index, road_class, gsd, m_per_deg_lat)
        directory = write_scene(
            workspace / "scenes" / scene.scene_id,
            scene.pixels,
            scene.origin,
            cfg.country,
            gsd_m=gsd,
            m_per_deg_lat=m_per_deg_lat,
            extra={
                "synthetic": {
                    "signal_location": cfg.signal_location,
                    "style": cfg.country_style,
                    "road_class": road_class.value,
                    "seed": cfg.seed,
                }
            },
        )
        save_mask_png(scene.mask, directory / TRUTH_MASK_FILE)
        return scene.feature()

    features = ordered_map(render, jobs, threads)
    roads_path = workspace / "roads" / f"{cfg.country}.geojson"
    roads_path.parent.mkdir(parents=True, exist_ok=True)
    roads_path.write_text(
        json.dumps({"type": "FeatureCollection", "features": features}, sort_keys=True) + "\n", encoding="utf-8"
    )

    counts = {c.value: sum(1 for _, rc in jobs if rc is c) for c in ROAD_CLASSES}
    logger.info(
        "Synthetic corpus written",
        country=cfg.country,
        style=cfg.country_style,
        signal=cfg.signal_location,
        scenes=len(jobs),
    )
    return CorpusSummary(
        country=cfg.country,
        style=cfg.country_style,
        signal_location=cfg.signal_location,
        scene_ids=[f["properties"]["scene"] for f in features],
        geojson_path=str(roads_path),
        class_counts=counts,
    )


def generate_country_pair(
    cfg_a: SynthConfig,
    cfg_b: SynthConfig,
    workspace: Path,
    gsd: float = DEFAULT_GSD,
    m_per_deg_lat: float = M_PER_DEG_LAT,
    threads: int = 1,
) -> Tuple[CorpusSummary, CorpusSummary]:
    """Two corpora with one signal rule and, normally, different styles."""
    if cfg_a.signal_location != cfg_b.signal_location:
        raise ConfigInfeasible(
            "paired corpora must share the signal location",
            details={"a": cfg_a.signal_location, "b": cfg_b.signal_location},
        )
    if cfg_a.country == cfg_b.country:
        raise ConfigInfeasible("paired corpora need distinct country codes", details={"country": cfg_a.country})
    if cfg_a.country_style == cfg_b.country_style:
        logger.warning("Paired corpora share a style", style=cfg_a.country_style)
    return (
        write_corpus(cfg_a, workspace, gsd, m_per_deg_lat, threads),
        write_corpus(cfg_b, workspace, gsd, m_per_deg_lat, threads),
    )


def load_truth_mask(scene_dir: Path) -> Optional[Path]:
    path = Path(scene_dir) / TRUTH_MASK_FILE
    return path if path.is_file() else None
