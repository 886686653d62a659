"""Geo-referenced RGB scene container and tile extraction.

A scene is a directory holding ``scene.json`` plus a raw interleaved RGB
blob (row-major, 8 bits per channel, no header). The metadata origin is the
geographic position of the top-left pixel corner; it anchors the scene's
local frame, so the scene transform origin is (0, 0) in that frame.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import structlog
from PIL import Image
from pydantic import BaseModel, ConfigDict

from roadscope.core.exceptions import (
    MissingMetadata,
    OutOfBounds,
    OutOfFootprint,
    RotatedTransform,
    SizeMismatch,
    DigestMismatch,
)
from roadscope.geo.coords import (
    DEFAULT_GSD,
    M_PER_DEG_LAT,
    GeoPoint,
    GeoTransform,
    LocalFrame,
    MeterPoint,
    PixelCoord,
    geo_to_pixel,
    project,
)

logger = structlog.get_logger(__name__)

SCENE_SCHEMA_VERSION = 1
METADATA_FILE = "scene.json"
REQUIRED_KEYS = ("width", "height", "origin_lon", "origin_lat", "country", "pixel_file")
TRANSFORM_TERMS = ("rotation", "shear_x", "shear_y")


class Scene(BaseModel):
    """Immutable geo-referenced RGB raster."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    scene_id: str
    width: int
    height: int
    transform: GeoTransform
    frame: LocalFrame
    country: str
    pixels: np.ndarray  # (height, width, 3) uint8, read-only

    def footprint(self) -> Tuple[float, float, float, float]:
        """``(min_x, min_y, max_x, max_y)`` in the scene frame, meters."""
        t = self.transform
        return (
            t.origin_x,
            t.origin_y - self.height * t.gsd,
            t.origin_x + self.width * t.gsd,
            t.origin_y,
        )


class Tile(BaseModel):
    """Square crop of a scene centered on a road point."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    size: int
    pixels: np.ndarray  # (size, size, 3) uint8
    center: GeoPoint
    scene_id: str
    road_id: str
    country: str = ""
    transform: GeoTransform
    frame: LocalFrame


def _load_metadata(directory: Path) -> Dict[str, Any]:
    meta_path = directory / METADATA_FILE
    if not meta_path.is_file():
        raise MissingMetadata(str(meta_path))
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MissingMetadata(str(meta_path), f"unreadable metadata: {e.msg}")
    missing = [k for k in REQUIRED_KEYS if k not in meta]
    if missing:
        raise MissingMetadata(str(meta_path), f"missing keys: {', '.join(missing)}")
    return meta


def _file_sha256(path: Path, chunk: int = 1 << 22) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            digest.update(block)
    return digest.hexdigest()


def open_scene(path: Path) -> Scene:
    """Load and validate a scene container."""
    directory = Path(path)
    meta = _load_metadata(directory)

    terms = {k: float(meta.get(k, 0.0)) for k in TRANSFORM_TERMS}
    if any(v != 0.0 for v in terms.values()):
        raise RotatedTransform(str(directory), terms)

    width, height = int(meta["width"]), int(meta["height"])
    pixel_path = directory / meta["pixel_file"]
    if not pixel_path.is_file():
        raise MissingMetadata(str(pixel_path), "pixel file not found")
    expected = width * height * 3
    actual_size = pixel_path.stat().st_size
    if actual_size != expected:
        raise SizeMismatch(str(pixel_path), expected, actual_size)

    declared = meta.get("pixel_sha256")
    if declared:
        actual = _file_sha256(pixel_path)
        if actual != declared:
            raise DigestMismatch(str(pixel_path), declared, actual)

    origin = GeoPoint(lon=float(meta["origin_lon"]), lat=float(meta["origin_lat"]))
    frame = LocalFrame.at(origin, float(meta.get("frame_m_per_deg_lat", M_PER_DEG_LAT)))
    transform = GeoTransform(origin_x=0.0, origin_y=0.0, gsd=float(meta.get("gsd_m", DEFAULT_GSD)))
    # Read-only map; windows are copied out by read_window.
    pixels = np.memmap(pixel_path, dtype=np.uint8, mode="r", shape=(height, width, 3))

    scene = Scene(
        scene_id=directory.name,
        width=width,
        height=height,
        transform=transform,
        frame=frame,
        country=str(meta["country"]),
        pixels=pixels,
    )
    logger.debug("Scene opened", scene_id=scene.scene_id, width=width, height=height, gsd=transform.gsd)
    return scene


def write_scene(
    path: Path,
    pixels: np.ndarray,
    origin: GeoPoint,
    country: str,
    gsd_m: float = DEFAULT_GSD,
    m_per_deg_lat: float = M_PER_DEG_LAT,
    pixel_file: str = "pixels.rgb",
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write a scene container; returns the directory."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise SizeMismatch("scene pixels", "(H, W, 3) uint8", f"{pixels.shape} {pixels.dtype}")
    blob = np.ascontiguousarray(pixels).tobytes()
    (directory / pixel_file).write_bytes(blob)
    meta: Dict[str, Any] = {
        "schema_version": SCENE_SCHEMA_VERSION,
        "width": int(pixels.shape[1]),
        "height": int(pixels.shape[0]),
        "gsd_m": gsd_m,
        "origin_lon": origin.lon,
        "origin_lat": origin.lat,
        "frame_m_per_deg_lat": m_per_deg_lat,
        "country": country,
        "pixel_file": pixel_file,
        "pixel_sha256": hashlib.sha256(blob).hexdigest(),
    }
    meta.update(extra or {})
    (directory / METADATA_FILE).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return directory


def read_window(scene: Scene, top_left: PixelCoord, size: int) -> np.ndarray:
    """Copy a ``size`` x ``size`` window; it must lie fully inside the scene."""
    col, row = top_left
    if col < 0 or row < 0 or size <= 0 or col + size > scene.width or row + size > scene.height:
        raise OutOfBounds(col, row, size, scene.width, scene.height)
    return scene.pixels[row:row + size, col:col + size].copy()


def tile_origin(scene: Scene, center: GeoPoint, size: int) -> PixelCoord:
    """Top-left pixel of the window centered on ``center``."""
    m: MeterPoint = project(scene.frame, center)
    try:
        pc = geo_to_pixel(scene.transform, m, scene.width, scene.height)
    except OutOfFootprint as e:
        raise OutOfBounds(e.details["col"] - size // 2, e.details["row"] - size // 2, size, scene.width, scene.height)
    return PixelCoord(pc.col - size // 2, pc.row - size // 2)


def extract_tile(scene: Scene, center: GeoPoint, size: int = 1000, road_id: str = "") -> Tile:
    """Extract the tile centered on ``center``; edge tiles are rejected."""
    top_left = tile_origin(scene, center, size)
    pixels = read_window(scene, top_left, size)
    return Tile(
        size=size,
        pixels=pixels,
        center=center,
        scene_id=scene.scene_id,
        road_id=road_id,
        country=scene.country,
        transform=scene.transform.shifted(top_left.col, top_left.row),
        frame=scene.frame,
    )


def save_rgb_png(pixels: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PNG")
    return path


def load_rgb_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
