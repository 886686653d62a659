"""Test configuration for pytest.

This module sets up the Python path for tests and provides fixtures.
"""

import os
import sys
from pathlib import Path
from typing import Callable, List, Sequence

import numpy as np
import pytest

# Add the project root directory to the Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from roadscope.config.settings import RunConfig, load_run_config  # noqa: E402
from roadscope.dataset.manifest import ManifestEntry  # noqa: E402
from roadscope.geo.coords import GeoPoint, GeoTransform, LocalFrame, PixelCoord, Polyline, pixel_to_geo, unproject  # noqa: E402
from roadscope.ingest.models import RoadClass, RoadRecord  # noqa: E402
from roadscope.raster.store import open_scene, write_scene  # noqa: E402


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep ROADSCOPE_* variables from the host out of config resolution."""
    for key in list(os.environ):
        if key.startswith("ROADSCOPE_"):
            monkeypatch.delenv(key, raising=False)
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    yield


@pytest.fixture
def run_config() -> RunConfig:
    """Default configuration with small tiles suitable for tests."""
    return load_run_config(overrides={"geo.tile_size_px": 32, "dataset.per_class": 2})


@pytest.fixture
def origin() -> GeoPoint:
    return GeoPoint(lon=36.8, lat=-1.3)


def road_through_pixels(
    road_id: str,
    road_class: RoadClass,
    pixels: Sequence[Sequence[int]],
    origin: GeoPoint,
    gsd: float = 0.3,
    tag: str = "primary",
) -> RoadRecord:
    """Road whose vertices are the centers of the given scene pixels."""
    frame = LocalFrame.at(origin)
    transform = GeoTransform(gsd=gsd)
    points = [unproject(frame, pixel_to_geo(transform, PixelCoord(c, r))) for c, r in pixels]
    return RoadRecord(id=road_id, raw_tag=tag, polyline=Polyline(points=points), road_class=road_class)


@pytest.fixture
def make_road(origin) -> Callable[..., RoadRecord]:
    def factory(road_id: str, road_class: RoadClass, pixels: Sequence[Sequence[int]], tag: str = "primary"):
        return road_through_pixels(road_id, road_class, pixels, origin, tag=tag)

    return factory


@pytest.fixture
def make_scene(tmp_path, origin) -> Callable[..., object]:
    """Write and reopen a random scene, or one holding ``pixels``."""

    def factory(name: str = "scene-a", size: int = 200, country: str = "KE", seed: int = 0, pixels=None):
        if pixels is None:
            rng = np.random.default_rng(seed)
            pixels = rng.integers(0, 180, size=(size, size, 3), dtype=np.uint8)
        directory = write_scene(tmp_path / "scenes" / name, pixels, origin, country)
        return open_scene(directory)

    return factory


def _entries(counts: dict, country: str = "KE") -> List[ManifestEntry]:
    entries: List[ManifestEntry] = []
    for road_class, n in counts.items():
        for i in range(n):
            entries.append(
                ManifestEntry(
                    tile_path=f"tiles/s/{road_class.value}_{i:05d}.png",
                    mask_path=f"masks/s/{road_class.value}_{i:05d}.png",
                    road_class=road_class,
                    country=country,
                    road_id=f"{road_class.value}-{i}",
                    center=GeoPoint(lon=36.8, lat=-1.3),
                )
            )
    return entries


@pytest.fixture
def make_entries() -> Callable[..., List[ManifestEntry]]:
    """Manifest entries with ``counts[class]`` members per class."""
    return _entries
