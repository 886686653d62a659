"""Geographic coordinate types and the local equirectangular projection.

Pixel convention used everywhere in roadscope: ``(col, row)``, origin at the
top-left corner, rows grow southward. Geo to pixel floors; pixel to geo
returns the pixel center.
"""
import math
from typing import List, NamedTuple, Optional, Sequence

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from roadscope.core.exceptions import LatitudeOutOfRange, OutOfFootprint

M_PER_DEG_LAT = 111_320.0
MAX_FRAME_LAT = 85.0
DEFAULT_GSD = 0.3


class MeterPoint(NamedTuple):
    """Local-frame position, x east and y north, in meters."""

    x: float
    y: float


class PixelCoord(NamedTuple):
    col: int
    row: int


class GeoPoint(BaseModel):
    """WGS84 longitude/latitude in degrees."""

    model_config = ConfigDict(frozen=True)

    lon: float
    lat: float

    @field_validator("lon")
    @classmethod
    def _check_lon(cls, v: float) -> float:
        if not -180.0 <= v <= 180.0:
            raise ValueError(f"longitude {v} outside [-180, 180]")
        return v

    @field_validator("lat")
    @classmethod
    def _check_lat(cls, v: float) -> float:
        if not -90.0 <= v <= 90.0:
            raise ValueError(f"latitude {v} outside [-90, 90]")
        return v

    @classmethod
    def of(cls, lon: float, lat: float) -> "GeoPoint":
        return cls(lon=lon, lat=lat)


class Polyline(BaseModel):
    """Ordered road centerline with at least two vertices."""

    model_config = ConfigDict(frozen=True)

    points: List[GeoPoint]

    @field_validator("points")
    @classmethod
    def _check_points(cls, v: List[GeoPoint]) -> List[GeoPoint]:
        if len(v) < 2:
            raise ValueError("a polyline needs at least two points")
        for a, b in zip(v, v[1:]):
            if a == b:
                raise ValueError(f"consecutive duplicate vertex {a.lon},{a.lat}")
        return v

    @classmethod
    def from_coords(cls, coords: Sequence[Sequence[float]]) -> "Polyline":
        return cls(points=[GeoPoint(lon=c[0], lat=c[1]) for c in coords])


class LocalFrame(BaseModel):
    """Equirectangular frame tangent at ``origin``."""

    model_config = ConfigDict(frozen=True)

    origin: GeoPoint
    m_per_deg_lat: float = M_PER_DEG_LAT
    m_per_deg_lon: float

    @model_validator(mode="after")
    def _check_scale(self) -> "LocalFrame":
        if self.m_per_deg_lat <= 0 or self.m_per_deg_lon <= 0:
            raise ValueError("frame scales must be positive")
        return self

    @classmethod
    def at(cls, origin: GeoPoint, m_per_deg_lat: float = M_PER_DEG_LAT) -> "LocalFrame":
        if abs(origin.lat) >= MAX_FRAME_LAT:
            raise LatitudeOutOfRange(origin.lat, MAX_FRAME_LAT)
        return cls(
            origin=origin,
            m_per_deg_lat=m_per_deg_lat,
            m_per_deg_lon=m_per_deg_lat * math.cos(math.radians(origin.lat)),
        )


class GeoTransform(BaseModel):
    """Axis-aligned affine transform; origin is the top-left pixel corner."""

    model_config = ConfigDict(frozen=True)

    origin_x: float = 0.0
    origin_y: float = 0.0
    gsd: float = DEFAULT_GSD

    @field_validator("gsd")
    @classmethod
    def _check_gsd(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("gsd must be positive")
        return v

    def shifted(self, col: int, row: int) -> "GeoTransform":
        """Transform of a window whose top-left pixel is ``(col, row)``."""
        return GeoTransform(
            origin_x=self.origin_x + col * self.gsd,
            origin_y=self.origin_y - row * self.gsd,
            gsd=self.gsd,
        )


def project(frame: LocalFrame, p: GeoPoint) -> MeterPoint:
    if abs(p.lat) >= MAX_FRAME_LAT:
        raise LatitudeOutOfRange(p.lat, MAX_FRAME_LAT)
    return MeterPoint(
        (p.lon - frame.origin.lon) * frame.m_per_deg_lon,
        (p.lat - frame.origin.lat) * frame.m_per_deg_lat,
    )


def unproject(frame: LocalFrame, m: MeterPoint) -> GeoPoint:
    return GeoPoint(
        lon=frame.origin.lon + m.x / frame.m_per_deg_lon,
        lat=frame.origin.lat + m.y / frame.m_per_deg_lat,
    )


def meter_to_pixel_float(t: GeoTransform, m: MeterPoint) -> tuple:
    """Fractional ``(col, row)`` without bounds checks."""
    return (m.x - t.origin_x) / t.gsd, (t.origin_y - m.y) / t.gsd


PIXEL_SNAP = 1e-6


def geo_to_pixel(
    t: GeoTransform,
    m: MeterPoint,
    width: Optional[int] = None,
    height: Optional[int] = None,
) -> PixelCoord:
    """Floor the affine inverse; raises when outside ``width`` x ``height``.

    Values within PIXEL_SNAP of the next integer snap up so that points
    built from exact pixel edges survive f64 rounding.
    """
    fc, fr = meter_to_pixel_float(t, m)
    col, row = math.floor(fc + PIXEL_SNAP), math.floor(fr + PIXEL_SNAP)
    if col < 0 or row < 0:
        raise OutOfFootprint(col, row, width or 0, height or 0)
    if (width is not None and col >= width) or (height is not None and row >= height):
        raise OutOfFootprint(col, row, width or 0, height or 0)
    return PixelCoord(col, row)


def pixel_to_geo(t: GeoTransform, pc: PixelCoord) -> MeterPoint:
    return MeterPoint(
        t.origin_x + (pc.col + 0.5) * t.gsd,
        t.origin_y - (pc.row + 0.5) * t.gsd,
    )


def distance_m(a: MeterPoint, b: MeterPoint) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)
