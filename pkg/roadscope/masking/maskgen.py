"""Binary road masks for occlusion experiments.

Road polylines are projected into tile pixel space, clipped to the tile,
rasterized with Bresenham lines and expanded by a Euclidean disk whose
radius depends on the road class. Masks are then applied to tiles by
pixel-wise multiplication, keeping either the road or its context.
"""
import math
from collections import defaultdict
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from PIL import Image
from pydantic import BaseModel, ConfigDict
from scipy.ndimage import distance_transform_edt

from roadscope.config.settings import DilationConfig
from roadscope.core.exceptions import SizeMismatch
from roadscope.geo.coords import PIXEL_SNAP, GeoTransform, LocalFrame, PixelCoord, Polyline, meter_to_pixel_float, project
from roadscope.ingest.models import RoadRecord

logger = structlog.get_logger(__name__)

Segment = Tuple[PixelCoord, PixelCoord]

# Cohen-Sutherland outcodes
_INSIDE, _LEFT, _RIGHT, _TOP, _BOTTOM = 0, 1, 2, 4, 8


class MaskMode(str, Enum):
    """Which pixels survive masking."""

    NONE = "none"
    ROAD_ONLY = "road_only"
    CONTEXT_ONLY = "context_only"


class Mask(BaseModel):
    """Square binary mask, ``bits[row, col]`` is True on road pixels."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    size: int
    bits: np.ndarray

    @classmethod
    def empty(cls, size: int) -> "Mask":
        return cls(size=size, bits=np.zeros((size, size), dtype=bool))

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "Mask":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise SizeMismatch("mask", "square 2-D array", bits.shape)
        return cls(size=bits.shape[0], bits=bits)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __or__(self, other: "Mask") -> "Mask":
        if self.size != other.size:
            raise SizeMismatch("mask union", self.size, other.size)
        return Mask(size=self.size, bits=self.bits | other.bits)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def bresenham(a: PixelCoord, b: PixelCoord) -> List[PixelCoord]:
    """Pixel chain from ``a`` to ``b`` inclusive, all octants.

    Along the major axis every step picks the pixel nearest the ideal line;
    exact ties go to the lower minor-axis index, so the chain from b to a is
    the same set of pixels reversed.
    """
    (x0, y0), (x1, y1) = a, b
    dx, dy = x1 - x0, y1 - y0

    if abs(dx) >= abs(dy):
        if dx == 0:
            return [PixelCoord(x0, y0)]
        lo, hi = ((x0, y0), (x1, y1)) if dx > 0 else ((x1, y1), (x0, y0))
        ddx, ddy = hi[0] - lo[0], hi[1] - lo[1]
        pixels = []
        for x in range(lo[0], hi[0] + 1):
            # ceil(ideal - 1/2) in integer arithmetic
            num = 2 * (lo[1] * ddx + (x - lo[0]) * ddy) - ddx
            pixels.append(PixelCoord(x, -((-num) // (2 * ddx))))
    else:
        lo, hi = ((x0, y0), (x1, y1)) if dy > 0 else ((x1, y1), (x0, y0))
        ddx, ddy = hi[0] - lo[0], hi[1] - lo[1]
        pixels = []
        for y in range(lo[1], hi[1] + 1):
            num = 2 * (lo[0] * ddy + (y - lo[1]) * ddx) - ddy
            pixels.append(PixelCoord(-((-num) // (2 * ddy)), y))

    if pixels[0] != (x0, y0):
        pixels.reverse()
    return pixels


def _outcode(x: float, y: float, lo: float, hi: float) -> int:
    code = _INSIDE
    if x < lo:
        code |= _LEFT
    elif x > hi:
        code |= _RIGHT
    if y < lo:
        code |= _TOP
    elif y > hi:
        code |= _BOTTOM
    return code


def clip_segment(a: Tuple[float, float], b: Tuple[float, float], size: int) -> Optional[Segment]:
    """Cohen-Sutherland clip of segment ``a``-``b`` to ``[0, size-1]``.

    Clipped endpoints are rounded to the nearest pixel on the boundary
    row or column; None when the segment misses the tile.
    """
    lo, hi = 0.0, float(size - 1)
    x0, y0 = float(a[0]), float(a[1])
    x1, y1 = float(b[0]), float(b[1])
    c0, c1 = _outcode(x0, y0, lo, hi), _outcode(x1, y1, lo, hi)

    while True:
        if not (c0 | c1):
            break
        if c0 & c1:
            return None
        c = c0 or c1
        if c & _BOTTOM:
            x, y = x0 + (x1 - x0) * (hi - y0) / (y1 - y0), hi
        elif c & _TOP:
            x, y = x0 + (x1 - x0) * (lo - y0) / (y1 - y0), lo
        elif c & _RIGHT:
            x, y = hi, y0 + (y1 - y0) * (hi - x0) / (x1 - x0)
        else:
            x, y = lo, y0 + (y1 - y0) * (lo - x0) / (x1 - x0)
        if c == c0:
            x0, y0, c0 = x, y, _outcode(x, y, lo, hi)
        else:
            x1, y1, c1 = x, y, _outcode(x, y, lo, hi)

    def snap(v: float) -> int:
        return int(min(max(round(v), 0), size - 1))

    return PixelCoord(snap(x0), snap(y0)), PixelCoord(snap(x1), snap(y1))


def polyline_to_pixels(
    polyline: Polyline,
    transform: GeoTransform,
    frame: LocalFrame,
    size: int,
) -> List[Segment]:
    """Clipped pixel segments of a polyline inside a ``size`` x ``size`` tile."""
    vertices = []
    for p in polyline.points:
        fc, fr = meter_to_pixel_float(transform, project(frame, p))
        vertices.append((math.floor(fc + PIXEL_SNAP), math.floor(fr + PIXEL_SNAP)))

    segments: List[Segment] = []
    for a, b in zip(vertices, vertices[1:]):
        clipped = clip_segment(a, b, size)
        if clipped is not None:
            segments.append(clipped)
    return segments


def rasterize_segments(segments: Iterable[Segment], size: int) -> np.ndarray:
    bits = np.zeros((size, size), dtype=bool)
    for a, b in segments:
        for col, row in bresenham(a, b):
            bits[row, col] = True
    return bits


# ---------------------------------------------------------------------------
# Dilation and masking
# ---------------------------------------------------------------------------


def dilate(mask: Mask, radius_px: int) -> Mask:
    """Disk dilation: a bit is set iff some input bit lies within ``radius_px``."""
    if radius_px < 0:
        raise ValueError("radius must be non-negative")
    if radius_px == 0 or not mask.bits.any():
        return Mask(size=mask.size, bits=mask.bits.copy())
    # Squared EDT distances are integers; round before comparing.
    dist = distance_transform_edt(~mask.bits)
    bits = np.rint(dist * dist) <= radius_px * radius_px
    return Mask(size=mask.size, bits=bits)


def apply_mask(pixels: np.ndarray, mask: Mask, mode: MaskMode) -> np.ndarray:
    """Zero the pixels outside (road_only) or inside (context_only) the mask."""
    mode = MaskMode(mode)
    if pixels.shape[:2] != mask.bits.shape:
        raise SizeMismatch("tile/mask", mask.bits.shape, pixels.shape[:2])
    if mode is MaskMode.NONE:
        return pixels.copy()
    keep = mask.bits if mode is MaskMode.ROAD_ONLY else ~mask.bits
    return pixels * keep[..., None].astype(pixels.dtype)


def road_mask_for_tile(
    roads: Sequence[RoadRecord],
    transform: GeoTransform,
    frame: LocalFrame,
    size: int,
    cfg: Optional[DilationConfig] = None,
) -> Mask:
    """Union over roads of the dilated, clipped road skeletons."""
    cfg = cfg or DilationConfig()
    skeletons: Dict[int, List[Segment]] = defaultdict(list)
    for road in roads:
        skeletons[cfg.radius_for(road.road_class)].extend(
            polyline_to_pixels(road.polyline, transform, frame, size)
        )

    bits = np.zeros((size, size), dtype=bool)
    for radius, segments in sorted(skeletons.items()):
        if segments:
            skeleton = Mask(size=size, bits=rasterize_segments(segments, size))
            bits |= dilate(skeleton, radius).bits
    return Mask(size=size, bits=bits)


def save_mask_png(mask: Mask, path: Path) -> Path:
    """8-bit grayscale PNG, 0 = context, 255 = road."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.bits.astype(np.uint8) * 255).save(path, format="PNG")
    return path


def load_mask_png(path: Path) -> Mask:
    with Image.open(path) as img:
        return Mask.from_bits(np.asarray(img.convert("L")) > 127)
