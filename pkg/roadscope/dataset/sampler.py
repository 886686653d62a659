"""Tile-center sampling along road polylines."""
import math
from typing import List, Sequence

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from roadscope.geo.coords import GeoPoint, LocalFrame, MeterPoint, project, unproject
from roadscope.ingest.models import RoadClass, RoadRecord

logger = structlog.get_logger(__name__)

# Slack on the final chainage so that a spacing dividing the length exactly
# still yields the end point despite f64 rounding.
CHAINAGE_SLACK_M = 1e-9


class SamplePoint(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    point: GeoPoint
    road_id: str
    road_class: RoadClass = Field(alias="class")
    chainage: float = Field(ge=0)


def polyline_meters(road: RoadRecord) -> tuple:
    """Vertices in the frame anchored at the first vertex, plus cumulative lengths."""
    frame = LocalFrame.at(road.polyline.points[0])
    xy = np.array([project(frame, p) for p in road.polyline.points], dtype=np.float64)
    seg = np.hypot(np.diff(xy[:, 0]), np.diff(xy[:, 1]))
    cumulative = np.concatenate([[0.0], np.cumsum(seg)])
    return frame, xy, cumulative


def sample_points(road: RoadRecord, spacing: float = 100.0) -> List[SamplePoint]:
    """Points every ``spacing`` meters of arc length, starting at chainage 0."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")

    frame, xy, cumulative = polyline_meters(road)
    total = float(cumulative[-1])
    n = int(math.floor((total + CHAINAGE_SLACK_M) / spacing)) + 1

    points: List[SamplePoint] = []
    for k in range(n):
        chainage = min(k * spacing, total)
        i = int(np.searchsorted(cumulative, chainage, side="right")) - 1
        i = min(max(i, 0), len(xy) - 2)
        seg_len = cumulative[i + 1] - cumulative[i]
        f = 0.0 if seg_len == 0 else (chainage - cumulative[i]) / seg_len
        x = xy[i, 0] + f * (xy[i + 1, 0] - xy[i, 0])
        y = xy[i, 1] + f * (xy[i + 1, 1] - xy[i, 1])
        points.append(
            SamplePoint(
                point=unproject(frame, MeterPoint(float(x), float(y))),
                road_id=road.id,
                road_class=road.road_class,
                chainage=float(chainage),
            )
        )
    return points


def min_separation_filter(points: Sequence[SamplePoint], min_sep: float) -> List[SamplePoint]:
    """Greedy first-wins thinning; order-dependent by definition.

    Distances are measured in one local frame anchored at the first point.
    """
    if min_sep < 0:
        raise ValueError("min_sep must be non-negative")
    if not points or min_sep == 0:
        return list(points)

    frame = LocalFrame.at(points[0].point)
    xy = np.array([project(frame, sp.point) for sp in points], dtype=np.float64)
    kept_xy = np.empty((0, 2), dtype=np.float64)
    kept: List[SamplePoint] = []
    for sp, pos in zip(points, xy):
        if len(kept_xy):
            d = np.hypot(kept_xy[:, 0] - pos[0], kept_xy[:, 1] - pos[1])
            if np.any(d < min_sep):
                continue
        kept.append(sp)
        kept_xy = np.vstack([kept_xy, pos])

    logger.debug("Separation filter applied", before=len(points), after=len(kept), min_sep=min_sep)
    return kept
