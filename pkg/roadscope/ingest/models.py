"""Road data models.

The three-class label set and the crowd-sourced road record.
"""
from enum import Enum
from typing import List

from pydantic import BaseModel, ConfigDict, Field

from roadscope.geo.coords import Polyline


class RoadClass(str, Enum):
    """Aggregated road quality class.

    Declaration order is the serialization and label-index order.
    """

    MAJOR = "major"
    MINOR = "minor"
    TWO_TRACK = "two_track"

    @property
    def index(self) -> int:
        return ROAD_CLASSES.index(self)

    @classmethod
    def from_index(cls, index: int) -> "RoadClass":
        return ROAD_CLASSES[index]

    @classmethod
    def parse(cls, name: str) -> "RoadClass":
        """Accept ``major``, ``Major``, ``two-track`` and ``two_track``."""
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        if key == "twotrack":
            key = "two_track"
        return cls(key)


ROAD_CLASSES: List[RoadClass] = [RoadClass.MAJOR, RoadClass.MINOR, RoadClass.TWO_TRACK]


class RoadRecord(BaseModel):
    """One crowd-sourced road with its resolved class."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    id: str
    raw_tag: str
    polyline: Polyline
    road_class: RoadClass = Field(alias="class")

    def to_row(self) -> dict:
        return {
            "id": self.id,
            "raw_tag": self.raw_tag,
            "class": self.road_class.value,
            "coordinates": [[p.lon, p.lat] for p in self.polyline.points],
        }


class ParseReport(BaseModel):
    """Outcome of parsing one feature collection."""

    records: List[RoadRecord] = Field(default_factory=list)
    skipped: dict = Field(default_factory=dict)
    features_seen: int = 0

    @property
    def skip_count(self) -> int:
        return sum(self.skipped.values())

    def class_counts(self) -> dict:
        counts = {c.value: 0 for c in ROAD_CLASSES}
        for record in self.records:
            counts[record.road_class.value] += 1
        return counts
