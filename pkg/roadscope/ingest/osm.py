"""OpenStreetMap road ingestion.

Parses GeoJSON feature collections of ``highway`` ways into RoadRecords and
persists them as a JSON Lines road table.
"""
import json
from pathlib import Path
from typing import IO, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import structlog
from pydantic import ValidationError

from roadscope.config.settings import DEFAULT_AGGREGATION
from roadscope.core.exceptions import EmptyResult, MalformedInput, SchemaError
from roadscope.geo.coords import Polyline
from roadscope.ingest.models import ParseReport, RoadClass, RoadRecord

logger = structlog.get_logger(__name__)

StreamLike = Union[str, bytes, Path, IO[bytes], IO[str]]

SKIP_UNKNOWN_TAG = "unknown_tag"
SKIP_DEGENERATE = "degenerate"
SKIP_UNSUPPORTED = "unsupported_geometry"
SKIP_INVALID = "invalid_coordinates"


def build_lookup(aggregation: Optional[Mapping[str, Sequence[str]]] = None) -> Dict[str, RoadClass]:
    """Flatten a ``class -> [tags]`` aggregation table into ``tag -> class``."""
    table = aggregation if aggregation is not None else DEFAULT_AGGREGATION
    lookup: Dict[str, RoadClass] = {}
    for class_name, tags in table.items():
        road_class = RoadClass.parse(class_name)
        for tag in tags:
            lookup[tag.strip().lower()] = road_class
    return lookup


_DEFAULT_LOOKUP = build_lookup()


def classify_tag(raw_tag: str, lookup: Optional[Mapping[str, RoadClass]] = None) -> Optional[RoadClass]:
    """Resolve a raw ``highway`` tag; None for tags outside the table."""
    if not isinstance(raw_tag, str):
        return None
    return (lookup if lookup is not None else _DEFAULT_LOOKUP).get(raw_tag.strip().lower())


def _read_bytes(stream: StreamLike) -> bytes:
    if isinstance(stream, Path):
        return stream.read_bytes()
    if isinstance(stream, bytes):
        return stream
    if isinstance(stream, str):
        return stream.encode("utf-8")
    data = stream.read()
    return data.encode("utf-8") if isinstance(data, str) else data


def _dedupe(coords: Iterable[Sequence[float]]) -> List[List[float]]:
    out: List[List[float]] = []
    for c in coords:
        pair = [float(c[0]), float(c[1])]
        if not out or out[-1] != pair:
            out.append(pair)
    return out


def _feature_id(feature: Mapping, properties: Mapping, index: int) -> str:
    for candidate in (feature.get("id"), properties.get("@id"), properties.get("osm_id")):
        if candidate is not None:
            return str(candidate)
    return f"feature-{index}"


def parse_roads(
    stream: StreamLike,
    source: str = "<stream>",
    lookup: Optional[Mapping[str, RoadClass]] = None,
) -> ParseReport:
    """Parse a GeoJSON FeatureCollection into road records.

    MultiLineStrings become one record per part with ids suffixed ``#k``.
    Features with unmapped tags or fewer than two distinct points are
    skipped and counted per part.
    """
    raw = _read_bytes(stream)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedInput(source, "not UTF-8", byte_offset=e.start)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedInput(source, e.msg, byte_offset=len(text[: e.pos].encode("utf-8")))

    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise MalformedInput(source, "top level is not a FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise MalformedInput(source, "'features' must be an array")

    report = ParseReport()
    skipped: Dict[str, int] = {}

    def skip(reason: str, n: int = 1) -> None:
        skipped[reason] = skipped.get(reason, 0) + n
        report.features_seen += n

    for index, feature in enumerate(features):
        if not isinstance(feature, dict):
            raise MalformedInput(source, f"feature {index} is not an object")
        properties = feature.get("properties") or {}
        geometry = feature.get("geometry") or {}
        if not isinstance(properties, dict):
            raise MalformedInput(source, f"feature {index}: 'properties' is not an object")
        if not isinstance(geometry, dict):
            raise MalformedInput(source, f"feature {index}: 'geometry' is not an object")
        gtype = geometry.get("type")
        coords = geometry.get("coordinates")

        if gtype == "LineString":
            parts = [coords]
        elif gtype == "MultiLineString":
            if coords is not None and not isinstance(coords, list):
                raise MalformedInput(source, f"feature {index}: MultiLineString coordinates are not an array")
            parts = list(coords or [])
        else:
            skip(SKIP_UNSUPPORTED)
            continue

        raw_tag = properties.get("highway")
        road_class = classify_tag(raw_tag, lookup) if raw_tag is not None else None
        if road_class is None:
            skip(SKIP_UNKNOWN_TAG, len(parts))
            continue

        base_id = _feature_id(feature, properties, index)
        for k, part in enumerate(parts):
            road_id = f"{base_id}#{k}" if gtype == "MultiLineString" else base_id
            try:
                points = _dedupe(part or [])
            except (TypeError, IndexError, ValueError):
                skip(SKIP_INVALID)
                continue
            if len(points) < 2:
                skip(SKIP_DEGENERATE)
                continue
            try:
                polyline = Polyline.from_coords(points)
            except ValidationError:
                skip(SKIP_INVALID)
                continue
            report.records.append(
                RoadRecord(id=road_id, raw_tag=str(raw_tag), polyline=polyline, road_class=road_class)
            )
            report.features_seen += 1

    report.skipped = skipped

    logger.info(
        "Roads parsed",
        source=source,
        records=len(report.records),
        skipped=skipped,
        class_counts=report.class_counts(),
    )

    if not report.records:
        raise EmptyResult(source, "zero classifiable roads")
    return report


def write_road_table(records: Iterable[RoadRecord], path: Path) -> int:
    """Write records as JSON Lines; returns the number written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_row(), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_road_table(path: Path) -> List[RoadRecord]:
    path = Path(path)
    records: List[RoadRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(
                    RoadRecord(
                        id=str(row["id"]),
                        raw_tag=str(row["raw_tag"]),
                        road_class=RoadClass(row["class"]),
                        polyline=Polyline.from_coords(row["coordinates"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError, TypeError, ValidationError) as e:
                raise SchemaError(str(path), line_no, str(e).splitlines()[0])
    return records
