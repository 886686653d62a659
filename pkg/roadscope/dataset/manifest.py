"""Dataset manifest: a JSON Lines index of tile-label samples.

Line 1 is a header object; every following line is one ManifestEntry.
Paths inside entries are POSIX paths relative to the header ``root``,
which is itself relative to the manifest's directory.
"""
import json
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional

import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from roadscope.core.exceptions import IoError, SchemaError, TileLoadError
from roadscope.core.rng import GENERATOR_NAME
from roadscope.geo.coords import GeoPoint
from roadscope.ingest.models import ROAD_CLASSES, RoadClass
from roadscope.masking.maskgen import MaskMode

logger = structlog.get_logger(__name__)

MANIFEST_SCHEMA_VERSION = 1

Split = Literal["train", "test", "none"]


class ManifestEntry(BaseModel):
    """One tile-label sample with provenance."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    tile_path: str
    mask_path: Optional[str] = None
    road_class: RoadClass = Field(alias="class")
    country: str
    road_id: str
    center: GeoPoint
    split: Split = "none"
    mask_mode: MaskMode = MaskMode.NONE

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))


class ManifestHeader(BaseModel):
    model_config = ConfigDict(extra="allow")

    schema_version: int = MANIFEST_SCHEMA_VERSION
    seed: int = 0
    created_utc: str = ""
    config_digest: str = ""
    generator: str = GENERATOR_NAME
    root: str = "."
    class_counts: Dict[str, int] = Field(default_factory=dict)


class Manifest(BaseModel):
    path: Optional[Path] = None
    header: ManifestHeader = Field(default_factory=ManifestHeader)
    entries: List[ManifestEntry] = Field(default_factory=list)
    # 1-based source line of each entry, parallel to entries
    lines: List[int] = Field(default_factory=list)

    def resolve(self, relative: str) -> Path:
        base = self.path.parent if self.path is not None else Path(".")
        return (base / self.header.root / relative).resolve()

    def validate_files(self) -> None:
        """Every tile (and mask, when named) must exist on disk."""
        for entry, line in zip(self.entries, self.line_numbers()):
            for rel in (entry.tile_path, entry.mask_path):
                if rel is not None and not self.resolve(rel).is_file():
                    raise TileLoadError(rel, line, "file does not exist")

    def line_numbers(self) -> List[int]:
        if len(self.lines) == len(self.entries):
            return self.lines
        return list(range(2, len(self.entries) + 2))


def class_histogram(entries: Iterable[ManifestEntry]) -> Dict[str, int]:
    counts = {c.value: 0 for c in ROAD_CLASSES}
    for entry in entries:
        counts[entry.road_class.value] += 1
    return counts


def class_ratio(counts: Dict[str, int]) -> str:
    """Render counts as a ratio normalized to the smallest non-zero class."""
    nonzero = [v for v in counts.values() if v > 0]
    if not nonzero:
        return ":".join("0" for _ in counts)
    base = min(nonzero)
    parts = []
    for v in counts.values():
        r = round(v / base, 1)
        parts.append(str(int(r)) if r == int(r) else f"{r:g}")
    return ":".join(parts)


def default_created_utc() -> str:
    """Creation stamp; SOURCE_DATE_EPOCH pins it for reproducible builds."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.replace(microsecond=0).isoformat()


def write_manifest(
    entries: Iterable[ManifestEntry],
    path: Path,
    seed: int = 0,
    config_digest: str = "",
    root: str = ".",
    created_utc: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    entries = list(entries)
    header = ManifestHeader(
        seed=seed,
        created_utc=created_utc if created_utc is not None else default_created_utc(),
        config_digest=config_digest,
        root=root,
        class_counts=class_histogram(entries),
        **(extra or {}),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps(header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")) + "\n")
            for entry in entries:
                fh.write(entry.to_json() + "\n")
    except OSError as e:
        raise IoError(str(path), f"cannot write manifest: {e}")
    logger.info("Manifest written", path=str(path), entries=len(entries), class_counts=header.class_counts)
    return path


def _describe(e: Exception) -> str:
    if isinstance(e, ValidationError):
        return "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
    return str(e).splitlines()[0]


def read_manifest(path: Path) -> Manifest:
    """Read and validate a manifest; an empty file is an empty manifest."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(str(path), f"cannot read manifest: {e}")

    manifest = Manifest(path=path)
    if not lines or not any(line.strip() for line in lines):
        return manifest

    try:
        header_obj = json.loads(lines[0])
        if not isinstance(header_obj, dict) or "schema_version" not in header_obj:
            raise ValueError("first line must be a header object with schema_version")
        manifest.header = ManifestHeader(**header_obj)
    except (json.JSONDecodeError, ValueError, ValidationError) as e:
        raise SchemaError(str(path), 1, _describe(e))
    if manifest.header.schema_version != MANIFEST_SCHEMA_VERSION:
        raise SchemaError(
            str(path), 1, f"schema_version {manifest.header.schema_version} != {MANIFEST_SCHEMA_VERSION}"
        )

    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("entry must be an object")
            manifest.entries.append(ManifestEntry(**obj))
            manifest.lines.append(line_no)
        except (json.JSONDecodeError, ValueError, ValidationError, TypeError) as e:
            raise SchemaError(str(path), line_no, _describe(e))
    return manifest
