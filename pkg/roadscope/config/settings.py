"""
Configuration settings for roadscope runs.

Each pipeline stage owns one settings section. Values resolve in the order
defaults < environment < JSON config file < command line flags, and the
fully resolved ``RunConfig`` is hashed into every artifact header.
"""
import hashlib
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from roadscope.core.exceptions import ConfigurationError
from roadscope.ingest.models import RoadClass

DEFAULT_AGGREGATION: Dict[str, List[str]] = {
    "major": ["motorway", "trunk", "primary", "motorway_link", "trunk_link", "primary_link"],
    "minor": [
        "secondary",
        "tertiary",
        "unclassified",
        "residential",
        "secondary_link",
        "tertiary_link",
        "service",
    ],
    "two_track": ["track"],
}


class GeoSettings(BaseSettings):
    """Raster geometry settings."""

    model_config = SettingsConfigDict(env_prefix="ROADSCOPE_GEO_", extra="forbid")

    gsd_m: float = Field(default=0.3, gt=0)
    tile_size_px: int = Field(default=1000, gt=0)
    m_per_deg_lat: float = Field(default=111_320.0, gt=0)


class IngestSettings(BaseSettings):
    """Tag aggregation settings."""

    model_config = SettingsConfigDict(env_prefix="ROADSCOPE_INGEST_", extra="forbid")

    aggregation: Dict[str, List[str]] = Field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_AGGREGATION.items()})

    @field_validator("aggregation")
    @classmethod
    def check_classes(cls, v: Dict[str, List[str]]) -> Dict[str, List[str]]:
        for name in v:
            RoadClass.parse(name)
        return v


class SamplerConfig(BaseSettings):
    """Arc-length sampling along road polylines."""

    model_config = SettingsConfigDict(env_prefix="ROADSCOPE_SAMPLER_", extra="forbid")

    spacing_m: float = Field(default=100.0, gt=0)
    min_separation_m: float = Field(default=0.0, ge=0)


class CloudFilterConfig(BaseSettings):
    """Per-pixel min-channel brightness cloud rule."""

    model_config = SettingsConfigDict(env_prefix="ROADSCOPE_CLOUD_", extra="forbid")

    brightness_threshold: int = Field(default=200, ge=0, le=255)
    max_bright_fraction: float = Field(default=0.4, ge=0.0, le=1.0)


class DatasetSettings(BaseSettings):
    """Balancing and splitting."""

    model_config = SettingsConfigDict(env_prefix="ROADSCOPE_DATASET_", extra="forbid")

    per_class: int = Field(default=5000, ge=0)
    test_ratio: float = Field(default=0.1, ge=0.0, le=1.0)
    split_by: Literal["tile", "road"] = "tile"


class DilationConfig(BaseSettings):
    """Radial mask expansion per road class, in pixels."""

    model_config = SettingsConfigDict(env_prefix="ROADSCOPE_DILATION_", extra="forbid")

    major_radius_px: int = Field(default=25, ge=0)
    minor_radius_px: int = Field(default=13, ge=0)
    two_track_radius_px: int = Field(default=8, ge=0)
    metric: Literal["euclidean"] = "euclidean"

    def radius_for(self, road_class: RoadClass) -> int:
        return {
            RoadClass.MAJOR: self.major_radius_px,
            RoadClass.MINOR: self.minor_radius_px,
            RoadClass.TWO_TRACK: self.two_track_radius_px,
        }[road_class]

    @classmethod
    def uniform(cls, radius_px: int) -> "DilationConfig":
        return cls(major_radius_px=radius_px, minor_radius_px=radius_px, two_track_radius_px=radius_px)


class TrainConfig(BaseSettings):
    """Optimizer and training loop settings."""

    model_config = SettingsConfigDict(env_prefix="ROADSCOPE_TRAIN_", extra="forbid")

    lr: float = Field(default=1e-4, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=32, gt=0)
    epochs: int = Field(default=20, ge=0)
    seed: int = 0
    input_size: int = Field(default=128, gt=0)
    architecture: Literal["tiny_road_net", "plain_conv"] = "tiny_road_net"
    head_hidden: int = Field(default=64, gt=0)


class SynthConfig(BaseSettings):
    """Synthetic ground-truth scene generation."""

    model_config = SettingsConfigDict(env_prefix="ROADSCOPE_SYNTH_", extra="forbid")

    signal_location: Literal["road", "context", "both"] = "context"
    country_style: str = "savanna"
    country: str = "KE"
    n_roads: int = Field(default=10, gt=0)
    scene_size_px: int = Field(default=4000, gt=0)
    tile_size_px: int = Field(default=1000, gt=0)
    road_radius_px: int = Field(default=24, ge=1)
    guard_px: int = Field(default=2, ge=0)
    noise_sigma: float = Field(default=6.0, ge=0)
    signal_amplitude: float = Field(default=28.0, gt=0)
    seed: int = 0


class RuntimeSettings(BaseSettings):
    """Process-level settings."""

    model_config = SettingsConfigDict(
        env_prefix="ROADSCOPE_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )

    seed: int = 0
    threads: int = Field(default=1, ge=1)
    workspace: str = "ws"
    log_level: str = "info"
    log_format: Literal["json", "console"] = "json"


SECTIONS = {
    "geo": GeoSettings,
    "ingest": IngestSettings,
    "sampler": SamplerConfig,
    "cloud": CloudFilterConfig,
    "dataset": DatasetSettings,
    "dilation": DilationConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "runtime": RuntimeSettings,
}


class RunConfig(BaseModel):
    """Fully resolved configuration of one run."""

    model_config = ConfigDict(extra="forbid")

    geo: GeoSettings = Field(default_factory=GeoSettings)
    ingest: IngestSettings = Field(default_factory=IngestSettings)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    cloud: CloudFilterConfig = Field(default_factory=CloudFilterConfig)
    dataset: DatasetSettings = Field(default_factory=DatasetSettings)
    dilation: DilationConfig = Field(default_factory=DilationConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    runtime: RuntimeSettings = Field(default_factory=RuntimeSettings)

    @model_validator(mode="after")
    def _sync_seed(self) -> "RunConfig":
        # The training seed follows the run seed unless set explicitly.
        if "seed" not in self.train.model_fields_set:
            self.train.seed = self.runtime.seed
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @property
    def seed(self) -> int:
        return self.runtime.seed

    def write(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    section, _, key = dotted.partition(".")
    if not key:
        raise ConfigurationError("overrides", f"override {dotted!r} must be section.key")
    tree.setdefault(section, {})[key] = value


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Resolve a RunConfig from an optional JSON file plus dotted overrides.

    Unknown sections or keys are rejected.
    """
    tree: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            tree = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError("config", f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigurationError("config", f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
        if not isinstance(tree, dict):
            raise ConfigurationError("config", f"{path}: top level must be an object")

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(tree, dotted, value)

    unknown = sorted(set(tree) - set(SECTIONS))
    if unknown:
        raise ConfigurationError("config", f"unknown sections: {', '.join(unknown)}")

    sections: Dict[str, BaseSettings] = {}
    for name, cls in SECTIONS.items():
        values = tree.get(name, {})
        if not isinstance(values, dict):
            raise ConfigurationError(name, "section must be an object")
        try:
            if name == "runtime":
                extra = sorted(set(values) - set(cls.model_fields))
                if extra:
                    raise ConfigurationError(name, f"unknown keys: {', '.join(extra)}")
            sections[name] = cls(**values)
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
            )
            raise ConfigurationError(name, problems, details={"component": name, "problems": problems})

    return RunConfig(**sections)


@lru_cache(maxsize=1)
def get_settings() -> RunConfig:
    """Get the process-wide default configuration."""
    return load_run_config()
