"""
Centralized exception handling for roadscope.

Every error carries a stable ``error_code``, a ``details`` dict and the CLI
exit code it maps to (1 usage, 2 data, 3 internal).
"""
from typing import Any, Dict, Optional
import structlog

logger = structlog.get_logger(__name__)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class RoadscopeError(Exception):
    """Base exception for roadscope."""

    exit_code: int = EXIT_INTERNAL

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
        exit_code: Optional[int] = None,
    ):
        self.message = message
        self.error_code = error_code or self.__class__.__name__
        self.details = details or {}
        if exit_code is not None:
            self.exit_code = exit_code

        super().__init__(self.message)

        logger.debug(
            "roadscope exception raised",
            error_code=self.error_code,
            message=self.message,
            details=self.details,
            exit_code=self.exit_code,
        )


# ---------------------------------------------------------------------------
# Usage and configuration
# ---------------------------------------------------------------------------


class UsageError(RoadscopeError):
    """Bad command line usage."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, error_code="USAGE_ERROR", details=details)


class ConfigurationError(RoadscopeError):
    """Configuration loading and validation errors."""

    exit_code = EXIT_USAGE

    def __init__(self, component: str, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(
            message=f"Configuration error in {component}: {message}",
            error_code="CONFIGURATION_ERROR",
            details=details or {"component": component},
        )


# ---------------------------------------------------------------------------
# Data errors
# ---------------------------------------------------------------------------


class DataError(RoadscopeError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = EXIT_DATA


class IoError(DataError):
    def __init__(self, path: str, message: str):
        super().__init__(
            message=f"{path}: {message}",
            error_code="IO_ERROR",
            details={"path": path},
        )


class LatitudeOutOfRange(DataError):
    def __init__(self, lat: float, limit: float = 85.0):
        super().__init__(
            message=f"Latitude {lat} outside the supported band |lat| < {limit}",
            error_code="LATITUDE_OUT_OF_RANGE",
            details={"lat": lat, "limit": limit},
        )


class OutOfFootprint(DataError):
    def __init__(self, col: int, row: int, width: int, height: int):
        super().__init__(
            message=f"Pixel ({col}, {row}) outside raster footprint {width}x{height}",
            error_code="OUT_OF_FOOTPRINT",
            details={"col": col, "row": row, "width": width, "height": height},
        )


class MalformedInput(DataError):
    def __init__(self, source: str, message: str, byte_offset: Optional[int] = None):
        where = f" at byte {byte_offset}" if byte_offset is not None else ""
        super().__init__(
            message=f"Malformed input in {source}{where}: {message}",
            error_code="MALFORMED_INPUT",
            details={"source": source, "byte_offset": byte_offset},
        )
        self.byte_offset = byte_offset


class EmptyResult(DataError):
    def __init__(self, source: str, message: str = "no usable records"):
        super().__init__(
            message=f"{source}: {message}",
            error_code="EMPTY_RESULT",
            details={"source": source},
        )


class MissingMetadata(DataError):
    def __init__(self, path: str, message: str = "metadata file not found"):
        super().__init__(
            message=f"{path}: {message}",
            error_code="MISSING_METADATA",
            details={"path": path},
        )


class SizeMismatch(DataError):
    def __init__(self, what: str, expected: Any, actual: Any):
        super().__init__(
            message=f"{what}: expected {expected}, got {actual}",
            error_code="SIZE_MISMATCH",
            details={"what": what, "expected": expected, "actual": actual},
        )


class RotatedTransform(DataError):
    def __init__(self, path: str, terms: Dict[str, float]):
        super().__init__(
            message=f"{path}: rotated or sheared geotransforms are not supported",
            error_code="ROTATED_TRANSFORM",
            details={"path": path, **terms},
        )


class OutOfBounds(DataError):
    def __init__(self, col: int, row: int, size: int, width: int, height: int):
        super().__init__(
            message=(
                f"Window {size}x{size} at ({col}, {row}) is not contained in "
                f"raster {width}x{height}"
            ),
            error_code="OUT_OF_BOUNDS",
            details={"col": col, "row": row, "size": size, "width": width, "height": height},
        )


class SchemaError(DataError):
    def __init__(self, path: str, line: int, message: str):
        super().__init__(
            message=f"{path}:{line}: {message}",
            error_code="SCHEMA_ERROR",
            details={"path": path, "line": line},
        )
        self.line = line


class InsufficientClass(DataError):
    def __init__(self, road_class: str, have: int, need: int):
        super().__init__(
            message=f"Class {road_class} has {have} entries, {need} required",
            error_code="INSUFFICIENT_CLASS",
            details={"class": road_class, "have": have, "need": need},
        )
        self.road_class = road_class
        self.have = have
        self.need = need


class TileLoadError(DataError):
    def __init__(self, path: str, line: Optional[int], message: str):
        where = f" (manifest line {line})" if line is not None else ""
        super().__init__(
            message=f"Cannot load {path}{where}: {message}",
            error_code="TILE_LOAD_ERROR",
            details={"path": path, "line": line},
        )


class ConfigInfeasible(DataError):
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, error_code="CONFIG_INFEASIBLE", details=details)


class VersionMismatch(DataError):
    def __init__(self, artifact: str, found: int, expected: int):
        super().__init__(
            message=f"{artifact} schema_version {found} is not supported (expected {expected})",
            error_code="VERSION_MISMATCH",
            details={"artifact": artifact, "found": found, "expected": expected},
        )


class DigestMismatch(DataError):
    def __init__(self, artifact: str, expected: str, actual: str):
        super().__init__(
            message=f"{artifact}: sha256 mismatch (header {expected[:12]}, blob {actual[:12]})",
            error_code="DIGEST_MISMATCH",
            details={"artifact": artifact, "expected": expected, "actual": actual},
        )


class LabelOutOfRange(DataError):
    def __init__(self, label: int, n_classes: int = 3):
        super().__init__(
            message=f"Label {label} outside [0, {n_classes})",
            error_code="LABEL_OUT_OF_RANGE",
            details={"label": label, "n_classes": n_classes},
        )


class EmptyMatrix(DataError):
    def __init__(self):
        super().__init__(
            message="Confusion matrix has no samples",
            error_code="EMPTY_MATRIX",
        )


# ---------------------------------------------------------------------------
# Model errors
# ---------------------------------------------------------------------------


class ModelError(RoadscopeError):
    """Numerical or architectural model failures."""

    exit_code = EXIT_INTERNAL


class ModelSpecError(ModelError):
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message=message, error_code="MODEL_SPEC_ERROR", details=details)


class ShapeMismatch(ModelError):
    def __init__(self, where: str, expected: Any, actual: Any):
        super().__init__(
            message=f"Shape mismatch in {where}: expected {expected}, got {actual}",
            error_code="SHAPE_MISMATCH",
            details={"where": where, "expected": str(expected), "actual": str(actual)},
        )


class NonFiniteActivation(ModelError):
    def __init__(self, layer: str, step: Optional[int] = None):
        super().__init__(
            message=f"Non-finite activation after {layer}" + (f" at step {step}" if step is not None else ""),
            error_code="NON_FINITE_ACTIVATION",
            details={"layer": layer, "step": step},
        )


class NonFiniteGradient(ModelError):
    def __init__(self, parameter: str, step: Optional[int] = None):
        super().__init__(
            message=f"Non-finite gradient for {parameter}" + (f" at step {step}" if step is not None else ""),
            error_code="NON_FINITE_GRADIENT",
            details={"parameter": parameter, "step": step},
        )


class ArchitectureUnsupported(ModelError):
    def __init__(self, message: str):
        super().__init__(message=message, error_code="ARCHITECTURE_UNSUPPORTED")


class ExperimentError(ModelError):
    def __init__(self, experiment: str, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(
            message=f"Experiment {experiment} failed: {message}",
            error_code="EXPERIMENT_ERROR",
            details=details or {"experiment": experiment},
        )


# ---------------------------------------------------------------------------
# External embedding backend
# ---------------------------------------------------------------------------


class BackendError(RoadscopeError):
    """External embedding backend failures."""

    exit_code = EXIT_DATA


class BackendUnavailable(BackendError):
    def __init__(self, command: str, last_good_index: Optional[int], message: str):
        super().__init__(
            message=f"Embedding backend {command!r} unavailable: {message}",
            error_code="BACKEND_UNAVAILABLE",
            details={"command": command, "last_good_index": last_good_index},
        )
        self.last_good_index = last_good_index


class ProtocolError(BackendError):
    def __init__(self, message: str, received: Optional[str] = None):
        super().__init__(
            message=f"Embedding protocol violation: {message}",
            error_code="PROTOCOL_ERROR",
            details={"received": received},
        )


class DimensionMismatch(BackendError):
    def __init__(self, declared: int, received: int):
        super().__init__(
            message=f"Backend declared dim={declared} but sent {received} floats",
            error_code="DIMENSION_MISMATCH",
            details={"declared": declared, "received": received},
        )
