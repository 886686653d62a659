"""Model files: one JSON header line followed by a little-endian f32 blob.

The header names the schema version, the layer spec, the input shape, the
seed and the sha256 of the blob; parameters follow in state-dict order.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import structlog

from roadscope.core.exceptions import DigestMismatch, IoError, NonFiniteActivation, VersionMismatch
from roadscope.nn.model import ModelSpec, RoadNet, load_parameter_blob, parameter_blob

logger = structlog.get_logger(__name__)

MODEL_SCHEMA_VERSION = 1


def save_model(
    model: RoadNet,
    path: Path,
    seed: int = 0,
    config_digest: str = "",
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    blob = parameter_blob(model)
    if any(not bool(p.isfinite().all()) for p in model.parameters()):
        raise NonFiniteActivation("parameters")
    header: Dict[str, Any] = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "model_spec": model.spec.model_dump(mode="json"),
        "input_shape": list(model.input_shape),
        "seed": seed,
        "config_digest": config_digest,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "n_bytes": len(blob),
    }
    header.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n" + blob)
    logger.info("Model saved", path=str(path), spec=model.spec.name, sha256=header["sha256"])
    return path


def read_header(path: Path) -> Tuple[Dict[str, Any], bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(str(path), f"cannot read model file: {e}")
    head, sep, blob = raw.partition(b"\n")
    try:
        if not sep:
            raise ValueError("no header terminator")
        header = json.loads(head.decode("utf-8"))
        if not isinstance(header, dict):
            raise ValueError("header is not an object")
    except (UnicodeDecodeError, ValueError) as e:
        raise DigestMismatch(str(path), "readable header", f"unreadable ({e})")
    return header, blob


def load_model(path: Path) -> Tuple[RoadNet, Dict[str, Any]]:
    """Load a model file; returns the network and its header."""
    header, blob = read_header(path)
    version = header.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise VersionMismatch(str(path), version, MODEL_SCHEMA_VERSION)

    expected = str(header.get("sha256", ""))
    actual = hashlib.sha256(blob).hexdigest()
    if actual != expected:
        raise DigestMismatch(str(path), expected, actual)

    spec = ModelSpec.model_validate(header["model_spec"])
    model = RoadNet(spec, header["input_shape"])
    load_parameter_blob(model, blob)
    model.eval()
    logger.debug("Model loaded", path=str(path), spec=spec.name)
    return model, header
