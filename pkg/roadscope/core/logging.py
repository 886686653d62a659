"""
Logging setup and the per-workspace run log.
"""
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

import structlog

_configured = False


def configure_logging(level: str = "info", fmt: str = "json") -> None:
    """Configure structlog on top of the stdlib logging module.

    Log lines go to stderr so that stdout stays free for command output.
    """
    global _configured

    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, level.upper(), logging.INFO),
        force=True,
    )

    renderer = (
        structlog.dev.ConsoleRenderer(colors=False)
        if fmt == "console"
        else structlog.processors.JSONRenderer()
    )

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            renderer,
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )
    _configured = True


class RunLog:
    """Append-only JSON Lines log of CLI runs inside a workspace."""

    def __init__(self, path: Path, command: str, config_digest: str, seed: int):
        self.path = Path(path)
        self.command = command
        self.config_digest = config_digest
        self.seed = seed

    def record(self, event: str, **fields: Any) -> Dict[str, Any]:
        entry: Dict[str, Any] = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "event": event,
            "command": self.command,
            "config_digest": self.config_digest,
            "seed": self.seed,
        }
        entry.update(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True, default=str) + "\n")
        return entry

    def finish(self, status: str, exit_code: int, error: Optional[str] = None) -> Dict[str, Any]:
        return self.record("run_finished", status=status, exit_code=exit_code, error=error)
