"""
roadscope command line.

Usage:
    python main.py synth --signal context --out ws
    python main.py mask-experiment --workspace ws

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Sequence

import structlog

from roadscope import __version__
from roadscope.cli.commands import HANDLERS, CommandContext, schema_versions
from roadscope.config.settings import RunConfig, load_run_config
from roadscope.core.exceptions import EXIT_INTERNAL, EXIT_USAGE, RoadscopeError, UsageError
from roadscope.core.logging import RunLog, configure_logging

logger = structlog.get_logger(__name__)


CONFIG_ECHO = "config.json"
RUN_LOG = Path("logs") / "runs.jsonl"


class RoadscopeArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors raised instead of ``exit(2)``."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(message, details={"usage": self.format_usage()})


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON run config")
    parser.add_argument("--workspace", default=default, help="workspace directory (default: ws)")
    parser.add_argument("--seed", type=int, default=default, help="run seed")
    parser.add_argument("--threads", type=int, default=default, help="worker threads")
    parser.add_argument("--log-level", default=default, help="debug, info, warning or error")


def build_parser() -> argparse.ArgumentParser:
    parser = RoadscopeArgumentParser(prog="roadscope", description="Road quality pipeline and diagnostics")
    _global_flags(parser, suppress=False)
    parser.add_argument("--version", action="store_true", help="print version and file schema versions")

    common = RoadscopeArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=RoadscopeArgumentParser)

    p = sub.add_parser("ingest", parents=[common], help="parse OSM GeoJSON into a road table")
    p.add_argument("--geojson", required=True)
    p.add_argument("--out")

    p = sub.add_parser("sample", parents=[common], help="sample tile centers along roads")
    p.add_argument("--roads", required=True, help="road table (.jsonl) or GeoJSON")
    p.add_argument("--spacing", type=float, help="meters between samples")
    p.add_argument("--out")

    p = sub.add_parser("build-dataset", parents=[common], help="extract, filter, balance and split tiles")
    p.add_argument("--roads", required=True)
    p.add_argument("--scenes", required=True, help="directory of scene containers")
    p.add_argument("--per-class", help="entries per class, or 'min'")
    p.add_argument("--country", help="only use scenes of this country")
    p.add_argument("--no-masks", action="store_true")
    p.add_argument("--out", help="manifest path")

    p = sub.add_parser("mask", parents=[common], help="regenerate mask PNGs for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--roads", required=True)
    p.add_argument("--scenes", required=True)

    p = sub.add_parser("train", parents=[common], help="train a classifier on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mask-mode", default="none")
    p.add_argument("--backend", help="external embedding backend command")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--architecture")
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common], help="evaluate a model on a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mask-mode", help="default: the mode the model was trained with")
    p.add_argument("--split", default="test", choices=["train", "test", "none"])
    p.add_argument("--backend")
    p.add_argument("--scenario", help="row label in the report")

    p = sub.add_parser("mask-experiment", parents=[common], help="train and score the three masking scenarios")
    p.add_argument("--manifest", help="default: <workspace>/manifests/dataset.jsonl")
    p.add_argument("--test-manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--save-models", action="store_true")

    p = sub.add_parser("transfer", parents=[common], help="in-domain and cross-domain accuracies")
    p.add_argument("--country-a", default="KE")
    p.add_argument("--country-b", default="PE")
    p.add_argument("--manifest-a")
    p.add_argument("--manifest-b")
    p.add_argument("--pooled", action="store_true", help="also train on both countries")
    p.add_argument("--mask-mode", default="none")
    p.add_argument("--epochs", type=int)
    p.add_argument("--save-models", action="store_true")

    p = sub.add_parser("cam", parents=[common], help="class activation map for one tile")
    p.add_argument("--model", required=True)
    p.add_argument("--tile", required=True)
    p.add_argument("--mask")
    p.add_argument("--class", dest="road_class", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus and its dataset")
    p.add_argument("--signal", choices=["road", "context", "both"])
    p.add_argument("--out", help="workspace to write into")
    p.add_argument("--style")
    p.add_argument("--country")
    p.add_argument("--n-roads", type=int)
    p.add_argument("--scene-size", type=int)
    p.add_argument("--tile-size", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--per-class", help="entries per class, or 'min' (default)")
    p.add_argument("--pair", action="store_true", help="also generate a second country")
    p.add_argument("--country-b", default="PE")
    p.add_argument("--style-b", default="andes")

    p = sub.add_parser("report", parents=[common], help="render an experiment JSON as CSV or markdown")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    p.add_argument("--out")

    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config overrides from command line flags."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides: Dict[str, Any] = {
        "runtime.threads": get("threads"),
        "runtime.log_level": get("log_level"),
        "train.epochs": get("epochs"),
        "train.lr": get("lr"),
        "train.architecture": get("architecture"),
        "sampler.spacing_m": get("spacing"),
    }
    if get("seed") is not None:
        for key in ("runtime.seed", "train.seed", "synth.seed"):
            overrides[key] = args.seed
    if args.command == "synth":
        overrides.update(
            {
                "synth.signal_location": get("signal"),
                "synth.country_style": get("style"),
                "synth.country": get("country"),
                "synth.n_roads": get("n_roads"),
                "synth.scene_size_px": get("scene_size"),
                "synth.tile_size_px": get("tile_size"),
                "synth.noise_sigma": get("noise_sigma"),
            }
        )
    return overrides


def _workspace(args: argparse.Namespace) -> Path:
    if args.command == "synth" and getattr(args, "out", None):
        return Path(args.out)
    if getattr(args, "workspace", None):
        return Path(args.workspace)
    return Path(load_run_config().runtime.workspace)


def resolve_config(args: argparse.Namespace, workspace: Path) -> RunConfig:
    """Explicit ``--config``, else the config echoed into the workspace."""
    path: Optional[Path] = Path(args.config) if getattr(args, "config", None) else None
    if path is None and (workspace / CONFIG_ECHO).is_file():
        path = workspace / CONFIG_ECHO
    overrides = _overrides(args)
    overrides["runtime.workspace"] = workspace.as_posix()
    return load_run_config(path, overrides)


def _fail(error: RoadscopeError) -> int:
    print(f"roadscope: error: {error.message}", file=sys.stderr)
    usage = error.details.get("usage") if isinstance(error.details, dict) else None
    if usage:
        print(usage.rstrip(), file=sys.stderr)
    return error.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        return _fail(e)

    if args.version:
        print(json.dumps({"roadscope": __version__, "schemas": schema_versions()}, sort_keys=True))
        return 0
    if not args.command:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return EXIT_USAGE

    try:
        workspace = _workspace(args)
        cfg = resolve_config(args, workspace)
    except RoadscopeError as e:
        return _fail(e)

    configure_logging(cfg.runtime.log_level, cfg.runtime.log_format)
    run_log = RunLog(workspace / RUN_LOG, args.command, cfg.digest(), cfg.seed)
    argv_list: List[str] = list(argv) if argv is not None else sys.argv[1:]

    try:
        run_log.record("run_started", argv=argv_list)
        if args.command != "synth":
            cfg.write(workspace / CONFIG_ECHO)
        ctx = CommandContext(cfg=cfg, workspace=workspace, run_log=run_log)
        summary = HANDLERS[args.command](args, ctx)
    except RoadscopeError as e:
        logger.error("Command failed", command=args.command, error_code=e.error_code, details=e.details)
        _safe_finish(run_log, "error", e.exit_code, e.message)
        return _fail(e)
    except Exception as e:  # noqa: BLE001
        logger.exception("Unexpected failure", command=args.command)
        _safe_finish(run_log, "error", EXIT_INTERNAL, f"{type(e).__name__}: {e}")
        print(f"roadscope: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL

    run_log.finish("ok", 0)
    print(json.dumps(summary, sort_keys=True, indent=2, default=str))
    return 0


def _safe_finish(run_log: RunLog, status: str, exit_code: int, error: str) -> None:
    try:
        run_log.finish(status, exit_code, error)
    except OSError:
        logger.warning("Run log not writable", path=str(run_log.path))


if __name__ == "__main__":
    sys.exit(main())
