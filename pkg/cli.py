"""
Command-line harness: one subcommand per experiment.

    python cli.py verify_formula --sizes 1000 10000 --pairs 5 --seed 7 --out runs/
    python cli.py scan_l12 --config scan.json --threads 8
    python cli.py emit_vector_field --K 5 --grid 21 > field.csv

Flags are generated from each experiment's config model. Values come from the
model defaults, then from ``--config`` (a JSON object), then from explicit
flags; the report echoes the merged result. The exit status is 0 when every
acceptance check passed, 2 when the run finished with failed checks and 1 on
configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from Controllers import experiments_controller
from DAL.schemas import CONFIG_CLASSES
from Services.errors import ArtifactWriteError, ConfigValidationError, PopgradError
from Services.experiments import emit_vector_field

logger = logging.getLogger("popgrad")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAILED_CHECKS = 2

# handled by the shared flags below
SHARED_FIELDS = {"experiment", "seed", "output_path", "threads", "write_xlsx"}


def _is_list(annotation: Any) -> bool:
    return typing.get_origin(annotation) in (list, List)


def _is_nested_list(annotation: Any) -> bool:
    args = typing.get_args(annotation)
    return _is_list(annotation) and bool(args) and _is_list(args[0])


def _add_shared_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file with config values")
    parser.add_argument("--seed", type=int, help="64-bit unsigned seed")
    parser.add_argument("--out", dest="output_path", help="output directory (default: $POPGRAD_OUTPUT_DIR or ./runs)")
    parser.add_argument("--threads", type=int, help="worker threads")
    parser.add_argument("--xlsx", dest="write_xlsx", action="store_true", default=None, help="also write an .xlsx workbook")


def _add_model_flags(parser: argparse.ArgumentParser, model: type) -> None:
    for name, info in model.model_fields.items():
        if name in SHARED_FIELDS:
            continue
        flag = "--" + name.replace("_", "-")
        default = info.get_default(call_default_factory=True)
        help_text = f"default: {json.dumps(default)}"
        if _is_nested_list(info.annotation):
            parser.add_argument(flag, dest=name, nargs="+", type=json.loads, help=f"JSON lists, {help_text}")
        elif _is_list(info.annotation):
            parser.add_argument(flag, dest=name, nargs="+", help=help_text)
        else:
            parser.add_argument(flag, dest=name, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popgrad", description="Population-gradient experiments for ReLU teacher-student networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, model in sorted(CONFIG_CLASSES.items()):
        command = sub.add_parser(name, help=f"run the {name} experiment")
        _add_shared_flags(command)
        _add_model_flags(command, model)

    field_cmd = sub.add_parser("emit_vector_field", help="print the symmetric vector field as CSV")
    field_cmd.add_argument("--K", type=int, default=2)
    field_cmd.add_argument("--grid", type=int, default=41)
    field_cmd.add_argument("--lo", type=float, default=0.0)
    field_cmd.add_argument("--hi", type=float, default=1.0)
    return parser


def _load_config_file(path: Path) -> Dict[str, Any]:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigValidationError(
            f"cannot read config file {path}", fields=[{"field": "config", "message": str(exc)}]
        ) from exc
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(
            f"config file {path} is not valid JSON", fields=[{"field": "config", "message": str(exc)}]
        ) from exc
    if not isinstance(payload, dict):
        raise ConfigValidationError(
            f"config file {path} must hold a JSON object", fields=[{"field": "config", "message": "not an object"}]
        )
    return payload


def merge_config(command: str, args: argparse.Namespace) -> Dict[str, Any]:
    """File values first, then every flag the user actually passed."""

    payload: Dict[str, Any] = {}
    if args.config is not None:
        payload.update(_load_config_file(args.config))
        if payload.get("experiment", command) != command:
            raise ConfigValidationError(
                f"config file is for {payload['experiment']!r}, not {command!r}",
                fields=[{"field": "experiment", "message": "does not match the subcommand"}],
            )
    payload["experiment"] = command
    for key, value in vars(args).items():
        if key in {"command", "config"} or value is None:
            continue
        payload[key] = value
    return payload


def _run_vector_field(args: argparse.Namespace) -> int:
    experiments_controller.validate_config(
        {"experiment": "symmetric_field", "K": args.K, "grid": args.grid, "lo": args.lo, "hi": args.hi}
    )
    sys.stdout.write(emit_vector_field(args.K, args.grid, (args.lo, args.hi)))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=logging.INFO, stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "emit_vector_field":
            return _run_vector_field(args)
        report = experiments_controller.run_experiment_controller(merge_config(args.command, args))
    except ConfigValidationError as exc:
        logger.error("%s", exc)
        for entry in exc.fields:
            logger.error("  %s: %s", entry["field"], entry["message"])
        return EXIT_ERROR
    except ArtifactWriteError as exc:
        logger.error("artifact write failed: %s", exc)
        return EXIT_ERROR
    except PopgradError as exc:
        logger.error("run failed: %s", exc)
        return EXIT_ERROR

    print(report.model_dump_json(indent=2))
    return EXIT_OK if report.passed else EXIT_FAILED_CHECKS


if __name__ == "__main__":
    sys.exit(main())
