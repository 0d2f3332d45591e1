"""
Controller functions for experiment runs.

These sit between the entry points (CLI and HTTP routes) and the service
runners: they validate a raw config mapping, dispatch to the owning runner,
time the run, persist its artifacts and assemble the ``ExperimentReport``.
Validation failures come back as ``ConfigValidationError`` with one entry per
offending field so both entry points can report them the same way.
"""

from __future__ import annotations

import logging
import time
from typing import Any, Dict, List, Mapping, Tuple

from pydantic import ValidationError

from DAL import artifacts
from DAL.schemas import CONFIG_CLASSES, ExperimentConfigBase, ExperimentReport, parse_config
from Services.errors import ConfigValidationError
from Services.experiments import EXPERIMENTS, VECTOR_FIELD_HEADERS
from Services.symmetric_dynamics import vector_field
from Util.excel_writer import build_experiment_workbook

logger = logging.getLogger(__name__)


def _field_errors(exc: ValidationError, experiment: str) -> List[Dict[str, str]]:
    """One entry per error, with the union tag dropped from the location."""

    fields = []
    for error in exc.errors():
        loc = [str(part) for part in error["loc"] if part != experiment]
        fields.append({"field": ".".join(loc) or "config", "message": error["msg"]})
    return fields


def validate_config(payload: Mapping[str, Any]) -> ExperimentConfigBase:
    """Parse ``payload`` into its experiment's config class."""

    name = payload.get("experiment")
    if name not in CONFIG_CLASSES:
        known = ", ".join(sorted(CONFIG_CLASSES))
        raise ConfigValidationError(
            f"unknown experiment {name!r}",
            fields=[{"field": "experiment", "message": f"must be one of: {known}"}],
        )
    try:
        return parse_config(dict(payload))
    except ValidationError as exc:
        fields = _field_errors(exc, name)
        raise ConfigValidationError(f"invalid {name} config", fields=fields) from exc


def _persist(
    config: ExperimentConfigBase, report: ExperimentReport, headers: List[str], rows: List[List[Any]]
) -> ExperimentReport:
    out_dir = artifacts.resolve_output_dir(config.output_path)
    csv_path = out_dir / f"{config.experiment}.csv"
    json_path = out_dir / f"{config.experiment}.json"
    artifacts.write_csv(csv_path, headers, rows)
    report.csv_path = str(csv_path)
    report.json_path = str(json_path)
    if config.write_xlsx:
        xlsx_path = out_dir / f"{config.experiment}.xlsx"
        artifacts.write_bytes(
            xlsx_path,
            build_experiment_workbook(
                config.experiment,
                headers,
                rows,
                config=report.config,
                summary=report.summary,
                checks=[check.model_dump() for check in report.checks],
            ),
        )
        report.xlsx_path = str(xlsx_path)
    artifacts.write_json(json_path, report.model_dump(mode="json"))
    return report


def run_experiment_controller(payload: Mapping[str, Any], *, persist: bool = True) -> ExperimentReport:
    """Validate, run and (optionally) persist one experiment."""

    config = validate_config(payload)
    runner = EXPERIMENTS[config.experiment]
    logger.info("running %s (seed=%d, threads=%d)", config.experiment, config.seed, config.threads)
    started = time.perf_counter()
    outcome = runner(config)
    elapsed = time.perf_counter() - started

    report = ExperimentReport(
        experiment=config.experiment,
        config=config.model_dump(mode="json"),
        summary=outcome.summary,
        checks=outcome.checks,
        passed=outcome.passed,
        wall_clock_seconds=elapsed,
        rows=len(outcome.rows),
    )
    if persist:
        report = _persist(config, report, outcome.headers, outcome.rows)
    failed = [check.name for check in outcome.checks if not check.passed]
    if failed:
        logger.warning("%s finished in %.2fs with failed checks: %s", config.experiment, elapsed, ", ".join(failed))
    else:
        logger.info("%s finished in %.2fs, all checks passed", config.experiment, elapsed)
    return report


def list_experiments_controller() -> Dict[str, Dict[str, Any]]:
    """Every experiment name with its fully defaulted config."""

    return {name: cls().model_dump(mode="json") for name, cls in sorted(CONFIG_CLASSES.items())}


def vector_field_controller(K: int, grid: int, lo: float, hi: float) -> Tuple[List[str], List[List[float]]]:  # noqa: N803
    config = validate_config({"experiment": "symmetric_field", "K": K, "grid": grid, "lo": lo, "hi": hi})
    return list(VECTOR_FIELD_HEADERS), vector_field(config.K, config.grid, (config.lo, config.hi))
