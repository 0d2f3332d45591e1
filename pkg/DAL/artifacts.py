"""
Artifact storage for experiment runs.

Each run writes ``<experiment>.csv`` (raw data), ``<experiment>.json`` (the
report) and optionally ``<experiment>.xlsx`` into one output directory. The
directory comes from the run config, else from ``POPGRAD_OUTPUT_DIR``, else
``./runs``; it is created on first use. Files are written once, at the end of
a run.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, TextIO

from Services.errors import ArtifactWriteError
from Util.csv_writer import write_rows

DEFAULT_OUTPUT_DIR = "runs"


def resolve_output_dir(output_path: Optional[str] = None) -> Path:
    raw = output_path or os.getenv("POPGRAD_OUTPUT_DIR") or DEFAULT_OUTPUT_DIR
    path = Path(raw).expanduser()
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactWriteError("cannot create output directory", path=path) from exc
    return path


@contextmanager
def open_artifact(path: Path) -> Iterator[TextIO]:
    """Text handle for ``path`` with OS errors reported against the path."""

    try:
        handle = path.open("w", encoding="utf-8", newline="")
    except OSError as exc:
        raise ArtifactWriteError("cannot open artifact", path=path) from exc
    try:
        yield handle
    except OSError as exc:
        raise ArtifactWriteError("cannot write artifact", path=path) from exc
    finally:
        handle.close()


def write_csv(path: Path, headers: Sequence[str], rows: Iterable[Sequence[object]]) -> int:
    with open_artifact(path) as handle:
        return write_rows(handle, headers, rows)


def write_json(path: Path, payload: object) -> None:
    with open_artifact(path) as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, allow_nan=True)
        handle.write("\n")


def write_bytes(path: Path, payload: bytes) -> None:
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise ArtifactWriteError("cannot write artifact", path=path) from exc


__all__ = [
    "DEFAULT_OUTPUT_DIR",
    "resolve_output_dir",
    "open_artifact",
    "write_csv",
    "write_json",
    "write_bytes",
]
