"""RFC-4180 CSV output with round-trippable number formatting."""

from __future__ import annotations

import csv
import io
import numbers
from typing import Iterable, Sequence, TextIO

import numpy as np


def format_cell(value: object) -> str:
    """Floats get 17 significant digits; ``None`` becomes an empty field."""

    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, numbers.Integral):
        return str(int(value))
    if isinstance(value, numbers.Real):
        return format(float(value), ".17g")
    return str(value)


def write_rows(stream: TextIO, headers: Sequence[str], rows: Iterable[Sequence[object]]) -> int:
    writer = csv.writer(stream, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow([str(header) for header in headers])
    count = 0
    for row in rows:
        writer.writerow([format_cell(value) for value in row])
        count += 1
    return count


def rows_to_csv_text(headers: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    write_rows(buffer, headers, rows)
    return buffer.getvalue()


__all__ = ["format_cell", "write_rows", "rows_to_csv_text"]
