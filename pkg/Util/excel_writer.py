"""Workbook export of experiment tables: a data sheet plus a run summary sheet."""

from __future__ import annotations

from io import BytesIO
from typing import Iterable, Mapping, Sequence

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter
from openpyxl.worksheet.worksheet import Worksheet

HEADER_FILL = PatternFill(start_color="1E40AF", end_color="1E40AF", fill_type="solid")
HEADER_FONT = Font(color="FFFFFF", bold=True)
HEADER_ALIGNMENT = Alignment(horizontal="center", vertical="center")
FAIL_FONT = Font(color="B91C1C", bold=True)
CELL_BORDER = Border(
    left=Side(style="thin", color="D1D5DB"),
    right=Side(style="thin", color="D1D5DB"),
    top=Side(style="thin", color="D1D5DB"),
    bottom=Side(style="thin", color="D1D5DB"),
)
MAX_SHEET_ROWS = 1_048_575


def _cell_value(value: object) -> object:
    """Numbers stay numeric; lists and other objects are written as text."""

    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int, float)):
        return value
    return str(value)


def _style_header(worksheet: Worksheet) -> None:
    for cell in worksheet[1]:
        cell.font = HEADER_FONT
        cell.fill = HEADER_FILL
        cell.alignment = HEADER_ALIGNMENT
        cell.border = CELL_BORDER


def _fit_columns(worksheet: Worksheet, sample_rows: int = 200) -> None:
    for column_cells in worksheet.iter_cols(max_row=sample_rows):
        longest = max((len(str(cell.value)) for cell in column_cells if cell.value is not None), default=0)
        letter = get_column_letter(column_cells[0].column)
        worksheet.column_dimensions[letter].width = min(longest + 4, 40)


def _write_table(worksheet: Worksheet, headers: Sequence[str], rows: Iterable[Sequence[object]]) -> int:
    worksheet.append([str(header) for header in headers])
    _style_header(worksheet)
    written = 0
    for row in rows:
        if written >= MAX_SHEET_ROWS:
            break
        worksheet.append([_cell_value(value) for value in row])
        written += 1
    worksheet.freeze_panes = "A2"
    _fit_columns(worksheet)
    return written


def build_experiment_workbook(
    experiment: str,
    headers: Sequence[str],
    rows: Iterable[Sequence[object]],
    *,
    config: Mapping[str, object],
    summary: Mapping[str, object],
    checks: Sequence[Mapping[str, object]],
) -> bytes:
    """Return workbook bytes with ``data`` and ``summary`` sheets for one run."""

    workbook = Workbook()
    data_sheet = workbook.active
    data_sheet.title = (experiment or "data")[:31]
    _write_table(data_sheet, headers, rows)

    summary_sheet = workbook.create_sheet("summary")
    entries = [("config", key, value) for key, value in config.items()]
    entries += [("summary", key, value) for key, value in summary.items()]
    _write_table(summary_sheet, ["section", "key", "value"], entries)

    check_sheet = workbook.create_sheet("checks")
    _write_table(
        check_sheet,
        ["name", "passed", "observed", "threshold"],
        [(c.get("name"), c.get("passed"), c.get("observed"), c.get("threshold")) for c in checks],
    )
    for row in check_sheet.iter_rows(min_row=2):
        if row[1].value == "false":
            row[1].font = FAIL_FONT

    buffer = BytesIO()
    workbook.save(buffer)
    return buffer.getvalue()


__all__ = ["build_experiment_workbook"]
