"""Report serialization: JSON with stable key order, CSV for tabular outputs.

Floats go through Python's shortest-round-trip repr, so value -> text ->
value is exact; key order is insertion order, which the schemas keep fixed.
Identical inputs therefore produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from typing import Any, Iterable, Mapping

from .errors import InputError


def canonical_json(payload: Mapping[str, Any]) -> str:
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


def write_json(payload: Mapping[str, Any], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json(payload))


def rows_to_csv(rows: Iterable[Mapping[str, Any]], fieldnames: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row[k]) for k in fieldnames})
    return buf.getvalue()


def write_csv(rows: Iterable[Mapping[str, Any]], fieldnames: list[str], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rows_to_csv(rows, fieldnames))


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_column_csv(text: str, value_name: str) -> tuple[tuple[str, ...], list[float]]:
    """Parse a two-column CSV (unit_id, value) with a header row."""
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if len(rows) < 2 or len(rows[0]) < 2:
        raise InputError(f"{value_name} CSV needs a header and unit_id,value rows")
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) < 2:
            raise InputError(f"{value_name} CSV line {lineno}: expected two fields")
        ids.append(row[0].strip())
        try:
            values.append(float(row[1]))
        except ValueError as exc:
            raise InputError(f"{value_name} CSV line {lineno}: {exc}") from exc
    return tuple(ids), values
