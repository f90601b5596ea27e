"""Canonical CSV reading and writing shared by every stage.

Files start with one ``#schema:`` comment line, then the header. Output is
UTF-8 with LF line endings; floats are printed at 15 significant digits.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Sequence

import pandas as pd


class SchemaError(ValueError):
    pass


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".15g")
    return str(value)


def write_csv(path, schema: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"#schema: {schema}: {','.join(header)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    path.write_bytes(buf.getvalue().encode("utf-8"))
    return path


def _data_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines(keepends=True)
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        i += 1
    return lines[i:]


def read_rows(path, required: Sequence[str], optional: Sequence[str] = ()):
    """Yield ``(line_number, dict)`` for each data row after checking the header."""
    lines = _data_lines(path)
    reader = csv.DictReader(lines)
    fields = reader.fieldnames or []
    missing = [c for c in required if c not in fields]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}; found {fields}")
    unknown = [c for c in fields if c not in required and c not in optional]
    if unknown:
        raise SchemaError(f"{path}: unexpected columns {unknown}")
    for lineno, row in enumerate(reader, start=2):
        yield lineno, row


def read_frame(path, required: Sequence[str], dtype=None) -> pd.DataFrame:
    lines = _data_lines(path)
    if not lines:
        raise SchemaError(f"{path}: no header")
    frame = pd.read_csv(io.StringIO("".join(lines)), dtype=dtype, keep_default_na=True)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}; found {list(frame.columns)}")
    return frame
