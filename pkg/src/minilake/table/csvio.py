"""CSV ingestion (RFC-4180 subset, no embedded newlines) and text rendering."""
from __future__ import annotations

import csv
import io

from ..errors import ParseError, SchemaMismatch
from .schema import INT64_MAX, INT64_MIN, ColumnType, Schema, Table, json_safe

_TRUE = {"true", "t", "1"}
_FALSE = {"false", "f", "0"}


def _parse_cell(text: str, ctype: ColumnType, row: int, col: str):
    if ctype is ColumnType.STRING:
        return text
    s = text.strip()
    try:
        if ctype is ColumnType.INT64:
            v = int(s)
            if not INT64_MIN <= v <= INT64_MAX:
                raise ValueError("out of INT64 range")
            return v
        if ctype is ColumnType.FLOAT64:
            return float(s)
    except ValueError as exc:
        raise ParseError(f"cannot parse {text!r} as {ctype}: {exc}", row, col) from None
    low = s.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ParseError(f"cannot parse {text!r} as BOOL", row, col)


def import_csv(data: bytes, schema: Schema) -> Table:
    """Parse CSV bytes whose header matches ``schema`` names in order.

    Empty fields are nulls. Row numbers in errors are 1-based and count the
    header as row 1.
    """
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise ParseError(f"invalid UTF-8: {exc}", 0, 0) from exc
    lines = text.splitlines()
    reader = csv.reader(lines, strict=True)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaMismatch("empty CSV: no header row") from None
    header = [h.strip() for h in header]
    if header != schema.names:
        raise SchemaMismatch(f"CSV header {header} does not match schema {schema.names}")
    cols: list[list] = [[] for _ in schema.columns]
    try:
        for rowno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(schema.columns):
                raise ParseError(f"expected {len(schema.columns)} fields, got {len(record)}",
                                 rowno, len(record))
            for i, (c, cell) in enumerate(zip(schema.columns, record)):
                if cell == "":
                    if not c.nullable:
                        raise ParseError("empty value in non-nullable column", rowno, c.name)
                    cols[i].append(None)
                else:
                    cols[i].append(_parse_cell(cell, c.type, rowno, c.name))
    except csv.Error as exc:
        raise ParseError(str(exc), reader.line_num, 0) from exc
    return Table(schema, cols)


def export_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.schema.names)
    for r in table.rows():
        w.writerow("" if v is None else ("true" if v is True else "false" if v is False else v)
                   for v in r)
    return buf.getvalue()


def format_table(table: Table, max_rows: int | None = None) -> str:
    """Fixed-width text rendering for terminals."""
    names = table.schema.names
    rows = list(table.rows())
    shown = rows if max_rows is None else rows[:max_rows]

    def cell(v):
        if v is None:
            return "null"
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(json_safe(v))

    body = [[cell(v) for v in r] for r in shown]
    widths = [max([len(n)] + [len(r[i]) for r in body]) for i, n in enumerate(names)]
    lines = [" | ".join(n.ljust(w) for n, w in zip(names, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    footer = f"({len(rows)} row{'s' if len(rows) != 1 else ''})"
    if len(shown) < len(rows):
        footer = f"({len(shown)} of {len(rows)} rows)"
    return "\n".join(lines + [footer])
