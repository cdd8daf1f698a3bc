"""Canonical binary table format.

Layout::

    b"MLT1"
    u32 schema_len, schema JSON (sorted keys, no whitespace, UTF-8)
    u64 row_count
    per column, schema order:
        null bitmap, ceil(rows/8) bytes, LSB-first, 1 = null
        row slots (null slots zeroed):
            INT64   8 bytes LE two's complement
            FLOAT64 8 bytes LE IEEE-754, every NaN as 0x7FF8000000000000
            BOOL    1 byte
            STRING  u32 length + UTF-8

All integers are little-endian. The same logical table always yields the
same bytes, which is what makes content addressing work.
"""
from __future__ import annotations

import json
import math
import struct

from ..errors import CorruptData, SchemaMismatch
from .schema import ColumnType, Schema, Table

MAGIC = b"MLT1"
CANONICAL_NAN = struct.pack("<Q", 0x7FF8000000000000)
_ZERO8 = b"\x00" * 8


def _bitmap(values: list) -> bytes:
    out = bytearray((len(values) + 7) // 8)
    for i, v in enumerate(values):
        if v is None:
            out[i >> 3] |= 1 << (i & 7)
    return bytes(out)


def encode_table(table: Table) -> bytes:
    schema_bytes = table.schema.canonical_bytes()
    n = table.row_count
    parts = [MAGIC, struct.pack("<I", len(schema_bytes)), schema_bytes, struct.pack("<Q", n)]
    for col, values in zip(table.schema.columns, table.columns):
        parts.append(_bitmap(values))
        t = col.type
        if t is ColumnType.INT64:
            parts.append(struct.pack(f"<{n}q", *(0 if v is None else v for v in values)))
        elif t is ColumnType.FLOAT64:
            for v in values:
                if v is None:
                    parts.append(_ZERO8)
                elif math.isnan(v):
                    parts.append(CANONICAL_NAN)
                else:
                    parts.append(struct.pack("<d", v))
        elif t is ColumnType.BOOL:
            parts.append(bytes(1 if v else 0 for v in values))
        else:
            for v in values:
                raw = b"" if v is None else v.encode("utf-8")
                parts.append(struct.pack("<I", len(raw)))
                parts.append(raw)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptData(f"length mismatch: need {n} bytes at offset {self.pos}, "
                              f"have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def decode_table(data: bytes) -> Table:
    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise CorruptData("bad magic")
    try:
        schema = Schema.from_json(json.loads(bytes(r.take(r.u32())).decode("utf-8")))
    except UnicodeDecodeError as exc:
        raise CorruptData(f"invalid UTF-8 in schema: {exc}") from exc
    except (json.JSONDecodeError, SchemaMismatch) as exc:
        raise CorruptData(f"invalid schema: {exc}") from exc
    n = r.u64()
    if n > len(data):
        raise CorruptData(f"row count {n} exceeds payload size")
    columns = []
    for col in schema.columns:
        bitmap = r.take((n + 7) // 8)
        nulls = [bool(bitmap[i >> 3] >> (i & 7) & 1) for i in range(n)]
        if not col.nullable and any(nulls):
            raise CorruptData(f"null in non-nullable column {col.name!r}")
        t = col.type
        if t is ColumnType.INT64:
            vals = list(struct.unpack(f"<{n}q", r.take(8 * n)))
        elif t is ColumnType.FLOAT64:
            vals = list(struct.unpack(f"<{n}d", r.take(8 * n)))
        elif t is ColumnType.BOOL:
            raw = r.take(n)
            if any(b > 1 for b in raw):
                raise CorruptData(f"invalid BOOL byte in column {col.name!r}")
            vals = [b == 1 for b in raw]
        else:
            vals = []
            for _ in range(n):
                try:
                    vals.append(bytes(r.take(r.u32())).decode("utf-8"))
                except UnicodeDecodeError as exc:
                    raise CorruptData(f"invalid UTF-8 in column {col.name!r}") from exc
        columns.append([None if isnull else v for v, isnull in zip(vals, nulls)])
    if r.pos != len(data):
        raise CorruptData(f"{len(data) - r.pos} trailing bytes")
    return Table(schema, columns, validate=False)
