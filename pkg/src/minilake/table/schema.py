"""Column types, schemas and the in-memory table representation."""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Sequence

from ..errors import SchemaMismatch

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


class ColumnType(str, enum.Enum):
    INT64 = "INT64"
    FLOAT64 = "FLOAT64"
    STRING = "STRING"
    BOOL = "BOOL"

    def __str__(self) -> str:
        return self.value


NUMERIC = (ColumnType.INT64, ColumnType.FLOAT64)


def wrap_int64(v: int) -> int:
    """Two's-complement wraparound into the signed 64-bit range."""
    v &= 0xFFFFFFFFFFFFFFFF
    return v - (1 << 64) if v > INT64_MAX else v


@dataclass(frozen=True)
class Column:
    name: str
    type: ColumnType
    nullable: bool = True

    def __post_init__(self):
        if not isinstance(self.name, str) or not _NAME_RE.match(self.name):
            raise SchemaMismatch(f"invalid column name {self.name!r}")
        object.__setattr__(self, "type", ColumnType(self.type))

    def to_json(self) -> dict:
        return {"name": self.name, "type": self.type.value, "nullable": self.nullable}


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        seen = set()
        for c in cols:
            if c.name in seen:
                raise SchemaMismatch(f"duplicate column name {c.name!r}")
            seen.add(c.name)

    @classmethod
    def of(cls, *specs: tuple) -> Schema:
        """``Schema.of(("a", "INT64"), ("b", "STRING", False))``"""
        return cls(tuple(Column(*s) for s in specs))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def __len__(self) -> int:
        return len(self.columns)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(name)

    def column(self, name: str) -> Column:
        return self.columns[self.index(name)]

    def to_json(self) -> dict:
        return {"columns": [c.to_json() for c in self.columns]}

    @classmethod
    def from_json(cls, obj: Any) -> Schema:
        try:
            cols = obj["columns"] if isinstance(obj, dict) else obj
            return cls(tuple(
                Column(c["name"], ColumnType(c["type"]), bool(c.get("nullable", True)))
                for c in cols
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"malformed schema: {exc}") from exc

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False).encode("utf-8")


def check_value(col: Column, v: Any) -> Any:
    """Validate (and lightly coerce) one cell against its column."""
    if v is None:
        if not col.nullable:
            raise SchemaMismatch(f"null in non-nullable column {col.name!r}")
        return None
    t = col.type
    if t is ColumnType.INT64:
        if isinstance(v, bool) or not isinstance(v, int):
            raise SchemaMismatch(f"column {col.name!r} expects INT64, got {v!r}")
        if not INT64_MIN <= v <= INT64_MAX:
            raise SchemaMismatch(f"INT64 overflow in column {col.name!r}: {v}")
        return v
    if t is ColumnType.FLOAT64:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaMismatch(f"column {col.name!r} expects FLOAT64, got {v!r}")
        return float(v)
    if t is ColumnType.STRING:
        if not isinstance(v, str):
            raise SchemaMismatch(f"column {col.name!r} expects STRING, got {v!r}")
        return v
    if not isinstance(v, bool):
        raise SchemaMismatch(f"column {col.name!r} expects BOOL, got {v!r}")
    return v


class Table:
    """Column-major table; nulls are ``None``.

    Equality is by canonical encoding, so NaN cells compare equal to NaN.
    """

    __slots__ = ("schema", "columns")

    def __init__(self, schema: Schema, columns: Sequence[list], *, validate: bool = True):
        columns = [list(c) for c in columns]
        if len(columns) != len(schema.columns):
            raise SchemaMismatch(
                f"expected {len(schema.columns)} columns, got {len(columns)}")
        lengths = {len(c) for c in columns}
        if len(lengths) > 1:
            raise SchemaMismatch(f"ragged columns: lengths {sorted(lengths)}")
        if validate:
            columns = [[check_value(col, v) for v in vals]
                       for col, vals in zip(schema.columns, columns)]
        self.schema = schema
        self.columns = columns

    @classmethod
    def from_rows(cls, schema: Schema, rows: Iterable[Sequence], *, validate: bool = True) -> Table:
        rows = list(rows)
        n = len(schema.columns)
        for r in rows:
            if len(r) != n:
                raise SchemaMismatch(f"row has {len(r)} cells, schema has {n}")
        cols = [[r[i] for r in rows] for i in range(n)]
        t = cls(schema, cols, validate=validate)
        if not n and rows:
            raise SchemaMismatch("zero-column tables cannot hold rows")
        return t

    @classmethod
    def empty(cls, schema: Schema) -> Table:
        return cls(schema, [[] for _ in schema.columns])

    @property
    def row_count(self) -> int:
        return len(self.columns[0]) if self.columns else 0

    def __len__(self) -> int:
        return self.row_count

    def rows(self) -> Iterator[tuple]:
        return zip(*self.columns) if self.columns else iter(())

    def column(self, name: str) -> list:
        return self.columns[self.schema.index(name)]

    def to_records(self) -> list[dict]:
        names = self.schema.names
        return [dict(zip(names, r)) for r in self.rows()]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Table):
            return NotImplemented
        from .codec import encode_table
        return self.schema == other.schema and encode_table(self) == encode_table(other)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Table({self.schema.names}, rows={self.row_count})"


def json_safe(v: Any) -> Any:
    """Cell value as strict JSON (non-finite floats become strings)."""
    if isinstance(v, float) and not math.isfinite(v):
        return "NaN" if math.isnan(v) else ("Infinity" if v > 0 else "-Infinity")
    return v
