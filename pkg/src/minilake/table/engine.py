"""Plan typechecking and evaluation.

Stages run in written order with no rewriting. Null semantics follow the
usual relational conventions: comparisons with null yield null, ``and``/``or``
are Kleene three-valued, filters keep rows whose predicate is strictly true,
division by zero yields null. INT64 arithmetic wraps; INT64 division
truncates toward zero.

Ordering used by sort/min/max: numbers ascending with NaN above +inf,
strings by code point, false < true. Sorts are stable and put nulls last
in both directions.
"""
from __future__ import annotations

import math
from typing import Any, Callable, Mapping

from ..errors import TypeMismatch, UnknownColumn, UnknownInput
from .plan import (AggItem, Aggregate, Binary, Col, Expr, Extend, Filter, Join, Limit, Lit,
                   Plan, Project, Rename, Sort, Stage, Unary)
from .schema import NUMERIC, Column, ColumnType, Schema, Table, wrap_int64

NULL = "NULL"  # type of a bare null literal


def _is_numeric(t) -> bool:
    return t in NUMERIC


def _comparable(a, b) -> bool:
    if a == NULL or b == NULL:
        return True
    return (_is_numeric(a) and _is_numeric(b)) or a == b


# ---------------------------------------------------------------- typecheck


def expr_type(e: Expr, schema: Schema) -> tuple[Any, bool]:
    """Return ``(type, nullable)`` of an expression over ``schema``."""
    if isinstance(e, Col):
        if e.name not in schema:
            raise UnknownColumn(f"unknown column {e.name!r} (have {', '.join(schema.names)})")
        c = schema.column(e.name)
        return c.type, c.nullable
    if isinstance(e, Lit):
        if e.type == NULL:
            return NULL, True
        return ColumnType(e.type), False
    if isinstance(e, Unary):
        t, n = expr_type(e.operand, schema)
        if e.op == "not":
            if t not in (ColumnType.BOOL, NULL):
                raise TypeMismatch(f"'not' expects BOOL, got {t}")
            return ColumnType.BOOL, True
        if not (_is_numeric(t) or t == NULL):
            raise TypeMismatch(f"unary '-' expects a number, got {t}")
        return t, n
    lt, ln = expr_type(e.left, schema)
    rt, rn = expr_type(e.right, schema)
    op = e.op
    if op in ("and", "or"):
        for t in (lt, rt):
            if t not in (ColumnType.BOOL, NULL):
                raise TypeMismatch(f"'{op}' expects BOOL operands, got {t}")
        return ColumnType.BOOL, True
    if op in ("==", "!=", "<", "<=", ">", ">="):
        if not _comparable(lt, rt):
            raise TypeMismatch(f"cannot compare {lt} with {rt}")
        return ColumnType.BOOL, True
    for t in (lt, rt):
        if not (_is_numeric(t) or t == NULL):
            raise TypeMismatch(f"'{op}' expects numeric operands, got {t}")
    if lt == NULL and rt == NULL:
        return NULL, True
    out = ColumnType.FLOAT64 if ColumnType.FLOAT64 in (lt, rt) else ColumnType.INT64
    return out, ln or rn or op == "/"


def _join_schema(left: Schema, right: Schema, how: str) -> Schema:
    cols = list(left.columns)
    taken = set(left.names)
    for c in right.columns:
        name = c.name
        while name in taken:
            name += "_r"
        taken.add(name)
        cols.append(Column(name, c.type, c.nullable or how == "left"))
    return Schema(tuple(cols))


def _agg_column(item: AggItem, schema: Schema) -> Column:
    if item.column is None:
        if item.fn != "count":
            raise TypeMismatch(f"{item.fn}(*) is not allowed; only count(*)")
        return Column(item.name, ColumnType.INT64, False)
    if item.column not in schema:
        raise UnknownColumn(f"unknown column {item.column!r} in {item.fn}()")
    src = schema.column(item.column)
    if item.fn == "count":
        return Column(item.name, ColumnType.INT64, False)
    if item.fn in ("sum", "avg") and not _is_numeric(src.type):
        raise TypeMismatch(f"{item.fn}() expects a numeric column, got {src.type}")
    if item.fn == "avg":
        return Column(item.name, ColumnType.FLOAT64, True)
    return Column(item.name, src.type, True)


def stage_schema(stage: Stage, schema: Schema, inputs: Mapping[str, Schema]) -> Schema:
    if isinstance(stage, Filter):
        t, _ = expr_type(stage.predicate, schema)
        if t not in (ColumnType.BOOL, NULL):
            raise TypeMismatch(f"filter predicate must be BOOL, got {t}")
        return schema
    if isinstance(stage, Project):
        if len(set(stage.names)) != len(stage.names):
            raise TypeMismatch("project lists a column twice")
        for n in stage.names:
            if n not in schema:
                raise UnknownColumn(f"unknown column {n!r} in project")
        return Schema(tuple(schema.column(n) for n in stage.names))
    if isinstance(stage, Extend):
        t, nullable = expr_type(stage.expr, schema)
        if t == NULL:
            raise TypeMismatch(f"cannot infer a type for {stage.name!r} from a bare null")
        new = Column(stage.name, t, nullable)
        if stage.name in schema:
            i = schema.index(stage.name)
            return Schema(schema.columns[:i] + (new,) + schema.columns[i + 1:])
        return Schema(schema.columns + (new,))
    if isinstance(stage, Rename):
        if stage.old not in schema:
            raise UnknownColumn(f"unknown column {stage.old!r} in rename")
        if stage.new != stage.old and stage.new in schema:
            raise TypeMismatch(f"rename target {stage.new!r} already exists")
        return Schema(tuple(Column(stage.new, c.type, c.nullable) if c.name == stage.old else c
                            for c in schema.columns))
    if isinstance(stage, Join):
        if stage.right not in inputs:
            raise UnknownInput(f"unknown input {stage.right!r}")
        right = inputs[stage.right]
        if stage.left_key not in schema:
            raise UnknownColumn(f"unknown left join key {stage.left_key!r}")
        if stage.right_key not in right:
            raise UnknownColumn(f"unknown right join key {stage.right_key!r}")
        lt, rt = schema.column(stage.left_key).type, right.column(stage.right_key).type
        if not _comparable(lt, rt):
            raise TypeMismatch(f"join keys have incompatible types {lt} and {rt}")
        return _join_schema(schema, right, stage.how)
    if isinstance(stage, Aggregate):
        cols = []
        for k in stage.keys:
            if k not in schema:
                raise UnknownColumn(f"unknown group key {k!r}")
            cols.append(schema.column(k))
        cols.extend(_agg_column(it, schema) for it in stage.items)
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise TypeMismatch(f"duplicate output column in agg: {names}")
        return Schema(tuple(cols))
    if isinstance(stage, Sort):
        if stage.key not in schema:
            raise UnknownColumn(f"unknown sort key {stage.key!r}")
        return schema
    if isinstance(stage, Limit):
        return schema
    raise TypeError(f"unknown stage {stage!r}")


def typecheck(plan: Plan, inputs: Mapping[str, Schema]) -> Schema:
    if plan.source not in inputs:
        raise UnknownInput(f"unknown input {plan.source!r}")
    schema = inputs[plan.source]
    for stage in plan.stages:
        schema = stage_schema(stage, schema, inputs)
    return schema


# ---------------------------------------------------------------- evaluation

Row = tuple
Fn = Callable[[Row], Any]


def _kleene_and(a, b):
    if a is False or b is False:
        return False
    if a is None or b is None:
        return None
    return True


def _kleene_or(a, b):
    if a is True or b is True:
        return True
    if a is None or b is None:
        return None
    return False


def _int_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return wrap_int64(q if (a < 0) == (b < 0) else -q)


_CMP = {
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def compile_expr(e: Expr, schema: Schema) -> Fn:
    """Compile an expression to a closure over row tuples."""
    if isinstance(e, Col):
        i = schema.index(e.name)
        return lambda row: row[i]
    if isinstance(e, Lit):
        v = e.value
        return lambda row: v
    if isinstance(e, Unary):
        f = compile_expr(e.operand, schema)
        if e.op == "not":
            return lambda row: None if (v := f(row)) is None else not v
        t, _ = expr_type(e.operand, schema)
        if t == ColumnType.INT64:
            return lambda row: None if (v := f(row)) is None else wrap_int64(-v)
        return lambda row: None if (v := f(row)) is None else -v
    lf, rf = compile_expr(e.left, schema), compile_expr(e.right, schema)
    op = e.op
    if op == "and":
        return lambda row: _kleene_and(lf(row), rf(row))
    if op == "or":
        return lambda row: _kleene_or(lf(row), rf(row))
    if op in _CMP:
        cmp = _CMP[op]

        def compare(row):
            a, b = lf(row), rf(row)
            return None if a is None or b is None else cmp(a, b)
        return compare
    out, _ = expr_type(e, schema)
    is_int = out == ColumnType.INT64

    def arith(row):
        a, b = lf(row), rf(row)
        if a is None or b is None:
            return None
        if op == "/":
            if b == 0:
                return None
            return _int_div(a, b) if is_int else float(a) / float(b)
        if is_int:
            if op == "+":
                return wrap_int64(a + b)
            if op == "-":
                return wrap_int64(a - b)
            return wrap_int64(a * b)
        a, b = float(a), float(b)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        return a * b
    return arith


def order_key(v):
    """Sort key for non-null values under the engine's total order."""
    if isinstance(v, float) and math.isnan(v):
        return (1, 0.0)
    return (0, v)


def _group_key(v):
    if isinstance(v, float) and math.isnan(v):
        return ("nan",)
    return v


def _hash_join(rows, schema, right_table: Table, stage: Join) -> list[Row]:
    li = schema.index(stage.left_key)
    ri = right_table.schema.index(stage.right_key)
    index: dict = {}
    for r in right_table.rows():
        k = r[ri]
        if k is None or (isinstance(k, float) and math.isnan(k)):
            continue
        index.setdefault(k, []).append(r)
    pad = (None,) * len(right_table.schema)
    out = []
    for row in rows:
        k = row[li]
        matches = ()
        if k is not None and not (isinstance(k, float) and math.isnan(k)):
            matches = index.get(k, ())
        if matches:
            out.extend(row + r for r in matches)
        elif stage.how == "left":
            out.append(row + pad)
    return out


def _aggregate(values: list, item: AggItem, col_type) -> Any:
    if item.column is None:
        return len(values)
    present = [v for v in values if v is not None]
    if item.fn == "count":
        return len(present)
    if not present:
        return None
    if item.fn == "min":
        return min(present, key=order_key)
    if item.fn == "max":
        return max(present, key=order_key)
    if col_type == ColumnType.INT64:
        total = sum(present)
        return wrap_int64(total) if item.fn == "sum" else float(total) / len(present)
    total = 0.0
    for v in present:
        total += v
    return total if item.fn == "sum" else total / len(present)


def _group(rows, schema: Schema, stage: Aggregate) -> list[Row]:
    key_idx = [schema.index(k) for k in stage.keys]
    groups: dict = {}
    for row in rows:
        k = tuple(_group_key(row[i]) for i in key_idx)
        groups.setdefault(k, []).append(row)
    if not stage.keys and not groups:
        groups[()] = []
    out = []
    for members in groups.values():
        keys = tuple(members[0][i] for i in key_idx)
        vals = []
        for item in stage.items:
            if item.column is None:
                vals.append(len(members))
            else:
                ci = schema.index(item.column)
                vals.append(_aggregate([m[ci] for m in members], item, schema.columns[ci].type))
        out.append(keys + tuple(vals))
    return out


def _apply(stage: Stage, rows: list[Row], schema: Schema, out_schema: Schema,
           inputs: Mapping[str, Table]) -> list[Row]:
    if isinstance(stage, Filter):
        pred = compile_expr(stage.predicate, schema)
        return [r for r in rows if pred(r) is True]
    if isinstance(stage, Project):
        idx = [schema.index(n) for n in stage.names]
        return [tuple(r[i] for i in idx) for r in rows]
    if isinstance(stage, Extend):
        f = compile_expr(stage.expr, schema)
        as_float = out_schema.column(stage.name).type == ColumnType.FLOAT64
        if stage.name in schema:
            i = schema.index(stage.name)
        else:
            i = len(schema)

        def cell(r):
            v = f(r)
            return float(v) if as_float and v is not None else v
        return [r[:i] + (cell(r),) + r[i + 1:] for r in rows]
    if isinstance(stage, Rename):
        return rows
    if isinstance(stage, Join):
        return _hash_join(rows, schema, inputs[stage.right], stage)
    if isinstance(stage, Aggregate):
        return _group(rows, schema, stage)
    if isinstance(stage, Sort):
        i = schema.index(stage.key)
        present = [r for r in rows if r[i] is not None]
        nulls = [r for r in rows if r[i] is None]
        present.sort(key=lambda r: order_key(r[i]), reverse=stage.descending)
        return present + nulls
    if isinstance(stage, Limit):
        return rows[:stage.n]
    raise TypeError(f"unknown stage {stage!r}")


def eval_plan(plan: Plan, inputs: Mapping[str, Table]) -> Table:
    """Evaluate ``plan`` over named input tables.

    Raises the typechecker's errors for ill-typed plans before touching data.
    """
    schemas = {name: t.schema for name, t in inputs.items()}
    if plan.source not in inputs:
        raise UnknownInput(f"unknown input {plan.source!r}")
    schema = schemas[plan.source]
    rows = list(inputs[plan.source].rows())
    for stage in plan.stages:
        out_schema = stage_schema(stage, schema, schemas)
        rows = _apply(stage, rows, schema, out_schema, inputs)
        schema = out_schema
    return Table.from_rows(schema, rows, validate=False)
