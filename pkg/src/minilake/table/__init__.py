"""Tables, their canonical codec, the plan DSL and its evaluator."""
from .codec import decode_table, encode_table
from .csvio import export_csv, format_table, import_csv
from .engine import eval_plan, typecheck
from .plan import Plan, parse_plan, print_plan
from .schema import Column, ColumnType, Schema, Table

__all__ = [
    "Column", "ColumnType", "Plan", "Schema", "Table",
    "decode_table", "encode_table", "eval_plan", "export_csv", "format_table",
    "import_csv", "parse_plan", "print_plan", "typecheck",
]
