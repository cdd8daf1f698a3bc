"""Plan DSL: AST nodes, parser and canonical printer.

A plan is a source table followed by a pipe of stages::

    from(taxi_trips)
      | join(taxi_zones, on = pickup_zone_id == zone_id)
      | filter(trip_miles > 0.1 and not (fare < 0))
      | agg(by = [borough], trips = count(*), avg_fare = avg(fare))
      | sort(borough asc)

``print_plan`` emits a single canonical line; ``parse_plan(print_plan(p)) == p``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from ..errors import PlanSyntaxError
from .schema import INT64_MAX, INT64_MIN

# ---------------------------------------------------------------- AST


@dataclass(frozen=True)
class Col:
    name: str


@dataclass(frozen=True)
class Lit:
    value: object
    type: str  # INT64 | FLOAT64 | STRING | BOOL | NULL


@dataclass(frozen=True)
class Unary:
    op: str  # "not" | "neg"
    operand: Expr


@dataclass(frozen=True)
class Binary:
    op: str
    left: Expr
    right: Expr


Expr = Union[Col, Lit, Unary, Binary]

ARITH_OPS = ("+", "-", "*", "/")
CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")
LOGIC_OPS = ("and", "or")
AGG_FNS = ("count", "sum", "min", "max", "avg")
KEYWORDS = frozenset({"and", "or", "not", "true", "false", "null"})


@dataclass(frozen=True)
class Filter:
    predicate: Expr


@dataclass(frozen=True)
class Project:
    names: tuple[str, ...]


@dataclass(frozen=True)
class Extend:
    name: str
    expr: Expr


@dataclass(frozen=True)
class Rename:
    old: str
    new: str


@dataclass(frozen=True)
class Join:
    right: str
    left_key: str
    right_key: str
    how: str = "inner"


@dataclass(frozen=True)
class AggItem:
    name: str
    fn: str
    column: str | None  # None means count(*)


@dataclass(frozen=True)
class Aggregate:
    keys: tuple[str, ...]
    items: tuple[AggItem, ...]


@dataclass(frozen=True)
class Sort:
    key: str
    descending: bool = False


@dataclass(frozen=True)
class Limit:
    n: int


Stage = Union[Filter, Project, Extend, Rename, Join, Aggregate, Sort, Limit]


@dataclass(frozen=True)
class Plan:
    source: str
    stages: tuple[Stage, ...] = ()

    def inputs(self) -> list[str]:
        """Every input name the plan reads, source first."""
        names = [self.source]
        for s in self.stages:
            if isinstance(s, Join) and s.right not in names:
                names.append(s.right)
        return names


# ---------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+|\#[^\n]*)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>'(?:[^']|'')*')
  | (?P<sym>->|==|!=|<=|>=|[|(),=<>+\-*/\[\]])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # number | ident | string | sym | eof
    text: str
    line: int
    col: int


def tokenize(text: str, source: str | None = None) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            if text[pos] == "'":
                raise PlanSyntaxError("unterminated string", line, pos - line_start + 1, source)
            raise PlanSyntaxError(f"unexpected character {text[pos]!r}",
                                  line, pos - line_start + 1, source)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1))
        chunk = m.group()
        nl = chunk.count("\n")
        if nl:
            line += nl
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ---------------------------------------------------------------- parser


class _Parser:
    def __init__(self, text: str, source: str | None):
        self.source = source
        self.tokens = tokenize(text, source)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        found = tok.text or "end of input"
        raise PlanSyntaxError(f"{msg} (found {found!r})", tok.line, tok.col, self.source)

    def advance(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("sym", "ident") and t.text == text

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.error(f"expected {text!r}")
        return self.advance()

    def ident(self, what: str = "identifier") -> str:
        if self.tok.kind != "ident":
            self.error(f"expected {what}")
        return self.advance().text

    def plan(self) -> Plan:
        self.expect("from")
        self.expect("(")
        source = self.ident("input name")
        self.expect(")")
        stages = []
        while self.at("|"):
            self.advance()
            stages.append(self.stage())
        if self.tok.kind != "eof":
            self.error("expected '|' or end of plan")
        return Plan(source, tuple(stages))

    def stage(self) -> Stage:
        name_tok = self.tok
        name = self.ident("stage name")
        handler = getattr(self, f"_stage_{name}", None)
        if handler is None:
            self.error(f"unknown stage {name!r}", name_tok)
        self.expect("(")
        stage = handler()
        self.expect(")")
        return stage

    def _stage_filter(self) -> Stage:
        return Filter(self.expr())

    def _stage_project(self) -> Stage:
        names = [self.ident("column name")]
        while self.at(","):
            self.advance()
            names.append(self.ident("column name"))
        return Project(tuple(names))

    def _stage_extend(self) -> Stage:
        name = self.ident("column name")
        self.expect("=")
        return Extend(name, self.expr())

    def _stage_rename(self) -> Stage:
        old = self.ident("column name")
        self.expect("->")
        return Rename(old, self.ident("column name"))

    def _stage_join(self) -> Stage:
        right = self.ident("input name")
        self.expect(",")
        self.expect("on")
        self.expect("=")
        lk = self.ident("left key")
        self.expect("==")
        rk = self.ident("right key")
        how = "inner"
        if self.at(","):
            self.advance()
            self.expect("how")
            self.expect("=")
            tok = self.tok
            how = self.ident("join kind")
            if how not in ("inner", "left"):
                self.error("join kind must be 'inner' or 'left'", tok)
        return Join(right, lk, rk, how)

    def _stage_agg(self) -> Stage:
        self.expect("by")
        self.expect("=")
        self.expect("[")
        keys = []
        if not self.at("]"):
            keys.append(self.ident("group key"))
            while self.at(","):
                self.advance()
                keys.append(self.ident("group key"))
        self.expect("]")
        items = []
        while self.at(","):
            self.advance()
            name = self.ident("output name")
            self.expect("=")
            tok = self.tok
            fn = self.ident("aggregate function")
            if fn not in AGG_FNS:
                self.error(f"unknown aggregate {fn!r}", tok)
            self.expect("(")
            if self.at("*"):
                self.advance()
                column = None
            else:
                column = self.ident("column name")
            self.expect(")")
            items.append(AggItem(name, fn, column))
        if not items:
            self.error("agg needs at least one aggregate item")
        return Aggregate(tuple(keys), tuple(items))

    def _stage_sort(self) -> Stage:
        key = self.ident("sort key")
        desc = False
        if self.at("asc") or self.at("desc"):
            desc = self.advance().text == "desc"
        return Sort(key, desc)

    def _stage_limit(self) -> Stage:
        if self.tok.kind != "number" or not self.tok.text.isdigit():
            self.error("expected non-negative integer")
        return Limit(int(self.advance().text))

    # expressions, lowest precedence first

    def expr(self) -> Expr:
        left = self.and_expr()
        while self.at("or"):
            self.advance()
            left = Binary("or", left, self.and_expr())
        return left

    def and_expr(self) -> Expr:
        left = self.not_expr()
        while self.at("and"):
            self.advance()
            left = Binary("and", left, self.not_expr())
        return left

    def not_expr(self) -> Expr:
        if self.at("not"):
            self.advance()
            return Unary("not", self.not_expr())
        return self.cmp_expr()

    def cmp_expr(self) -> Expr:
        left = self.add_expr()
        if self.tok.kind == "sym" and self.tok.text in CMP_OPS:
            op = self.advance().text
            left = Binary(op, left, self.add_expr())
            if self.tok.kind == "sym" and self.tok.text in CMP_OPS:
                self.error("comparisons do not chain; add parentheses")
        return left

    def add_expr(self) -> Expr:
        left = self.mul_expr()
        while self.tok.kind == "sym" and self.tok.text in ("+", "-"):
            op = self.advance().text
            left = Binary(op, left, self.mul_expr())
        return left

    def mul_expr(self) -> Expr:
        left = self.unary()
        while self.tok.kind == "sym" and self.tok.text in ("*", "/"):
            op = self.advance().text
            left = Binary(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.at("-"):
            self.advance()
            if self.tok.kind == "number":
                return self.number(negate=True)
            return Unary("neg", self.unary())
        return self.primary()

    def number(self, negate: bool = False) -> Lit:
        tok = self.advance()
        text = ("-" if negate else "") + tok.text
        if re.fullmatch(r"-?\d+", text):
            v = int(text)
            if not INT64_MIN <= v <= INT64_MAX:
                self.error("integer literal out of INT64 range", tok)
            return Lit(v, "INT64")
        return Lit(float(text), "FLOAT64")

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "number":
            return self.number()
        if t.kind == "string":
            self.advance()
            return Lit(t.text[1:-1].replace("''", "'"), "STRING")
        if t.kind == "ident":
            self.advance()
            if t.text in ("true", "false"):
                return Lit(t.text == "true", "BOOL")
            if t.text == "null":
                return Lit(None, "NULL")
            if t.text in KEYWORDS:
                self.error("unexpected keyword", t)
            return Col(t.text)
        if self.at("("):
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        self.error("expected expression")


def parse_plan(text: str, source: str | None = None) -> Plan:
    """Parse plan text; errors carry line and column (and ``source`` if given)."""
    return _Parser(text, source).plan()


def parse_expr(text: str) -> Expr:
    p = _Parser(text, None)
    e = p.expr()
    if p.tok.kind != "eof":
        p.error("unexpected trailing input")
    return e


# ---------------------------------------------------------------- printer


def print_expr(e: Expr, top: bool = False) -> str:
    if isinstance(e, Col):
        return e.name
    if isinstance(e, Lit):
        if e.type == "NULL":
            return "null"
        if e.type == "BOOL":
            return "true" if e.value else "false"
        if e.type == "STRING":
            return "'" + str(e.value).replace("'", "''") + "'"
        if e.type == "FLOAT64":
            return repr(float(e.value))
        return str(e.value)
    if isinstance(e, Unary):
        inner = print_expr(e.operand)
        if e.op == "not":
            return f"(not {inner})"
        # "-5" would re-parse as a literal, so guard literal operands
        return f"-({inner})" if inner[:1].isdigit() else f"-{inner}"
    s = f"{print_expr(e.left)} {e.op} {print_expr(e.right)}"
    return s if top else f"({s})"


def _print_stage(s: Stage) -> str:
    if isinstance(s, Filter):
        return f"filter({print_expr(s.predicate, top=True)})"
    if isinstance(s, Project):
        return f"project({', '.join(s.names)})"
    if isinstance(s, Extend):
        return f"extend({s.name} = {print_expr(s.expr, top=True)})"
    if isinstance(s, Rename):
        return f"rename({s.old} -> {s.new})"
    if isinstance(s, Join):
        how = ", how = left" if s.how == "left" else ""
        return f"join({s.right}, on = {s.left_key} == {s.right_key}{how})"
    if isinstance(s, Aggregate):
        items = "".join(f", {it.name} = {it.fn}({it.column or '*'})" for it in s.items)
        return f"agg(by = [{', '.join(s.keys)}]{items})"
    if isinstance(s, Sort):
        return f"sort({s.key} {'desc' if s.descending else 'asc'})"
    if isinstance(s, Limit):
        return f"limit({s.n})"
    raise TypeError(f"not a stage: {s!r}")


def print_plan(plan: Plan) -> str:
    return " | ".join([f"from({plan.source})"] + [_print_stage(s) for s in plan.stages])
