"""API keys, grants, verifiers and the verify-then-merge gate.

A verifier is a declarative list of checks bound to a target branch. A merge
into that branch goes authorize -> verify -> compare-and-swap; any failure
leaves every branch where it was.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import os
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import AccessDenied, AuthFailed, LakeError, MergeContention, UnknownColumn, VerifierError
from .store import MERGE_ATTEMPTS, Catalog
from .table import Schema, eval_plan, parse_plan, typecheck

READ, WRITE, MERGE, ADMIN = "READ", "WRITE", "MERGE", "ADMIN"


@dataclass(frozen=True)
class Grant:
    kind: str
    target: str | None = None  # branch glob for WRITE, branch name for MERGE

    @classmethod
    def parse(cls, text: str) -> Grant:
        kind, _, target = text.strip().partition(":")
        kind = kind.upper()
        if kind in (READ, ADMIN) and not target:
            return cls(kind)
        if kind in (WRITE, MERGE) and target:
            if "*" in target[:-1] or (kind == MERGE and "*" in target):
                raise ValueError(f"only a trailing '*' is allowed in write globs: {text!r}")
            return cls(kind, target)
        raise ValueError(f"invalid grant {text!r}; use read, admin, write:<glob>, merge:<branch>")

    def __str__(self) -> str:
        return self.kind.lower() + (f":{self.target}" if self.target else "")


def parse_grants(text: str | Iterable[str]) -> tuple[Grant, ...]:
    items = text.split(",") if isinstance(text, str) else text
    return tuple(Grant.parse(t) for t in items if t.strip())


@dataclass(frozen=True)
class Principal:
    key_id: str
    grants: tuple[Grant, ...]


LOCAL_ADMIN = Principal("local", (Grant(ADMIN),))


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allowed


def _glob_match(glob: str, branch: str) -> bool:
    if glob.endswith("*"):
        return branch.startswith(glob[:-1])
    return glob == branch


def authorize(principal: Principal, kind: str, branch: str | None = None) -> Decision:
    """ALLOW or DENY(reason) for ``kind`` on ``branch``.

    ``WRITE`` with no branch means a write to a workspace-hosted project;
    any WRITE grant covers it.
    """
    grants = principal.grants
    if any(g.kind == ADMIN for g in grants):
        return Decision(True)
    if kind == READ and any(g.kind == READ for g in grants):
        return Decision(True)
    if kind == WRITE:
        if branch is None and any(g.kind == WRITE for g in grants):
            return Decision(True)
        if branch is not None and any(g.kind == WRITE and _glob_match(g.target, branch)
                                      for g in grants):
            return Decision(True)
    if kind == MERGE and any(g.kind == MERGE and g.target == branch for g in grants):
        return Decision(True)
    what = kind.lower() + (f" {branch}" if branch else "")
    return Decision(False, f"key {principal.key_id!r} may not {what}")


def hash_secret(secret: str) -> str:
    return hashlib.sha256(secret.encode("utf-8")).hexdigest()


class KeyStore:
    """``keys.json``: ``{"keys": [{"key_id", "secret_hash", "grants": [...]}]}``.

    The file is re-read on every lookup, so revocations apply immediately.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._mem: list[dict] = []
        self._lock = threading.Lock()

    def _load(self) -> list[dict]:
        if self.path is None:
            return list(self._mem)
        try:
            return json.loads(self.path.read_text("utf-8")).get("keys", [])
        except FileNotFoundError:
            return []

    def _save(self, keys: list[dict]) -> None:
        if self.path is None:
            self._mem = keys
            return
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"keys": keys}, indent=2) + "\n", "utf-8")
        os.replace(tmp, self.path)

    def create(self, grants: Iterable[Grant], key_id: str | None = None) -> tuple[str, str]:
        """Store a new key; returns ``(key_id, secret)``. The secret is not kept."""
        secret = "mlk_" + secrets.token_urlsafe(24)
        with self._lock:
            keys = self._load()
            key_id = key_id or "key_" + secrets.token_hex(4)
            if any(k["key_id"] == key_id for k in keys):
                raise LakeError(f"key id {key_id!r} already exists")
            keys.append({"key_id": key_id, "secret_hash": hash_secret(secret),
                         "grants": [str(g) for g in grants]})
            self._save(keys)
        return key_id, secret

    def revoke(self, key_id: str) -> None:
        with self._lock:
            self._save([k for k in self._load() if k["key_id"] != key_id])

    def list(self) -> list[dict]:
        return [{"key_id": k["key_id"], "grants": k["grants"]} for k in self._load()]

    def authenticate(self, secret: str | None) -> Principal:
        if not secret:
            raise AuthFailed("missing API key")
        digest = hash_secret(secret)
        found = None
        for k in self._load():
            if hmac.compare_digest(k["secret_hash"], digest):
                found = k
        if found is None:
            raise AuthFailed("invalid API key")
        return Principal(found["key_id"], parse_grants(found["grants"]))


# ---------------------------------------------------------------- verifiers

CHECK_TYPES = ("TABLE_EXISTS", "MIN_ROWS", "SCHEMA_EQUALS", "NO_NULLS", "AGG_BOUND")


@dataclass(frozen=True)
class Check:
    type: str
    table: str
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"type": self.type, "table": self.table, "params": self.params}


@dataclass(frozen=True)
class VerifierSpec:
    target_branch: str
    checks: tuple[Check, ...]

    @classmethod
    def from_json(cls, obj: dict) -> VerifierSpec:
        try:
            checks = tuple(Check(c["type"], c["table"], dict(c.get("params", {})))
                           for c in obj["checks"])
            spec = cls(obj["target_branch"], checks)
        except (KeyError, TypeError) as exc:
            raise VerifierError(f"malformed verifier: missing {exc}") from exc
        spec.validate()
        return spec

    def to_json(self) -> dict:
        return {"target_branch": self.target_branch, "checks": [c.to_json() for c in self.checks]}

    def validate(self) -> None:
        for c in self.checks:
            if c.type not in CHECK_TYPES:
                raise VerifierError(f"unknown check type {c.type!r}")
            p = c.params
            try:
                if c.type == "MIN_ROWS":
                    int(p["min"])
                elif c.type == "SCHEMA_EQUALS":
                    Schema.from_json(p["schema"])
                elif c.type == "NO_NULLS":
                    if "column" not in p and "columns" not in p:
                        raise KeyError("column")
                elif c.type == "AGG_BOUND":
                    plan = parse_plan(p["plan"])
                    float(p["min"]), float(p["max"])
                    if "schemas" in p:
                        typecheck(plan, {n: Schema.from_json(s) for n, s in p["schemas"].items()})
            except KeyError as exc:
                raise VerifierError(f"{c.type} check on {c.table!r} needs param {exc}") from exc
            except (LakeError, ValueError, TypeError) as exc:
                raise VerifierError(f"{c.type} check on {c.table!r}: {exc}") from exc


@dataclass(frozen=True)
class CheckResult:
    type: str
    table: str
    passed: bool
    message: str

    def to_json(self) -> dict:
        return {"type": self.type, "table": self.table, "passed": self.passed,
                "message": self.message}


@dataclass(frozen=True)
class VerifierReport:
    passed: bool
    results: tuple[CheckResult, ...]
    ref: str = ""

    def to_json(self) -> dict:
        return {"passed": self.passed, "ref": self.ref,
                "results": [r.to_json() for r in self.results]}


def _run_check(catalog: Catalog, tables: dict, check: Check) -> tuple[bool, str]:
    t, p = check.table, check.params
    if t not in tables:
        return False, f"table {t} not found"
    snap = tables[t]
    if check.type == "TABLE_EXISTS":
        return True, f"table {t} exists"
    if check.type == "MIN_ROWS":
        need = int(p["min"])
        return snap.row_count >= need, f"table {t} has {snap.row_count} rows (min {need})"
    if check.type == "SCHEMA_EQUALS":
        actual = catalog.read_schema(snap)
        want = Schema.from_json(p["schema"])
        if actual == want:
            return True, f"table {t} schema matches"
        return False, f"table {t} schema {actual.to_json()} != expected {want.to_json()}"
    if check.type == "NO_NULLS":
        table = catalog.read_table(snap)
        cols = p["columns"] if "columns" in p else [p["column"]]
        for col in cols:
            if col not in table.schema:
                return False, f"table {t} has no column {col}"
            n = sum(v is None for v in table.column(col))
            if n:
                return False, f"table {t} column {col} has {n} nulls"
        return True, f"table {t} columns {', '.join(cols)} have no nulls"
    # AGG_BOUND
    plan = parse_plan(p["plan"])
    names = plan.inputs()
    missing = [n for n in names if n not in tables]
    if missing:
        return False, f"table {missing[0]} not found"
    inputs = {n: catalog.read_table(tables[n]) for n in names}
    try:
        out = eval_plan(plan, inputs)
    except LakeError as exc:
        return False, f"aggregate plan failed: {exc}"
    if out.row_count != 1:
        return False, f"aggregate plan returned {out.row_count} rows, expected 1"
    col = p.get("column", out.schema.names[0])
    if col not in out.schema:
        raise UnknownColumn(col)
    value = out.column(col)[0]
    lo, hi = float(p["min"]), float(p["max"])
    if value is None or isinstance(value, (str, bool)):
        return False, f"{col} = {value!r} is not a number"
    ok = lo <= value <= hi
    return ok, f"{col} = {value} {'within' if ok else 'outside'} [{lo}, {hi}]"


def run_verifier(catalog: Catalog, spec: VerifierSpec, ref: str) -> VerifierReport:
    """Evaluate every check (no short-circuit) against the tables at ``ref``. Read-only."""
    commit = catalog.resolve_commit(ref)
    results = []
    for check in spec.checks:
        try:
            ok, msg = _run_check(catalog, dict(commit.table_map), check)
        except LakeError as exc:
            ok, msg = False, f"{check.type} on {check.table}: {exc}"
        results.append(CheckResult(check.type, check.table, ok, msg))
    return VerifierReport(all(r.passed for r in results), tuple(results), commit.id)


class VerifierStore:
    """``verifiers.json``: target branch -> verifier spec."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._mem: dict = {}

    def _load(self) -> dict:
        if self.path is None:
            return dict(self._mem)
        try:
            return json.loads(self.path.read_text("utf-8"))
        except FileNotFoundError:
            return {}

    def register(self, principal: Principal, spec: VerifierSpec) -> None:
        decision = authorize(principal, ADMIN)
        if not decision:
            raise AccessDenied(decision.reason)
        spec.validate()
        data = self._load()
        data[spec.target_branch] = spec.to_json()
        if self.path is None:
            self._mem = data
        else:
            tmp = self.path.with_suffix(".tmp")
            tmp.write_text(json.dumps(data, indent=2) + "\n", "utf-8")
            os.replace(tmp, self.path)

    def for_branch(self, branch: str) -> list[VerifierSpec]:
        raw = self._load().get(branch)
        return [VerifierSpec.from_json(raw)] if raw else []


# ---------------------------------------------------------------- the gate

MERGED = "MERGED"
DENIED = "DENIED"
VERIFICATION_FAILED = "VERIFICATION_FAILED"


@dataclass(frozen=True)
class MergeOutcome:
    status: str
    commit: str | None = None
    report: VerifierReport | None = None
    reason: str = ""
    kind: str = ""  # noop | fast_forward | merge

    @property
    def merged(self) -> bool:
        return self.status == MERGED

    def to_json(self) -> dict[str, Any]:
        return {"status": self.status, "commit": self.commit, "kind": self.kind,
                "reason": self.reason,
                "report": self.report.to_json() if self.report else None}


class Governance:
    def __init__(self, catalog: Catalog, keys: KeyStore | None = None,
                 verifiers: VerifierStore | None = None):
        self.catalog = catalog
        self.keys = keys or KeyStore()
        self.verifiers = verifiers or VerifierStore()
        self.verifier_runs = 0

    def verify(self, target_branch: str, ref: str) -> VerifierReport:
        results, ref_id = [], self.catalog.resolve_ref(ref)
        for spec in self.verifiers.for_branch(target_branch):
            self.verifier_runs += 1
            results.extend(run_verifier(self.catalog, spec, ref_id).results)
        return VerifierReport(all(r.passed for r in results), tuple(results), ref_id)

    def gated_merge(self, principal: Principal, source_ref: str,
                    target_branch: str) -> MergeOutcome:
        """authorize -> verify the would-be result -> CAS. MergeConflict propagates."""
        decision = authorize(principal, MERGE, target_branch)
        if not decision:
            return MergeOutcome(DENIED, reason=decision.reason)
        for _ in range(MERGE_ATTEMPTS):
            plan = self.catalog.prepare_merge(source_ref, target_branch, principal.key_id)
            report = self.verify(target_branch, plan.result)
            if not report.passed:
                return MergeOutcome(VERIFICATION_FAILED, report=report,
                                    reason="verifier rejected the merge result")
            if self.catalog.apply_merge(plan, reason="gated_merge", verified=True,
                                        principal=principal.key_id):
                return MergeOutcome(MERGED, plan.result, report, kind=plan.kind)
        raise MergeContention(f"{target_branch!r} kept moving during gated merge")
