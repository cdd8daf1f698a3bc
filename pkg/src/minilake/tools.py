"""Agent-facing tools and the JSON-RPC 2.0 dispatcher in front of them.

Each tool is a thin wrapper over one library operation: it authorizes the
caller, calls the operation and serializes the result. Methods:
``tools/list`` and ``tools/call`` (``{"name": ..., "arguments": {...}}``).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any, Callable

from .errors import (AccessDenied, AuthFailed, LakeError, UnknownInput, UnknownRef,
                     VerificationFailed)
from .governance import DENIED, READ, VERIFICATION_FAILED, WRITE, Principal, authorize
from .pipeline import EnvSpec, code_hash, load_project, write_model_env
from .runs import RunRecord
from .table import eval_plan, parse_plan, print_plan
from .table.schema import json_safe
from .workspace import Workspace

log = logging.getLogger(__name__)

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
DOMAIN_ERROR = -32000
AUTH_ERROR = -32001

QUERY_ROW_LIMIT = 1000

OBSERVABILITY = "OBSERVABILITY"
EXPLORATION = "EXPLORATION"
EXECUTION = "EXECUTION"
GOVERNANCE = "GOVERNANCE"

_JSON_TYPES = {"string": str, "integer": int, "boolean": bool, "object": dict}


@dataclass(frozen=True)
class Param:
    name: str
    type: str
    required: bool = True
    description: str = ""


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    description: str
    params: tuple[Param, ...]
    category: str

    def input_schema(self) -> dict:
        return {
            "type": "object",
            "properties": {p.name: {"type": p.type, "description": p.description}
                           for p in self.params},
            "required": [p.name for p in self.params if p.required],
        }

    def to_json(self) -> dict:
        return {"name": self.name, "description": self.description, "category": self.category,
                "input_schema": self.input_schema()}

    def validate(self, args: Any) -> dict:
        """Return the arguments or raise ValueError describing the mismatch."""
        if not isinstance(args, dict):
            raise ValueError("arguments must be an object")
        known = {p.name: p for p in self.params}
        extra = sorted(set(args) - set(known))
        if extra:
            raise ValueError(f"unexpected arguments: {', '.join(extra)}")
        for p in self.params:
            if p.name not in args or args[p.name] is None:
                if p.required:
                    raise ValueError(f"missing required argument {p.name!r}")
                continue
            v = args[p.name]
            want = _JSON_TYPES[p.type]
            if not isinstance(v, want) or (want is int and isinstance(v, bool)):
                raise ValueError(f"argument {p.name!r} must be {p.type}")
        return {k: v for k, v in args.items() if v is not None}


def _d(name, description, category, *params):
    return ToolDescriptor(name, description, tuple(params), category)


DESCRIPTORS = (
    _d("list_runs", "List pipeline runs, newest first.", OBSERVABILITY,
       Param("status", "string", False, "RUNNING, SUCCESS, FAILED or BLOCKED"),
       Param("project", "string", False), Param("limit", "integer", False)),
    _d("get_run_logs", "Ordered log lines of one run.", OBSERVABILITY,
       Param("run_id", "string")),
    _d("list_branches", "All branches and their head commits.", EXPLORATION),
    _d("create_branch", "Create a zero-copy branch from a ref.", EXECUTION,
       Param("name", "string"), Param("from_ref", "string", False, "defaults to main")),
    _d("list_tables", "Table names at a ref.", EXPLORATION, Param("ref", "string")),
    _d("get_table_schema", "Schema and row count of a table at a ref.", EXPLORATION,
       Param("ref", "string"), Param("table", "string")),
    _d("query_table", "Evaluate a read-only plan against tables at a ref.", EXPLORATION,
       Param("ref", "string"), Param("plan", "string"),
       Param("limit", "integer", False, f"row cap, at most {QUERY_ROW_LIMIT}")),
    _d("diff_refs", "Table-level differences between two refs.", EXPLORATION,
       Param("ref_a", "string"), Param("ref_b", "string")),
    _d("registry_info", "Versions, dependencies and known conflicts of a package.",
       EXPLORATION, Param("package", "string")),
    _d("get_project", "Models, inputs, plans and environments of a project.", EXPLORATION,
       Param("project", "string")),
    _d("set_model_env", "Replace the environment block of one model.", EXECUTION,
       Param("project", "string"), Param("model", "string"),
       Param("env", "object", True, '{"runtime": "3.10", "pins": {"pkg": "version"}}')),
    _d("run_pipeline", "Run a project transactionally against a branch.", EXECUTION,
       Param("project", "string"), Param("branch", "string"),
       Param("no_merge", "boolean", False)),
    _d("request_merge", "Verify-then-merge a ref into a branch.", GOVERNANCE,
       Param("source", "string"), Param("target", "string")),
)


def run_summary(rec: RunRecord) -> dict:
    return {
        "run_id": rec.run_id,
        "project": rec.project_name,
        "status": rec.status,
        "merge_status": rec.merge_status,
        "failed_step": rec.failed_step,
        "error": rec.error,
        "run_branch": rec.run_branch,
        "target_branch": rec.target_branch,
        "start_commit": rec.start_commit,
        "code_hash": rec.code_hash,
        "merge_commit": rec.merge_commit,
        "steps": [{"name": s.name, "status": s.status, "row_count": s.row_count,
                   "data_id": s.data_id} for s in rec.steps],
    }


def _require(principal: Principal, kind: str, branch: str | None = None) -> None:
    decision = authorize(principal, kind, branch)
    if not decision:
        raise AccessDenied(decision.reason)


class ToolService:
    """In-process tool implementations bound to a workspace."""

    def __init__(self, workspace: Workspace):
        self.ws = workspace
        self.descriptors = {d.name: d for d in DESCRIPTORS}

    def list_tools(self) -> list[dict]:
        return [d.to_json() for d in DESCRIPTORS]

    def call(self, principal: Principal, name: str, arguments: dict) -> Any:
        handler: Callable = getattr(self, f"_tool_{name}")
        return handler(principal, **arguments)

    # observability

    def _tool_list_runs(self, p, status=None, project=None, limit=20):
        _require(p, READ)
        return [run_summary(r) for r in
                self.ws.runs.get_runs(status=status, project=project, limit=max(0, limit))]

    def _tool_get_run_logs(self, p, run_id):
        _require(p, READ)
        return [{"step": l.step, "seq": l.seq, "severity": l.severity, "text": l.text}
                for l in self.ws.runs.get_run_logs(run_id)]

    # exploration

    def _tool_list_branches(self, p):
        _require(p, READ)
        return [{"name": n, "head": h} for n, h in sorted(self.ws.catalog.branches().items())]

    def _tool_list_tables(self, p, ref):
        _require(p, READ)
        return self.ws.catalog.list_tables(ref)

    def _tool_get_table_schema(self, p, ref, table):
        _require(p, READ)
        commit = self.ws.catalog.resolve_commit(ref)
        if table not in commit.table_map:
            raise UnknownRef(f"table {table!r} not found at {ref!r}")
        snap = commit.table_map[table]
        return {"table": table, "row_count": snap.row_count,
                **self.ws.catalog.read_schema(snap).to_json()}

    def _tool_query_table(self, p, ref, plan, limit=QUERY_ROW_LIMIT):
        _require(p, READ)
        parsed = parse_plan(plan)
        limit = max(0, min(limit, QUERY_ROW_LIMIT))
        commit = self.ws.catalog.resolve_commit(ref)
        inputs = {}
        for name in parsed.inputs():
            if name not in commit.table_map:
                raise UnknownInput(f"table {name!r} not found at {ref!r}")
            inputs[name] = self.ws.catalog.read_table(commit.table_map[name])
        out = eval_plan(parsed, inputs)
        rows = [[json_safe(v) for v in r] for r in list(out.rows())[:limit]]
        return {"plan": print_plan(parsed), **out.schema.to_json(), "rows": rows,
                "row_count": out.row_count, "truncated": out.row_count > limit}

    def _tool_diff_refs(self, p, ref_a, ref_b):
        _require(p, READ)
        return self.ws.catalog.diff(ref_a, ref_b).to_json()

    def _tool_registry_info(self, p, package):
        _require(p, READ)
        return self.ws.registry().info(package)

    def _tool_get_project(self, p, project):
        _require(p, READ)
        spec = load_project(self.ws.project_dir(project))
        return {
            "name": spec.name,
            "code_hash": code_hash(spec),
            "source_tables": spec.source_tables(),
            "models": [dict(m.to_json(), plan_text=print_plan(m.plan)) for m in spec.models],
        }

    # execution and governance

    def _tool_create_branch(self, p, name, from_ref="main"):
        _require(p, READ)
        _require(p, WRITE, name)
        ref = self.ws.catalog.create_branch(name, from_ref)
        return {"name": ref.name, "head": ref.head}

    def _tool_set_model_env(self, p, project, model, env):
        _require(p, WRITE)
        spec = write_model_env(self.ws.project_dir(project), model, EnvSpec.from_json(env))
        return {"project": spec.name, "model": spec.model(model).to_json(),
                "code_hash": code_hash(spec)}

    def _tool_run_pipeline(self, p, project, branch, no_merge=False):
        rec = self.ws.runs.run_pipeline(self.ws.project_dir(project), branch, p,
                                        no_merge=no_merge)
        return run_summary(rec)

    def _tool_request_merge(self, p, source, target):
        outcome = self.ws.governance.gated_merge(p, source, target)
        if outcome.status == DENIED:
            raise AccessDenied(outcome.reason)
        if outcome.status == VERIFICATION_FAILED:
            raise VerificationFailed(outcome.report)
        return outcome.to_json()


def _error(req_id, code: int, message: str, data: dict | None = None) -> dict:
    err = {"code": code, "message": message}
    if data is not None:
        err["data"] = data
    return {"jsonrpc": "2.0", "id": req_id, "error": err}


class RpcHandler:
    """Transport-independent JSON-RPC dispatch: bytes + API key in, envelope out."""

    def __init__(self, workspace: Workspace):
        self.ws = workspace
        self.service = ToolService(workspace)

    def handle(self, body: bytes | str, api_key: str | None) -> dict:
        try:
            req = json.loads(body)
        except (ValueError, UnicodeDecodeError) as exc:
            return _error(None, PARSE_ERROR, f"parse error: {exc}")
        if not isinstance(req, dict) or not isinstance(req.get("method"), str):
            return _error(None, INVALID_REQUEST, "invalid request")
        req_id = req.get("id")
        try:
            principal = self.ws.keys.authenticate(api_key)
        except AuthFailed as exc:
            return _error(req_id, AUTH_ERROR, str(exc), {"kind": "AuthFailed"})
        method, params = req["method"], req.get("params") or {}
        if method == "tools/list":
            return {"jsonrpc": "2.0", "id": req_id, "result": {"tools": self.service.list_tools()}}
        if method != "tools/call":
            return _error(req_id, METHOD_NOT_FOUND, f"method not found: {method}")
        if not isinstance(params, dict) or not isinstance(params.get("name"), str):
            return _error(req_id, INVALID_PARAMS, "tools/call needs params.name")
        desc = self.service.descriptors.get(params["name"])
        if desc is None:
            return _error(req_id, INVALID_PARAMS, f"unknown tool {params['name']!r}")
        try:
            args = desc.validate(params.get("arguments") or {})
        except ValueError as exc:
            return _error(req_id, INVALID_PARAMS, str(exc))
        try:
            result = self.service.call(principal, desc.name, args)
        except LakeError as exc:
            data = {"kind": exc.kind}
            if isinstance(exc, VerificationFailed):
                data["report"] = exc.report.to_json()
            return _error(req_id, DOMAIN_ERROR, str(exc), data)
        except Exception as exc:  # keep serving; surface as a domain error
            log.exception("tool %s crashed", desc.name)
            return _error(req_id, DOMAIN_ERROR, f"internal error: {exc}",
                          {"kind": type(exc).__name__})
        return {"jsonrpc": "2.0", "id": req_id, "result": result}
