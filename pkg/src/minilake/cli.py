"""Command line front end.

Exit codes: 0 ok, 1 usage, 2 domain error, 3 run failed, 4 verification failed.
Relative paths are looked up in the workspace first, then the current directory.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import agent as agent_mod
from .errors import AccessDenied, LakeError, VerificationFailed
from .fixtures import fixture_path
from .governance import (ADMIN, LOCAL_ADMIN, MERGE, READ, VERIFICATION_FAILED, WRITE,
                         VerifierSpec, authorize, parse_grants)
from .runs import SUCCESS
from .sandbox import INPROCESS, SUBPROCESS
from .scenario import VARIANTS, load_scenario, scenario_setup
from .server import serve
from .table import Schema, eval_plan, format_table, parse_plan
from .table.schema import json_safe
from .workspace import Workspace

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_RUN_FAILED, EXIT_VERIFICATION = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


class Context:
    def __init__(self, args):
        self.args = args
        self.json = bool(args.json)
        self.root = Path(args.workspace or os.environ.get("MINILAKE_WORKSPACE") or ".")
        self.api_key = os.environ.get("MINILAKE_API_KEY")
        self._ws = None

    @property
    def ws(self) -> Workspace:
        if self._ws is None:
            self._ws = Workspace(self.root)
        return self._ws

    @property
    def principal(self):
        return self.ws.keys.authenticate(self.api_key) if self.api_key else LOCAL_ADMIN

    def path(self, p: str, kind: str = "file") -> Path:
        """Workspace-relative first; ``projects/<p>`` and packaged ``fixtures/...`` for projects."""
        raw = Path(p)
        if raw.is_absolute():
            candidates = [raw]
        else:
            candidates = [self.root / raw, Path.cwd() / raw]
            if kind == "project":
                candidates.insert(1, self.root / "projects" / raw)
            if raw.parts and raw.parts[0] == "fixtures":
                candidates.append(fixture_path(*raw.parts[1:]))
        for c in candidates:
            if c.exists():
                return c
        raise UsageError(f"{p}: no such {kind}")

    def emit(self, obj, text: str) -> None:
        if self.json:
            print(json.dumps(obj, sort_keys=True, default=json_safe))
        else:
            print(text)


def _require(ctx: Context, kind: str, branch: str | None = None) -> None:
    decision = authorize(ctx.principal, kind, branch)
    if not decision:
        raise AccessDenied(decision.reason)


# ---------------------------------------------------------------- commands


def cmd_init(ctx: Context) -> int:
    ws = Workspace.init(ctx.root)
    head = ws.catalog.branch_head("main")
    ctx.emit({"workspace": str(ws.root), "main": head},
             f"initialized workspace {ws.root} (main at {head[:12]})")
    return EXIT_OK


def cmd_table_import(ctx: Context) -> int:
    a = ctx.args
    schema = Schema.from_json(json.loads(ctx.path(a.schema).read_text("utf-8")))
    data = ctx.path(a.csvfile).read_bytes()
    snap = ctx.ws.import_csv(a.branch, a.name, data, schema, ctx.principal)
    head = ctx.ws.catalog.branch_head(a.branch)
    ctx.emit({"table": a.name, "branch": a.branch, "data_id": snap.data_id,
              "schema_id": snap.schema_id, "row_count": snap.row_count, "commit": head},
             f"imported {a.name} ({snap.row_count} rows) into {a.branch} at {head[:12]}")
    return EXIT_OK


def cmd_run(ctx: Context) -> int:
    a = ctx.args
    project = ctx.path(a.project_dir, "project")
    rec = ctx.ws.runs.run_pipeline(project, a.branch, ctx.principal, no_merge=a.no_merge,
                                   isolation=a.isolation)
    logs = ctx.ws.runs.get_run_logs(rec.run_id)
    tail = [l.text for l in logs[-a.tail:]] if rec.status != SUCCESS else []
    lines = [f"run {rec.run_id} {rec.status}"]
    for s in rec.steps:
        rows = f" ({s.row_count} rows)" if s.row_count is not None else ""
        lines.append(f"  {s.name}: {s.status}{rows}")
    if rec.status == SUCCESS:
        lines.append(f"merged {rec.merge_commit}" if rec.merge_commit
                     else f"not merged; tables on {rec.run_branch}")
    else:
        lines.append(f"failed step: {rec.failed_step}" if rec.failed_step
                     else f"merge {rec.merge_status}")
        lines.append(f"error: {rec.error}")
        lines += ["log tail:"] + [f"  {t}" for t in tail]
    out = {**rec.to_json(), "log_tail": tail}
    out.pop("project_dir", None)
    ctx.emit(out, "\n".join(lines))
    if rec.status == SUCCESS:
        return EXIT_OK
    if rec.merge_status == VERIFICATION_FAILED:
        return EXIT_VERIFICATION
    return EXIT_RUN_FAILED


def cmd_branch(ctx: Context) -> int:
    a, cat = ctx.args, ctx.ws.catalog
    if a.branch_cmd == "list":
        _require(ctx, READ)
        branches = cat.branches()
        ctx.emit([{"name": n, "head": h} for n, h in sorted(branches.items())],
                 "\n".join(f"{n}\t{h[:12]}" for n, h in sorted(branches.items())))
    elif a.branch_cmd == "create":
        _require(ctx, WRITE, a.name)
        ref = cat.create_branch(a.name, a.from_ref)
        ctx.emit({"name": ref.name, "head": ref.head}, f"{ref.name} at {ref.head[:12]}")
    else:
        _require(ctx, ADMIN)
        cat.delete_branch(a.name)
        ctx.emit({"deleted": a.name}, f"deleted {a.name}")
    return EXIT_OK


def cmd_merge(ctx: Context) -> int:
    a = ctx.args
    out = ctx.ws.governance.gated_merge(ctx.principal, a.source, a.target)
    text = {
        "MERGED": f"merged {a.source} into {a.target} at {out.commit}",
        "DENIED": f"denied: {out.reason}",
    }.get(out.status)
    if text is None:
        failed = [r for r in out.report.results if not r.passed]
        text = "verification failed:\n" + "\n".join(
            f"  {r.type} {r.table}: {r.message}" for r in failed)
    ctx.emit(out.to_json(), text)
    return {"MERGED": EXIT_OK, "DENIED": EXIT_DOMAIN}.get(out.status, EXIT_VERIFICATION)


def cmd_revert(ctx: Context) -> int:
    a = ctx.args
    _require(ctx, MERGE, a.branch)
    c = ctx.ws.catalog.revert(a.branch, a.commit, ctx.principal.key_id)
    ctx.emit(c.to_json(), f"{a.branch} reverted to {a.commit[:12]} at {c.id}")
    return EXIT_OK


def cmd_query(ctx: Context) -> int:
    a = ctx.args
    _require(ctx, READ)
    plan = parse_plan(a.plan)
    inputs = ctx.ws.catalog.read_tables(a.ref, plan.inputs())
    table = eval_plan(plan, inputs)
    ctx.emit({"columns": table.schema.names, "rows": [list(r) for r in table.rows()],
              "row_count": table.row_count},
             format_table(table))
    return EXIT_OK


def cmd_log(ctx: Context) -> int:
    _require(ctx, READ)
    commits = ctx.ws.catalog.log(ctx.args.branch)
    ctx.emit([c.to_json() for c in commits],
             "\n".join(f"{c.id[:12]} {c.author:<8} {c.message}" for c in commits))
    return EXIT_OK


def cmd_diff(ctx: Context) -> int:
    _require(ctx, READ)
    d = ctx.ws.catalog.diff(ctx.args.ref_a, ctx.args.ref_b)
    lines = [f"+ {t}" for t in sorted(d.added)] + [f"- {t}" for t in sorted(d.removed)]
    lines += [f"~ {t}" for t in sorted(d.changed)]
    ctx.emit(d.to_json(), "\n".join(lines) or "no changes")
    return EXIT_OK


def cmd_keys_create(ctx: Context) -> int:
    _require(ctx, ADMIN)
    grants = parse_grants(ctx.args.grants)
    key_id, secret = ctx.ws.keys.create(grants, key_id=ctx.args.id)
    ctx.emit({"key_id": key_id, "secret": secret, "grants": [str(g) for g in grants]},
             f"{key_id} {secret}")
    return EXIT_OK


def cmd_verifier_set(ctx: Context) -> int:
    spec = VerifierSpec.from_json(json.loads(ctx.path(ctx.args.file).read_text("utf-8")))
    ctx.ws.verifiers.register(ctx.principal, spec)
    ctx.emit(spec.to_json(), f"verifier for {spec.target_branch}: {len(spec.checks)} checks")
    return EXIT_OK


def cmd_serve(ctx: Context) -> int:
    ctx.ws  # fail early if there is no workspace
    print(f"serving {ctx.root} on http://{ctx.args.host}:{ctx.args.port}/rpc", flush=True)
    try:
        serve(ctx.root, ctx.args.port, ctx.args.host)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_scenario_setup(ctx: Context) -> int:
    m = scenario_setup(ctx.root, ctx.args.variant)
    ctx.emit(m, f"scenario {m['variant']} in {ctx.root}\n"
                f"setup run {m['setup_run']['run_id']}: {m['setup_run']['status']}\n"
                f"agent key: {m['agent_key']['secret']}")
    return EXIT_OK


def cmd_agent_repair(ctx: Context) -> int:
    a = ctx.args
    ws = ctx.ws
    key = ctx.api_key
    if key is None:
        try:
            key = load_scenario(ws.root)["agent_key"]["secret"]
        except (OSError, KeyError):
            raise UsageError("no API key: set MINILAKE_API_KEY or run `scenario setup`")
    endpoint = a.endpoint if a.endpoint else ws
    budget = agent_mod.Budget(max_tool_calls=a.budget)
    tr = agent_mod.run_episode(agent_mod.RepairPolicy(), endpoint, key, a.goal, budget)
    path = agent_mod.save_transcript(ws, tr)
    metrics = agent_mod.evaluate_episode(tr, ws)
    lines = [f"{i + 1:2d}. {s.action.name if isinstance(s.action, agent_mod.ToolCall) else 'finish'}"
             + ("  ERROR " + s.result["error"]["message"] if s.result and "error" in s.result else "")
             for i, s in enumerate(tr.steps)]
    lines.append(f"{tr.outcome}: {tr.summary}")
    lines.append(" ".join(f"{k}={v}" for k, v in metrics.to_json().items()))
    lines.append(f"transcript: {path}")
    ctx.emit({"transcript": str(path), "outcome": tr.outcome, "summary": tr.summary,
              "metrics": metrics.to_json()}, "\n".join(lines))
    return EXIT_OK if tr.success else EXIT_RUN_FAILED


# ---------------------------------------------------------------- parser


def _global_options(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--workspace", default=default,
                        help="workspace directory (default $MINILAKE_WORKSPACE or .)")
    parser.add_argument("--json", action="store_true", default=default,
                        help="machine-readable output")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="minilake", description="Versioned tables, gated pipelines, tool server.")
    _global_options(p, None)
    # global options are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, argparse.SUPPRESS)

    class Sub(_Parser):
        def __init__(self, *a, **kw):
            kw.setdefault("parents", [common])
            super().__init__(*a, **kw)

    sub = p.add_subparsers(dest="cmd", required=True, parser_class=Sub)

    sub.add_parser("init").set_defaults(fn=cmd_init)

    t = sub.add_parser("table").add_subparsers(dest="table_cmd", required=True,
                                                parser_class=Sub)
    ti = t.add_parser("import")
    ti.add_argument("--branch", required=True)
    ti.add_argument("--name", required=True)
    ti.add_argument("--schema", required=True)
    ti.add_argument("csvfile")
    ti.set_defaults(fn=cmd_table_import)

    r = sub.add_parser("run")
    r.add_argument("--project_dir", "--project-dir", dest="project_dir", required=True)
    r.add_argument("--branch", required=True)
    r.add_argument("--no-merge", action="store_true")
    r.add_argument("--isolation", type=str.upper, choices=(INPROCESS, SUBPROCESS),
                   default=INPROCESS)
    r.add_argument("--tail", type=int, default=5, help="log lines shown on failure")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("branch").add_subparsers(dest="branch_cmd", required=True,
                                                 parser_class=Sub)
    b.add_parser("list").set_defaults(fn=cmd_branch)
    bc = b.add_parser("create")
    bc.add_argument("name")
    bc.add_argument("--from", dest="from_ref", default="main")
    bc.set_defaults(fn=cmd_branch)
    bd = b.add_parser("delete")
    bd.add_argument("name")
    bd.set_defaults(fn=cmd_branch)

    m = sub.add_parser("merge")
    m.add_argument("source")
    m.add_argument("target")
    m.set_defaults(fn=cmd_merge)

    rv = sub.add_parser("revert")
    rv.add_argument("branch")
    rv.add_argument("commit")
    rv.set_defaults(fn=cmd_revert)

    q = sub.add_parser("query")
    q.add_argument("--ref", default="main")
    q.add_argument("plan")
    q.set_defaults(fn=cmd_query)

    lg = sub.add_parser("log")
    lg.add_argument("branch", nargs="?", default="main")
    lg.set_defaults(fn=cmd_log)

    d = sub.add_parser("diff")
    d.add_argument("ref_a")
    d.add_argument("ref_b")
    d.set_defaults(fn=cmd_diff)

    k = sub.add_parser("keys").add_subparsers(dest="keys_cmd", required=True,
                                               parser_class=Sub)
    kc = k.add_parser("create")
    kc.add_argument("--grants", required=True)
    kc.add_argument("--id")
    kc.set_defaults(fn=cmd_keys_create)

    v = sub.add_parser("verifier").add_subparsers(dest="verifier_cmd", required=True,
                                                   parser_class=Sub)
    vs = v.add_parser("set")
    vs.add_argument("file")
    vs.set_defaults(fn=cmd_verifier_set)

    s = sub.add_parser("serve")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--host", default="127.0.0.1")
    s.set_defaults(fn=cmd_serve)

    sc = sub.add_parser("scenario").add_subparsers(dest="scenario_cmd", required=True,
                                                    parser_class=Sub)
    ss = sc.add_parser("setup")
    ss.add_argument("--variant", choices=VARIANTS, required=True)
    ss.set_defaults(fn=cmd_scenario_setup)

    ag = sub.add_parser("agent").add_subparsers(dest="agent_cmd", required=True,
                                                 parser_class=Sub)
    ar = ag.add_parser("repair")
    mode = ar.add_mutually_exclusive_group()
    mode.add_argument("--endpoint", help="tool server URL, e.g. http://127.0.0.1:8765/rpc")
    mode.add_argument("--in-process", action="store_true", help="default")
    ar.add_argument("--budget", type=int, default=20)
    ar.add_argument("--goal", default="find the most recent failed run, fix it, and "
                                      "promote the fix to main")
    ar.set_defaults(fn=cmd_agent_repair)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    ctx = Context(args)
    try:
        return args.fn(ctx)
    except UsageError as exc:
        _error(ctx, "USAGE", str(exc))
        return EXIT_USAGE
    except VerificationFailed as exc:
        _error(ctx, exc.kind, str(exc))
        return EXIT_VERIFICATION
    except LakeError as exc:
        _error(ctx, exc.kind, str(exc))
        return EXIT_DOMAIN
    except (ValueError, OSError) as exc:
        _error(ctx, type(exc).__name__, str(exc))
        return EXIT_DOMAIN


def _error(ctx: Context, kind: str, message: str) -> None:
    if ctx.json:
        print(json.dumps({"error": {"kind": kind, "message": message}}, sort_keys=True))
    else:
        print(f"error ({kind}): {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
