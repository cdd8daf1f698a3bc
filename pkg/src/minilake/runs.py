"""Transactional pipeline runs.

Every run happens on its own copy-on-write branch ``run/<run_id>`` created
from the target head. Each materialized model is committed to that branch
as soon as it is produced; only when every step succeeds is the branch
handed to the verify-then-merge gate, so the target moves at most once per
run and never to a half-written state.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable

from filelock import FileLock

from .env import check_whitelist, resolve_env
from .errors import AccessDenied, IsolationError, LakeError, MergeConflict, MergeContention, UnknownRun
from .governance import MERGED, READ, WRITE, Principal, authorize
from .pipeline import PipelineSpec, build_dag, code_hash, load_project
from .sandbox import INPROCESS, OK, execute_step

if TYPE_CHECKING:
    from .workspace import Workspace

RUNNING, SUCCESS, FAILED, BLOCKED = "RUNNING", "SUCCESS", "FAILED", "BLOCKED"
INFO, ERROR = "INFO", "ERROR"
RUN_STEP = "_run"  # step name for run-level log lines


@dataclass
class StepRecord:
    name: str
    status: str
    data_id: str | None = None
    row_count: int | None = None
    materialized: bool = False
    env: dict | None = None


@dataclass
class RunRecord:
    run_id: str
    project_name: str
    project_dir: str
    start_commit: str
    code_hash: str
    run_branch: str
    target_branch: str
    principal: str
    status: str = RUNNING
    merge_status: str = ""  # MERGED | SKIPPED | DENIED | VERIFICATION_FAILED | CONFLICT | CONTENTION
    merge_commit: str | None = None
    failed_step: str | None = None
    error: str = ""
    steps: list[StepRecord] = field(default_factory=list)
    started: float = 0.0
    ended: float | None = None

    @property
    def merged(self) -> bool:
        return self.merge_status == MERGED

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> RunRecord:
        obj = dict(obj)
        obj["steps"] = [StepRecord(**s) for s in obj.get("steps", [])]
        return cls(**obj)

    def data_ids(self) -> dict[str, str]:
        return {s.name: s.data_id for s in self.steps if s.materialized and s.data_id}


@dataclass(frozen=True)
class JobLog:
    run_id: str
    step: str
    seq: int
    severity: str
    text: str

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReplayResult:
    equal: bool
    report: dict

    @property
    def status(self) -> str:
        return "EQUAL" if self.equal else "DIVERGED"


class _Logger:
    def __init__(self, run_id: str, path: Path | None):
        self.run_id = run_id
        self.path = path
        self.lines: list[JobLog] = []

    def __call__(self, step: str, text: str, severity: str = INFO) -> None:
        entry = JobLog(self.run_id, step, len(self.lines), severity, text)
        self.lines.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry.to_json()) + "\n")


class RunEngine:
    def __init__(self, workspace: Workspace, run_id_factory: Callable[[], str] | None = None):
        self.ws = workspace
        self.catalog = workspace.catalog
        self.runs_dir = workspace.root / "runs"
        self.runs_dir.mkdir(exist_ok=True)
        self._next_id = run_id_factory or self._counter
        self.step_executions = 0

    def _counter(self) -> str:
        path = self.runs_dir / "counter"
        with FileLock(str(self.runs_dir / "counter.lock")):
            n = int(path.read_text()) + 1 if path.exists() else 1
            path.write_text(str(n))
        return f"{n:04d}"

    # persistence

    def _save(self, rec: RunRecord) -> None:
        d = self.runs_dir / rec.run_id
        d.mkdir(exist_ok=True)
        tmp = d / "record.json.tmp"
        tmp.write_text(json.dumps(rec.to_json(), indent=2) + "\n", "utf-8")
        os.replace(tmp, d / "record.json")

    def get_run(self, run_id: str) -> RunRecord:
        path = self.runs_dir / str(run_id) / "record.json"
        if "/" in str(run_id) or not path.exists():
            raise UnknownRun(f"no run {run_id!r}")
        return RunRecord.from_json(json.loads(path.read_text("utf-8")))

    def get_runs(self, status: str | None = None, project: str | None = None,
                 limit: int | None = None) -> list[RunRecord]:
        """Newest first."""
        records = []
        for d in self.runs_dir.iterdir():
            if (d / "record.json").exists():
                records.append(self.get_run(d.name))
        records.sort(key=lambda r: (r.started, r.run_id), reverse=True)
        out = [r for r in records
               if (status is None or r.status == status)
               and (project is None or r.project_name == project)]
        return out[:limit] if limit is not None else out

    def get_run_logs(self, run_id: str) -> list[JobLog]:
        self.get_run(run_id)
        path = self.runs_dir / run_id / "logs.jsonl"
        if not path.exists():
            return []
        return [JobLog(**json.loads(l)) for l in path.read_text("utf-8").splitlines() if l]

    # execution

    def _execute(self, spec: PipelineSpec, branch: str, principal: Principal, chash: str,
                 isolation: str, log: _Logger) -> tuple[list[StepRecord], str | None, str]:
        """Run the DAG onto ``branch``. Returns (steps, failed step, error text)."""
        registry = self.ws.registry()
        models = spec.model_names
        outputs = {}
        steps: list[StepRecord] = []
        for node in build_dag(spec):
            log(node.name, f"step {node.name}: starting ({node.materialization})")
            try:
                env = resolve_env(node.env, registry)
            except LakeError as exc:
                log(node.name, f"step {node.name}: environment resolution failed: "
                               f"{exc.kind}: {exc}", ERROR)
                steps.append(StepRecord(node.name, "FAILED"))
                return steps, node.name, f"{exc.kind}: {exc}"
            log(node.name, "resolved env: " + ", ".join(
                f"{p}=={v} ({env.provenance[p].lower()})" for p, v in sorted(env.installed.items())))
            head = self.catalog.resolve_commit(branch)
            inputs, missing = {}, []
            for name in node.inputs:
                if name in models:
                    inputs[name] = outputs[name]
                elif name in head.table_map:
                    inputs[name] = self.catalog.read_table(head.table_map[name])
                else:
                    missing.append(name)
            if missing:
                msg = f"step {node.name}: source tables not found: {', '.join(missing)}"
                log(node.name, msg, ERROR)
                steps.append(StepRecord(node.name, "FAILED", env=env.to_json()))
                return steps, node.name, msg
            self.step_executions += 1
            try:
                outcome = execute_step(node, env, inputs, registry, isolation)
            except IsolationError as exc:
                log(node.name, f"step {node.name}: IsolationError: {exc}", ERROR)
                steps.append(StepRecord(node.name, "FAILED", env=env.to_json()))
                return steps, node.name, f"IsolationError: {exc}"
            sev = INFO if outcome.ok else ERROR
            for line in outcome.log_lines:
                log(node.name, line, sev)
            if not outcome.ok:
                steps.append(StepRecord(node.name, "FAILED", env=env.to_json()))
                return steps, node.name, outcome.log_lines[-1]
            outputs[node.name] = outcome.output
            rec = StepRecord(node.name, OK, row_count=outcome.output.row_count, env=env.to_json())
            if node.materialization == "REPLACE":
                snap = self.catalog.put_table(outcome.output)
                self.catalog.advance_branch(branch, {node.name: snap},
                                            f"materialize {node.name}", principal.key_id, chash)
                rec.data_id, rec.materialized = snap.data_id, True
                log(node.name, f"step {node.name}: materialized {snap.row_count} rows "
                               f"as {snap.data_id[:12]}")
            steps.append(rec)
        return steps, None, ""

    def run_pipeline(self, project_dir: str | os.PathLike, target_branch: str,
                     principal: Principal, no_merge: bool = False,
                     isolation: str = INPROCESS) -> RunRecord:
        spec = load_project(project_dir)
        chash = code_hash(spec)
        for kind, branch in ((READ, target_branch), (WRITE, "run/")):
            decision = authorize(principal, kind, branch)
            if not decision:
                raise AccessDenied(decision.reason)
        start = self.catalog.branch_head(target_branch)
        run_id = self._next_id()
        rec = RunRecord(run_id, spec.name, str(Path(project_dir).resolve()), start, chash,
                        f"run/{run_id}", target_branch, principal.key_id,
                        started=self.ws.clock())
        self.catalog.create_branch(rec.run_branch, start)
        self._save(rec)
        log = _Logger(run_id, self.runs_dir / run_id / "logs.jsonl")
        log(RUN_STEP, f"run {run_id}: project {spec.name} code {chash[:12]} "
                      f"from {target_branch}@{start[:12]} on {rec.run_branch}")

        whitelist = self.ws.whitelist()
        blocked = [(m.name, v) for m in build_dag(spec)
                   if (v := check_whitelist(m.env, whitelist))]
        if blocked:
            for name, v in blocked:
                log(name, f"step {name}: blocked: {v}", ERROR)
            rec.status, rec.error = BLOCKED, "; ".join(f"{n}: {v}" for n, v in blocked)
            rec.failed_step = blocked[0][0]
            return self._finish(rec)

        rec.steps, rec.failed_step, rec.error = self._execute(
            spec, rec.run_branch, principal, chash, isolation, log)
        if rec.failed_step:
            rec.status = FAILED
            log(RUN_STEP, f"run {run_id}: FAILED at step {rec.failed_step}; "
                          f"{target_branch} untouched, {rec.run_branch} kept", ERROR)
            return self._finish(rec)
        if no_merge:
            rec.status, rec.merge_status = SUCCESS, "SKIPPED"
            log(RUN_STEP, f"run {run_id}: SUCCESS (not merged; tables on {rec.run_branch})")
            return self._finish(rec)

        try:
            outcome = self.ws.governance.gated_merge(principal, rec.run_branch, target_branch)
        except MergeConflict as exc:
            rec.status, rec.merge_status, rec.error = FAILED, "CONFLICT", str(exc)
        except MergeContention as exc:
            rec.status, rec.merge_status, rec.error = FAILED, "CONTENTION", str(exc)
        else:
            rec.merge_status = outcome.status
            if outcome.merged:
                rec.status, rec.merge_commit = SUCCESS, outcome.commit
            else:
                rec.status = FAILED
                rec.error = outcome.reason
                if outcome.report is not None:
                    rec.error += ": " + "; ".join(
                        r.message for r in outcome.report.results if not r.passed)
        if rec.status == SUCCESS:
            log(RUN_STEP, f"run {run_id}: SUCCESS, merged into {target_branch} "
                          f"at {rec.merge_commit[:12]}")
        else:
            log(RUN_STEP, f"run {run_id}: merge {rec.merge_status}: {rec.error}", ERROR)
        return self._finish(rec)

    def _finish(self, rec: RunRecord) -> RunRecord:
        rec.ended = self.ws.clock()
        self._save(rec)
        return rec

    def replay_check(self, run_id: str, isolation: str = INPROCESS) -> ReplayResult:
        """Re-execute a successful run from its start commit and compare data ids."""
        rec = self.get_run(run_id)
        if rec.status != SUCCESS:
            return ReplayResult(False, {"reason": f"run {run_id} is {rec.status}, not SUCCESS"})
        try:
            spec = load_project(rec.project_dir)
            chash = code_hash(spec)
        except LakeError as exc:
            return ReplayResult(False, {"reason": f"project no longer loads: {exc}"})
        if chash != rec.code_hash:
            return ReplayResult(False, {"reason": "code_hash mismatch",
                                        "recorded": rec.code_hash, "current": chash})
        n = 1
        while f"replay/{run_id}-{n}" in self.catalog.branches():
            n += 1
        branch = f"replay/{run_id}-{n}"
        self.catalog.create_branch(branch, rec.start_commit)
        try:
            steps, failed, error = self._execute(spec, branch, Principal("replay", ()), chash,
                                                 isolation, _Logger(run_id, None))
        finally:
            self.catalog.delete_branch(branch)
        if failed:
            return ReplayResult(False, {"reason": f"replay failed at {failed}: {error}"})
        before = rec.data_ids()
        after = {s.name: s.data_id for s in steps if s.materialized}
        diverged = {t: {"recorded": before.get(t), "replayed": after.get(t)}
                    for t in sorted(set(before) | set(after)) if before.get(t) != after.get(t)}
        return ReplayResult(not diverged, {"tables": after, "diverged": diverged})
