"""Step execution under a capability contract.

A step sees its plan and its input tables and nothing else: no catalog
handle, no workspace path. In SUBPROCESS mode the evaluator runs in a fresh
interpreter (``python -m minilake.worker``) with sockets disabled, and tables
cross the boundary in the canonical binary format.

Wire protocol (all integers little-endian): a frame is ``u32 length`` then
payload. Request frames: plan text, input count (4-byte u32 payload), then
per input a name frame and a table frame. Reply: one status byte (0 = OK,
1 = FAILED) followed by one frame holding table bytes or UTF-8 log text.
"""
from __future__ import annotations

import io
import struct
import subprocess
import sys
from dataclasses import dataclass, field
from typing import BinaryIO, Mapping

from .env import PackageRegistry, ResolvedEnv, check_conflicts
from .errors import IsolationError, LakeError
from .pipeline import ModelNode
from .table import Table, decode_table, encode_table, eval_plan, parse_plan, print_plan, typecheck

INPROCESS = "INPROCESS"
SUBPROCESS = "SUBPROCESS"
OK = "OK"
FAILED = "FAILED"
DEFAULT_TIMEOUT = 30.0


@dataclass
class StepOutcome:
    status: str
    output: Table | None = None
    log_lines: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == OK


# ---------------------------------------------------------------- framing


def write_frame(out: BinaryIO, payload: bytes) -> None:
    out.write(struct.pack("<I", len(payload)))
    out.write(payload)


def read_frame(inp: BinaryIO) -> bytes:
    head = inp.read(4)
    if len(head) != 4:
        raise EOFError("truncated frame header")
    (n,) = struct.unpack("<I", head)
    payload = inp.read(n)
    if len(payload) != n:
        raise EOFError("truncated frame payload")
    return payload


def encode_request(plan_text: str, inputs: Mapping[str, Table]) -> bytes:
    buf = io.BytesIO()
    write_frame(buf, plan_text.encode("utf-8"))
    write_frame(buf, struct.pack("<I", len(inputs)))
    for name in sorted(inputs):
        write_frame(buf, name.encode("utf-8"))
        write_frame(buf, encode_table(inputs[name]))
    return buf.getvalue()


def decode_request(inp: BinaryIO) -> tuple[str, dict[str, Table]]:
    plan_text = read_frame(inp).decode("utf-8")
    (count,) = struct.unpack("<I", read_frame(inp))
    inputs = {}
    for _ in range(count):
        name = read_frame(inp).decode("utf-8")
        inputs[name] = decode_table(read_frame(inp))
    return plan_text, inputs


def evaluate(plan_text: str, inputs: Mapping[str, Table]) -> tuple[bool, bytes]:
    """The sandboxed body: plan + inputs in, (ok, table bytes or log text) out."""
    try:
        plan = parse_plan(plan_text)
        typecheck(plan, {n: t.schema for n, t in inputs.items()})
        return True, encode_table(eval_plan(plan, inputs))
    except LakeError as exc:
        return False, f"{exc.kind}: {exc}".encode("utf-8")


# ---------------------------------------------------------------- execution


def conflict_traceback(step: str, env: ResolvedEnv, message: str) -> list[str]:
    """Synthetic interpreter traceback for an environment conflict."""
    pinned = sorted(p for p, how in env.provenance.items() if how == "PINNED")
    first = pinned[0] if pinned else "runtime"
    return [
        f"step {step}: python {env.runtime_version}, packages "
        + ", ".join(f"{p}=={v}" for p, v in sorted(env.installed.items())),
        "Traceback (most recent call last):",
        f'  File "<model {step}>", line 1, in <module>',
        f"    import {first}",
        f'  File "/env/site-packages/{first}/__init__.py", line 22, in <module>',
        f"    from {first}._libs import interval",
        f"ImportError: {message}",
    ]


def _run_subprocess(plan_text: str, inputs: Mapping[str, Table], timeout: float) -> tuple[bool, bytes]:
    try:
        proc = subprocess.run(
            [sys.executable, "-m", "minilake.worker"],
            input=encode_request(plan_text, inputs),
            capture_output=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired as exc:
        raise IsolationError(f"step timed out after {timeout:g}s") from exc
    if proc.returncode != 0:
        tail = proc.stderr.decode("utf-8", "replace").strip().splitlines()[-3:]
        raise IsolationError(f"worker exited with code {proc.returncode}: {' | '.join(tail)}")
    out = io.BytesIO(proc.stdout)
    status = out.read(1)
    try:
        payload = read_frame(out)
    except EOFError as exc:
        raise IsolationError(f"malformed worker reply: {exc}") from exc
    if status not in (b"\x00", b"\x01"):
        raise IsolationError(f"malformed worker status byte {status!r}")
    return status == b"\x00", payload


def execute_step(node: ModelNode, env: ResolvedEnv, inputs: Mapping[str, Table],
                 registry: PackageRegistry, isolation: str = INPROCESS,
                 timeout: float = DEFAULT_TIMEOUT) -> StepOutcome:
    """Run one model. Environment conflicts fail the step before any evaluation."""
    missing = [n for n in node.inputs if n not in inputs]
    if missing:
        return StepOutcome(FAILED, None, [f"step {node.name}: missing inputs {missing}"])
    rule = check_conflicts(env, registry)
    if rule is not None:
        return StepOutcome(FAILED, None, conflict_traceback(node.name, env, rule.message))
    visible = {n: inputs[n] for n in node.inputs}
    plan_text = print_plan(node.plan)
    if isolation == SUBPROCESS:
        ok, payload = _run_subprocess(plan_text, visible, timeout)
    elif isolation == INPROCESS:
        ok, payload = evaluate(plan_text, visible)
    else:
        raise ValueError(f"unknown isolation mode {isolation!r}")
    if not ok:
        return StepOutcome(FAILED, None, [f"step {node.name}: plan failed",
                                          payload.decode("utf-8", "replace")])
    out = decode_table(payload)
    return StepOutcome(OK, out, [f"step {node.name}: produced {out.row_count} rows"])
