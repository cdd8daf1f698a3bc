import io
import shutil

import pytest

from minilake.env import PackageRegistry, resolve_env
from minilake.errors import IsolationError
from minilake.fixtures import fixture_path
from minilake.pipeline import EnvSpec, load_project
from minilake.sandbox import (FAILED, INPROCESS, OK, SUBPROCESS, decode_request, encode_request,
                              execute_step, read_frame, write_frame)
from minilake.table import Schema, Table
from minilake.table.codec import encode_table

from goldens import golden_cases


def taxi():
    out = {}
    for name in ("taxi_trips", "taxi_zones"):
        cols, rows = golden_cases()[name]
        out[name] = Table.from_rows(Schema.from_json({"columns": cols}), rows)
    return out


@pytest.fixture(scope="module")
def spec():
    return load_project(fixture_path("p"))


@pytest.fixture(scope="module")
def registry():
    return PackageRegistry.load(fixture_path("registry_numpy2.json"))


def test_conflicting_env_fails_before_evaluation(spec, registry):
    node = spec.model("A")
    env = resolve_env(node.env, registry)
    out = execute_step(node, env, taxi(), registry)
    assert out.status == FAILED and out.output is None
    text = "\n".join(out.log_lines)
    assert "numpy.dtype size changed" in text and "step A" in text
    assert out.log_lines[-1].startswith("ImportError: ")


def test_repaired_env_produces_rows(spec, registry):
    node = spec.model("A")
    env = resolve_env(EnvSpec("3.10", {"pandas": "2.0", "numpy": "1.26.4"}), registry)
    out = execute_step(node, env, taxi(), registry)
    assert out.status == OK and out.output.row_count > 0


def test_isolation_modes_agree_byte_for_byte(spec, registry):
    env = resolve_env(EnvSpec("3.10", {"pandas": "2.0", "numpy": "1.26.4"}), registry)
    a = execute_step(spec.model("A"), env, taxi(), registry, INPROCESS)
    b = execute_step(spec.model("A"), env, taxi(), registry, SUBPROCESS)
    assert encode_table(a.output) == encode_table(b.output)
    env_b = resolve_env(spec.model("B").env, registry)
    c = execute_step(spec.model("B"), env_b, {"A": a.output}, registry, INPROCESS)
    d = execute_step(spec.model("B"), env_b, {"A": a.output}, registry, SUBPROCESS)
    assert encode_table(c.output) == encode_table(d.output)


def test_only_declared_inputs_are_visible(spec, registry):
    env = resolve_env(spec.model("B").env, registry)
    a = Table.from_rows(Schema.of(("borough", "STRING"), ("fare", "FLOAT64"),
                                  ("trip_miles", "FLOAT64")), [("Queens", 1.0, 2.0)])
    extra = {"A": a, "taxi_trips": taxi()["taxi_trips"]}
    out = execute_step(spec.model("B"), env, extra, registry)
    assert out.status == OK
    missing = execute_step(spec.model("B"), env, {"taxi_trips": a}, registry)
    assert missing.status == FAILED and "missing inputs" in missing.log_lines[0]


def test_plan_errors_fail_the_step_in_both_modes(tmp_path, registry):
    shutil.copytree(fixture_path("p"), tmp_path / "p")
    (tmp_path / "p" / "clean_and_transform.plan").write_text("from(A) | project(nope)")
    spec = load_project(tmp_path / "p")
    env = resolve_env(spec.model("B").env, registry)
    a = Table.from_rows(Schema.of(("x", "INT64")), [(1,)])
    for mode in (INPROCESS, SUBPROCESS):
        out = execute_step(spec.model("B"), env, {"A": a}, registry, mode)
        assert out.status == FAILED
        assert "UnknownColumn" in out.log_lines[-1]


def test_wire_format_round_trip():
    tables = taxi()
    data = encode_request("from(taxi_trips) | limit(1)", tables)
    text, back = decode_request(io.BytesIO(data))
    assert text == "from(taxi_trips) | limit(1)"
    assert back == tables
    buf = io.BytesIO()
    write_frame(buf, b"abc")
    buf.seek(0)
    assert read_frame(buf) == b"abc"
    with pytest.raises(EOFError):
        read_frame(io.BytesIO(b"\x05\x00\x00\x00ab"))


def test_unknown_isolation_mode(spec, registry):
    env = resolve_env(EnvSpec("3.10", {"pandas": "2.0", "numpy": "1.26.4"}), registry)
    with pytest.raises(ValueError):
        execute_step(spec.model("A"), env, taxi(), registry, "THREAD")


def test_worker_timeout_is_an_isolation_error(spec, registry):
    env = resolve_env(EnvSpec("3.10", {"pandas": "2.0", "numpy": "1.26.4"}), registry)
    with pytest.raises(IsolationError, match="timed out"):
        execute_step(spec.model("A"), env, taxi(), registry, SUBPROCESS, timeout=0.001)


def test_worker_disables_network(tmp_path):
    import subprocess
    import sys
    req = tmp_path / "req.bin"
    req.write_bytes(encode_request("from(t)", {"t": Table.from_rows(Schema.of(("x", "INT64")),
                                                                     [(1,)])}))
    code = ("import io, socket, sys, minilake.worker as w\n"
            "sys.stdin = io.TextIOWrapper(open(sys.argv[1], 'rb'))\n"
            "sys.stdout = io.TextIOWrapper(io.BytesIO())\n"
            "w.main()\n"
            "try:\n    socket.socket()\nexcept PermissionError:\n    sys.stderr.write('blocked')\n")
    out = subprocess.run([sys.executable, "-c", code, str(req)], capture_output=True, text=True)
    assert out.stderr.strip() == "blocked", out.stderr
