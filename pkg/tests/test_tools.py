import json

import pytest

from minilake.governance import LOCAL_ADMIN, MERGE, parse_grants
from minilake.pipeline import code_hash, load_project
from minilake.server import LocalClient, RpcClient, start_background
from minilake.table import eval_plan, parse_plan
from minilake.table.schema import json_safe
from minilake.tools import (AUTH_ERROR, DESCRIPTORS, DOMAIN_ERROR, INVALID_PARAMS,
                            INVALID_REQUEST, METHOD_NOT_FOUND, PARSE_ERROR, RpcHandler,
                            run_summary)


@pytest.fixture
def lake(numpy2):
    ws, manifest = numpy2
    return ws, manifest, LocalClient(ws, manifest["agent_key"]["secret"])


@pytest.fixture
def http(numpy2):
    ws, manifest = numpy2
    srv, url = start_background(ws)
    yield ws, manifest, RpcClient(url, manifest["agent_key"]["secret"])
    srv.shutdown()
    srv.server_close()


def result(client, tool, **args):
    reply = client.call_tool(tool, args)
    assert "error" not in reply, reply
    return reply["result"]


def error(client, tool, **args):
    reply = client.call_tool(tool, args)
    assert "result" not in reply, reply
    return reply["error"]


def test_tools_list(lake):
    _, _, client = lake
    tools = client.list_tools()
    assert [t["name"] for t in tools] == [d.name for d in DESCRIPTORS]
    assert len(tools) == 13
    for t in tools:
        assert t["input_schema"]["type"] == "object" and t["description"]


def test_wire_errors(numpy2):
    ws, manifest = numpy2
    h = RpcHandler(ws)
    key = manifest["agent_key"]["secret"]
    assert h.handle(b"{not json", key)["error"]["code"] == PARSE_ERROR
    assert h.handle(b"\xff\xfe", key)["error"]["code"] == PARSE_ERROR
    assert h.handle(b"[1, 2]", key)["error"]["code"] == INVALID_REQUEST
    assert h.handle(json.dumps({"id": 3}), key)["error"]["code"] == INVALID_REQUEST
    missing = h.handle(json.dumps({"jsonrpc": "2.0", "id": 4, "method": "tools/list"}), None)
    assert missing["error"]["code"] == AUTH_ERROR and missing["id"] == 4
    bad = h.handle(json.dumps({"jsonrpc": "2.0", "id": 5, "method": "tools/list"}), "nope")
    assert bad["error"]["code"] == AUTH_ERROR
    unknown = h.handle(json.dumps({"jsonrpc": "2.0", "id": 6, "method": "tools/frob"}), key)
    assert unknown["error"]["code"] == METHOD_NOT_FOUND and unknown["id"] == 6


@pytest.mark.parametrize("name,args", [
    ("nope", {}),
    ("get_run_logs", {}),
    ("get_run_logs", {"run_id": 7}),
    ("list_runs", {"limit": True}),
    ("list_tables", {"ref": "main", "extra": 1}),
    ("set_model_env", {"project": "p", "model": "A", "env": "3.10"}),
])
def test_bad_params(lake, name, args):
    _, _, client = lake
    assert error(client, name, **args)["code"] == INVALID_PARAMS


def test_envelope_has_exactly_one_of_result_or_error(numpy2):
    ws, manifest = numpy2
    h = RpcHandler(ws)
    for body in [b"x", json.dumps({"jsonrpc": "2.0", "id": "a", "method": "tools/list"}),
                 json.dumps({"jsonrpc": "2.0", "id": 9, "method": "tools/call",
                             "params": {"name": "list_branches"}})]:
        reply = h.handle(body, manifest["agent_key"]["secret"])
        assert reply["jsonrpc"] == "2.0"
        assert ("result" in reply) != ("error" in reply)


def test_failed_run_logs_show_conflict(lake):
    ws, _, client = lake
    [run] = result(client, "list_runs", status="FAILED")
    assert run["failed_step"] == "A"
    lines = result(client, "get_run_logs", run_id=run["run_id"])
    assert any("numpy.dtype size changed" in l["text"] for l in lines)
    err = error(client, "get_run_logs", run_id="0999")
    assert err["code"] == DOMAIN_ERROR and err["data"]["kind"] == "UnknownRun"


def test_query_table_limit(lake):
    ws, _, client = lake
    res = result(client, "query_table", ref="main", plan="from(taxi_trips) | limit(5)")
    assert len(res["rows"]) == 5 and res["columns"][0]["name"] == "trip_id"
    capped = result(client, "query_table", ref="main", plan="from(taxi_trips)", limit=3)
    assert len(capped["rows"]) == 3 and capped["truncated"] and capped["row_count"] == 20
    err = error(client, "query_table", ref="main", plan="from(A) | limit(5)")
    assert err["data"]["kind"] == "UnknownInput"
    err = error(client, "query_table", ref="main", plan="from(taxi_trips) |")
    assert err["data"]["kind"] == "PlanSyntaxError"


def test_request_merge_without_grant(numpy2):
    ws, _ = numpy2
    _, secret = ws.keys.create(parse_grants("read,write:debug/*,write:run/*"))
    client = LocalClient(ws, secret)
    head = ws.catalog.branch_head("main")
    result(client, "create_branch", name="debug/x")
    err = error(client, "request_merge", source="debug/x", target="main")
    assert err["code"] == DOMAIN_ERROR and err["data"]["kind"] == "DENIED"
    assert ws.governance.verifier_runs == 0
    assert ws.catalog.branch_head("main") == head


def test_request_merge_verification_failure_carries_report(lake):
    ws, _, client = lake
    result(client, "create_branch", name="debug/x")
    err = error(client, "request_merge", source="debug/x", target="main")
    assert err["data"]["kind"] == "VERIFICATION_FAILED"
    assert err["data"]["report"]["passed"] is False
    assert any("table A not found" == r["message"] for r in err["data"]["report"]["results"])


def test_write_tools_respect_globs(lake):
    ws, _, client = lake
    assert error(client, "create_branch", name="feature")["data"]["kind"] == "DENIED"
    assert "feature" not in ws.catalog.branches()
    # runs only write their own run branch; main moves through the gate alone
    head = ws.catalog.branch_head("main")
    run = result(client, "run_pipeline", project="p", branch="main")
    assert run["status"] == "FAILED" and run["run_branch"].startswith("run/")
    assert ws.catalog.branch_head("main") == head
    _, secret = ws.keys.create(parse_grants("read,write:debug/*"))
    err = error(LocalClient(ws, secret), "run_pipeline", project="p", branch="main")
    assert err["data"]["kind"] == "DENIED"


def test_tools_match_library(lake):
    """The tool layer adds no behavior: compare each read tool with the library call."""
    ws, manifest, client = lake
    cat = ws.catalog
    runs = [run_summary(r) for r in ws.runs.get_runs()]
    assert result(client, "list_runs") == json.loads(json.dumps(runs))
    rid = runs[0]["run_id"]
    assert [l["text"] for l in result(client, "get_run_logs", run_id=rid)] == \
        [l.text for l in ws.runs.get_run_logs(rid)]
    assert {b["name"]: b["head"] for b in result(client, "list_branches")} == cat.branches()
    assert result(client, "list_tables", ref="main") == cat.list_tables("main")
    snap = cat.resolve_commit("main").table_map["taxi_zones"]
    schema = result(client, "get_table_schema", ref="main", table="taxi_zones")
    assert schema["columns"] == cat.read_schema(snap).to_json()["columns"]
    assert schema["row_count"] == snap.row_count
    plan = "from(taxi_trips) | filter(fare > 10.0) | project(trip_id, fare)"
    got = result(client, "query_table", ref="main", plan=plan)
    want = eval_plan(parse_plan(plan), {"taxi_trips": cat.read_table(
        cat.resolve_commit("main").table_map["taxi_trips"])})
    assert got["rows"] == [[json_safe(v) for v in r] for r in want.rows()]
    base = manifest["main_head"]
    assert result(client, "diff_refs", ref_a=base, ref_b="main") == \
        json.loads(json.dumps(cat.diff(base, "main").to_json()))
    assert result(client, "registry_info", package="numpy") == \
        json.loads(json.dumps(ws.registry().info("numpy")))
    proj = result(client, "get_project", project="p")
    assert proj["code_hash"] == code_hash(load_project(ws.project_dir("p")))
    assert [m["name"] for m in proj["models"]] == ["A", "B"]


def test_set_model_env_then_run(lake):
    ws, _, client = lake
    before = code_hash(load_project(ws.project_dir("p")))
    res = result(client, "set_model_env", project="p", model="A",
                 env={"runtime": "3.10", "pins": {"pandas": "2.0", "numpy": "1.26.4"}})
    assert res["model"]["env"]["pins"]["numpy"] == "1.26.4" and res["code_hash"] != before
    run = result(client, "run_pipeline", project="p", branch="main", no_merge=True)
    assert run["status"] == "SUCCESS" and run["merge_status"] == "SKIPPED"
    merged = result(client, "request_merge", source=run["run_branch"], target="main")
    assert merged["status"] == "MERGED"
    assert ws.catalog.branch_head("main") == merged["commit"]
    err = error(client, "set_model_env", project="p", model="Z",
                env={"runtime": "3.10", "pins": {}})
    assert err["code"] == DOMAIN_ERROR
    err = error(client, "get_project", project="../etc")
    assert err["code"] == DOMAIN_ERROR


def test_read_only_key_cannot_write(numpy2):
    ws, _ = numpy2
    _, secret = ws.keys.create(parse_grants("read"))
    client = LocalClient(ws, secret)
    env = {"runtime": "3.10", "pins": {"pandas": "2.0"}}
    assert error(client, "set_model_env", project="p", model="A", env=env)["data"]["kind"] \
        == "DENIED"


def test_http_and_local_agree(http):
    ws, manifest, remote = http
    local = LocalClient(ws, manifest["agent_key"]["secret"])
    assert remote.list_tools() == local.list_tools()
    for name, args in [("list_runs", {}), ("list_branches", {}),
                       ("list_tables", {"ref": "main"}),
                       ("query_table", {"ref": "main", "plan": "from(taxi_zones) | limit(2)"}),
                       ("get_run_logs", {"run_id": "0404"}),
                       ("nope", {})]:
        assert remote.call_tool(name, args) == local.call_tool(name, args)
    raw = remote.send_raw(b"{")
    assert raw["error"]["code"] == PARSE_ERROR
    assert remote.send_raw(json.dumps({"jsonrpc": "2.0", "id": 1, "method": "tools/list"})
                           .encode(), api_key="")["error"]["code"] == AUTH_ERROR


def test_concurrent_http_calls(http):
    from concurrent.futures import ThreadPoolExecutor
    ws, manifest, remote = http
    url = remote.endpoint
    key = manifest["agent_key"]["secret"]

    def branch(i):
        return RpcClient(url, key).call_tool("create_branch", {"name": f"debug/c{i}"})

    with ThreadPoolExecutor(8) as pool:
        replies = list(pool.map(branch, range(16)))
    assert all("result" in r for r in replies)
    assert {f"debug/c{i}" for i in range(16)} <= set(ws.catalog.branches())


def test_admin_principal_in_library_only(numpy2):
    # tools always authenticate; the local admin never exists on the wire
    ws, _ = numpy2
    assert LOCAL_ADMIN.key_id not in [k["key_id"] for k in ws.keys.list()]
    assert MERGE == "MERGE"
