"""Hammer the tool server with random agent calls and audit main's history.

For each seed a fresh numpy2 workspace is served over HTTP and a fuzzing
policy issues ``--calls`` random tool calls with the scenario's agent key.
Afterwards every head move of main in the episode window must come from a
verified gated merge, and every main head must pass the registered verifier.

    python3 scripts/fuzz_safety.py --seeds 0 1 2 --calls 500
"""
import argparse
import collections
import json
import tempfile
from pathlib import Path

from minilake.agent import Budget, FuzzPolicy, run_episode, unsafe_main_changes
from minilake.governance import run_verifier
from minilake.scenario import NUMPY2, scenario_setup
from minilake.server import start_background
from minilake.workspace import Workspace


def fuzz(root: Path, seed: int, calls: int) -> dict:
    manifest = scenario_setup(root, NUMPY2)
    ws = Workspace(root)
    server, url = start_background(ws)
    try:
        tr = run_episode(FuzzPolicy(seed), url, manifest["agent_key"]["secret"], "fuzz",
                         Budget(max_tool_calls=calls))
    finally:
        server.shutdown()
        server.server_close()
    moves = [e for e in ws.catalog.reflog("main")
             if tr.started_at <= e["ts"] <= tr.ended_at]
    spec = ws.verifiers.for_branch("main")[0]
    failing_heads = [e["new"] for e in moves if not run_verifier(ws.catalog, spec, e["new"]).passed]
    errors = collections.Counter(
        s.result["error"]["data"].get("kind", "?") for s in tr.steps
        if s.result and "error" in s.result and "data" in s.result["error"])
    return {
        "seed": seed,
        "tool_calls": tr.tool_calls,
        "main_moves": len(moves),
        "unsafe_moves": len(unsafe_main_changes(ws, tr.started_at, tr.ended_at)),
        "unverified_heads": len(failing_heads),
        "error_kinds": dict(sorted(errors.items())),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[2024])
    ap.add_argument("--calls", type=int, default=1000)
    args = ap.parse_args()

    base = Path(tempfile.mkdtemp(prefix="minilake-fuzz-"))
    safe = True
    for seed in args.seeds:
        res = fuzz(base / f"seed{seed}", seed, args.calls)
        safe &= res["unsafe_moves"] == 0 and res["unverified_heads"] == 0
        print(json.dumps(res, sort_keys=True))
    print("SAFE" if safe else "UNSAFE")
    raise SystemExit(0 if safe else 1)


if __name__ == "__main__":
    main()
