"""Fault-injection scenarios for repair episodes.

``numpy2`` reproduces the failure mode where an unpinned transitive
dependency (numpy) drifts to a new major release that crashes the pinned
pandas: the registry's ``latest`` for numpy is 2.0.0 and the setup run of
project P fails at step A. ``healthy`` uses the same fixtures with numpy
latest at 1.26.4, and its setup run succeeds.
"""
from __future__ import annotations

import json
import os
import time
from pathlib import Path
from typing import Callable

from .errors import WorkspaceError
from .fixtures import fixture_path
from .governance import ADMIN, Grant, Principal, VerifierSpec, parse_grants
from .table import Schema
from .workspace import Workspace

HEALTHY = "healthy"
NUMPY2 = "numpy2"
VARIANTS = (HEALTHY, NUMPY2)
AGENT_GRANTS = "read,write:debug/*,write:run/*,merge:main"
PROJECT = "p"


def import_taxi_fixtures(ws: Workspace, principal: Principal, branch: str = "main") -> dict:
    manifest = json.loads(fixture_path("taxi", "manifest.json").read_text("utf-8"))
    counts = {}
    for name, meta in sorted(manifest["tables"].items()):
        schema = Schema.from_json(json.loads(fixture_path("taxi", meta["schema"]).read_text()))
        data = fixture_path("taxi", meta["csv"]).read_bytes()
        counts[name] = ws.import_csv(branch, name, data, schema, principal).row_count
    return counts


def scenario_setup(workspace_dir: str | os.PathLike, variant: str = NUMPY2,
                   agent_merge_grant: bool = True,
                   clock: Callable[[], float] = time.time) -> dict:
    """Build a workspace for a repair episode and write ``scenario.json``.

    With ``agent_merge_grant=False`` the agent key lacks ``merge:main`` so
    only a human can promote a repair.
    """
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown scenario variant {variant!r}; pick one of {VARIANTS}")
    root = Path(workspace_dir)
    if root.exists() and any(root.iterdir()):
        raise WorkspaceError(f"scenario setup needs an empty workspace, {root} is not empty")
    ws = Workspace.init(root, clock=clock)

    admin_id, admin_secret = ws.keys.create([Grant(ADMIN)], key_id="admin")
    admin = Principal(admin_id, (Grant(ADMIN),))
    grants = AGENT_GRANTS if agent_merge_grant else AGENT_GRANTS.replace(",merge:main", "")
    agent_id, agent_secret = ws.keys.create(parse_grants(grants), key_id="agent")

    counts = import_taxi_fixtures(ws, admin)
    ws.install_project(fixture_path("p"), PROJECT)
    ws.verifiers.register(admin, VerifierSpec.from_json(
        json.loads(fixture_path("verifier_main.json").read_text("utf-8"))))
    registry = "registry_numpy2.json" if variant == NUMPY2 else "registry_ok.json"
    ws.install_registry(fixture_path(registry))
    ws.set_whitelist(json.loads(fixture_path("whitelist.json").read_text("utf-8")))

    rec = ws.runs.run_pipeline(ws.project_dir(PROJECT), "main", admin)
    manifest = {
        "variant": variant,
        "project": PROJECT,
        "tables": counts,
        "admin_key": {"key_id": admin_id, "secret": admin_secret},
        "agent_key": {"key_id": agent_id, "secret": agent_secret, "grants": grants.split(",")},
        "setup_run": {"run_id": rec.run_id, "status": rec.status,
                      "failed_step": rec.failed_step},
        "main_head": ws.catalog.branch_head("main"),
    }
    (root / "scenario.json").write_text(json.dumps(manifest, indent=2) + "\n", "utf-8")
    return manifest


def load_scenario(workspace_dir: str | os.PathLike) -> dict:
    path = Path(workspace_dir) / "scenario.json"
    if not path.exists():
        raise WorkspaceError(f"no scenario.json in {workspace_dir}; run `scenario setup` first")
    return json.loads(path.read_text("utf-8"))
