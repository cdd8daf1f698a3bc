"""On-disk workspace: one directory holding the catalog and everything around it.

::

    workspace.json            marker
    objects/ refs.json reflog.jsonl
    keys.json verifiers.json registry.json whitelist.json
    projects/<name>/          workspace-hosted pipeline projects
    runs/<run_id>/record.json, logs.jsonl
    scenario.json episodes/
"""
from __future__ import annotations

import json
import os
import shutil
import time
from pathlib import Path
from typing import Callable

from .env import PackageRegistry
from .errors import AccessDenied, WorkspaceError
from .governance import WRITE, Governance, KeyStore, Principal, VerifierStore, authorize
from .pipeline import load_project
from .store import Catalog, DirBackend, TableSnapshot
from .table import Schema, Table, import_csv

MARKER = "workspace.json"


class Workspace:
    def __init__(self, root: str | os.PathLike, clock: Callable[[], float] = time.time):
        self.root = Path(root)
        if not (self.root / MARKER).exists():
            raise WorkspaceError(f"{self.root} is not a workspace (run `init` first)")
        self.clock = clock
        self.catalog = Catalog(DirBackend(self.root), clock=clock)
        self.keys = KeyStore(self.root / "keys.json")
        self.verifiers = VerifierStore(self.root / "verifiers.json")
        self.governance = Governance(self.catalog, self.keys, self.verifiers)
        from .runs import RunEngine
        self.runs = RunEngine(self)

    @classmethod
    def init(cls, root: str | os.PathLike, clock: Callable[[], float] = time.time) -> Workspace:
        root = Path(root)
        if (root / MARKER).exists():
            raise WorkspaceError(f"{root} is already a workspace")
        root.mkdir(parents=True, exist_ok=True)
        for sub in ("projects", "runs", "episodes"):
            (root / sub).mkdir(exist_ok=True)
        (root / MARKER).write_text(json.dumps({"format": 1}) + "\n", "utf-8")
        ws = cls(root, clock)
        ws.catalog.init_main(timestamp=int(clock()))
        return ws

    # registry and whitelist

    @property
    def registry_path(self) -> Path:
        return self.root / "registry.json"

    def registry(self) -> PackageRegistry:
        if not self.registry_path.exists():
            return PackageRegistry()
        return PackageRegistry.load(self.registry_path)

    def install_registry(self, source: str | os.PathLike | PackageRegistry) -> None:
        reg = source if isinstance(source, PackageRegistry) else PackageRegistry.load(source)
        self.registry_path.write_text(json.dumps(reg.to_json(), indent=2) + "\n", "utf-8")

    def whitelist(self) -> set[str]:
        """Allowed package names; defaults to everything the registry knows."""
        path = self.root / "whitelist.json"
        if path.exists():
            return set(json.loads(path.read_text("utf-8")))
        return set(self.registry().packages)

    def set_whitelist(self, packages) -> None:
        (self.root / "whitelist.json").write_text(json.dumps(sorted(packages)) + "\n", "utf-8")

    # projects

    def project_dir(self, name: str) -> Path:
        if not name or "/" in name or "\\" in name or name.startswith("."):
            raise WorkspaceError(f"invalid project name {name!r}")
        path = self.root / "projects" / name
        if not (path / "pipeline.json").exists():
            raise WorkspaceError(f"no project {name!r} in workspace")
        return path

    def install_project(self, source: str | os.PathLike, name: str | None = None) -> Path:
        spec = load_project(source)
        dest = self.root / "projects" / (name or spec.name)
        if dest.exists():
            raise WorkspaceError(f"project {dest.name!r} already installed")
        shutil.copytree(source, dest)
        return dest

    # tables

    def write_table(self, branch: str, name: str, table: Table, principal: Principal,
                    message: str | None = None) -> TableSnapshot:
        decision = authorize(principal, WRITE, branch)
        if not decision:
            raise AccessDenied(decision.reason)
        snap = self.catalog.put_table(table)
        self.catalog.advance_branch(branch, {name: snap}, message or f"import {name}",
                                    principal.key_id)
        return snap

    def import_csv(self, branch: str, name: str, csv_bytes: bytes, schema: Schema,
                   principal: Principal) -> TableSnapshot:
        return self.write_table(branch, name, import_csv(csv_bytes, schema), principal)
