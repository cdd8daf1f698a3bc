"""Declarative pipeline projects.

A project directory holds ``pipeline.json`` and one plan file per model::

    {"name": "p",
     "models": [{"name": "A", "inputs": ["taxi_trips", "taxi_zones"], "plan": "a.plan",
                 "materialization": "REPLACE",
                 "env": {"runtime": "3.10", "pins": {"pandas": "2.0"}}}]}

Model inputs that name another model are DAG edges; every other input is a
source table read from the catalog at run time.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import os
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

from .errors import CycleError, ManifestError
from .store import canonical_json
from .table import Plan, parse_plan

MANIFEST = "pipeline.json"
MATERIALIZATIONS = ("REPLACE", "NONE")


@dataclass(frozen=True)
class EnvSpec:
    runtime_version: str
    pins: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.runtime_version:
            raise ManifestError("env runtime version must be non-empty")
        for pkg, ver in self.pins.items():
            if not pkg or pkg != pkg.lower():
                raise ManifestError(f"package names must be lowercase: {pkg!r}")
            if not isinstance(ver, str) or not ver:
                raise ManifestError(f"pin for {pkg!r} must be a non-empty version string")

    def to_json(self) -> dict:
        return {"runtime": self.runtime_version, "pins": dict(sorted(self.pins.items()))}

    @classmethod
    def from_json(cls, obj) -> EnvSpec:
        if not isinstance(obj, dict):
            raise ManifestError("env must be an object")
        pins = obj.get("pins", {})
        if not isinstance(pins, dict):
            raise ManifestError("env.pins must be an object")
        return cls(str(obj.get("runtime", "")), {str(k): v for k, v in pins.items()})


@dataclass(frozen=True)
class ModelNode:
    name: str
    inputs: tuple[str, ...]
    plan_file: str
    materialization: str
    env: EnvSpec
    plan: Plan

    def to_json(self) -> dict:
        return {"name": self.name, "inputs": list(self.inputs), "plan": self.plan_file,
                "materialization": self.materialization, "env": self.env.to_json()}


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    models: tuple[ModelNode, ...]
    project_dir: Path

    def model(self, name: str) -> ModelNode:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(name)

    @property
    def model_names(self) -> set[str]:
        return {m.name for m in self.models}

    def source_tables(self) -> list[str]:
        names = self.model_names
        return sorted({i for m in self.models for i in m.inputs if i not in names})

    def to_json(self) -> dict:
        return {"name": self.name, "models": [m.to_json() for m in self.models]}


def _read_manifest(project_dir: Path) -> dict:
    path = project_dir / MANIFEST
    try:
        return json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"missing manifest {path}") from None
    except (OSError, ValueError) as exc:
        raise ManifestError(f"unreadable manifest {path}: {exc}") from exc


def _plan_path(project_dir: Path, rel: str) -> Path:
    p = PurePosixPath(rel.replace("\\", "/"))
    if p.is_absolute() or ".." in p.parts:
        raise ManifestError(f"plan path must stay inside the project: {rel!r}")
    return project_dir.joinpath(*p.parts)


def load_project(project_dir: str | os.PathLike) -> PipelineSpec:
    project_dir = Path(project_dir)
    raw = _read_manifest(project_dir)
    if not isinstance(raw, dict) or not isinstance(raw.get("models"), list):
        raise ManifestError("manifest needs a 'models' list")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise ManifestError("manifest needs a non-empty 'name'")
    models, seen = [], set()
    for i, m in enumerate(raw["models"]):
        if not isinstance(m, dict):
            raise ManifestError(f"models[{i}] must be an object")
        mname = m.get("name")
        if not isinstance(mname, str) or not mname:
            raise ManifestError(f"models[{i}] needs a name")
        if mname in seen:
            raise ManifestError(f"duplicate model name {mname!r}")
        seen.add(mname)
        inputs = m.get("inputs")
        if not isinstance(inputs, list) or not inputs or not all(isinstance(x, str) for x in inputs):
            raise ManifestError(f"model {mname!r} needs a non-empty list of inputs")
        if mname in inputs:
            raise CycleError([mname, mname])
        mat = m.get("materialization", "REPLACE")
        if mat not in MATERIALIZATIONS:
            raise ManifestError(f"model {mname!r}: materialization must be one of {MATERIALIZATIONS}")
        rel = m.get("plan")
        if not isinstance(rel, str):
            raise ManifestError(f"model {mname!r} needs a plan file")
        path = _plan_path(project_dir, rel)
        try:
            text = path.read_text("utf-8")
        except FileNotFoundError:
            raise ManifestError(f"model {mname!r}: missing plan file {path}") from None
        plan = parse_plan(text, source=str(path))
        unknown = [x for x in plan.inputs() if x not in inputs]
        if unknown:
            raise ManifestError(f"model {mname!r}: plan reads undeclared inputs {unknown}")
        models.append(ModelNode(mname, tuple(inputs), rel, mat,
                                EnvSpec.from_json(m.get("env", {})), plan))
    if not models:
        raise ManifestError("manifest declares no models")
    spec = PipelineSpec(name, tuple(models), project_dir)
    build_dag(spec)
    return spec


def _find_cycle(spec: PipelineSpec, remaining: set[str]) -> list[str]:
    # every node left over by Kahn's algorithm still has a leftover dependency
    names = spec.model_names
    path, pos = [], {}
    node = min(remaining)
    while node not in pos:
        pos[node] = len(path)
        path.append(node)
        node = min(i for i in spec.model(node).inputs if i in names and i in remaining)
    cyc = path[pos[node]:][::-1]  # producer -> consumer order
    k = cyc.index(min(cyc))
    cyc = cyc[k:] + cyc[:k]
    return cyc + [cyc[0]]


def build_dag(spec: PipelineSpec) -> list[ModelNode]:
    """Topological order, lexicographic among ready nodes."""
    names = spec.model_names
    deps = {m.name: {i for i in m.inputs if i in names} for m in spec.models}
    ready = [n for n, d in deps.items() if not d]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for m, d in deps.items():
            if n in d:
                d.discard(n)
                if not d:
                    heapq.heappush(ready, m)
    if len(order) < len(names):
        raise CycleError(_find_cycle(spec, names - set(order)))
    return [spec.model(n) for n in order]


def code_hash(spec: PipelineSpec) -> str:
    """SHA-256 over the manifest and plan file bytes, keyed by project-relative POSIX path."""
    root = spec.project_dir
    files = {MANIFEST: (root / MANIFEST).read_bytes()}
    for m in spec.models:
        key = str(PurePosixPath(m.plan_file.replace("\\", "/")))
        files[key] = _plan_path(root, m.plan_file).read_bytes()
    entries = [[k, hashlib.sha256(v).hexdigest()] for k, v in sorted(files.items())]
    return hashlib.sha256(canonical_json(entries)).hexdigest()


def write_model_env(project_dir: str | os.PathLike, model: str, env: EnvSpec) -> PipelineSpec:
    """Rewrite one model's env block in ``pipeline.json``; plan files are untouched."""
    project_dir = Path(project_dir)
    raw = _read_manifest(project_dir)
    for m in raw.get("models", []):
        if m.get("name") == model:
            m["env"] = env.to_json()
            break
    else:
        raise ManifestError(f"no model {model!r} in project")
    tmp = project_dir / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(raw, indent=2) + "\n", "utf-8")
    os.replace(tmp, project_dir / MANIFEST)
    return load_project(project_dir)


__all__ = ["EnvSpec", "ModelNode", "PipelineSpec", "build_dag", "code_hash", "load_project",
           "write_model_env"]
