"""Simulated package registry and declarative environment resolution.

Nothing is installed for real: the registry is a JSON document listing
versions, dependency ranges and known-bad combinations. Resolution is a
single deterministic pass (pins first, then the newest allowed version of
each unpinned dependency) with no backtracking, so "an unpinned dependency
drifted to its latest release" is reproducible.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import UnknownPackage, UnknownVersion, Unsatisfiable
from .pipeline import EnvSpec

_VERSION_RE = re.compile(r"\d+(\.\d+)*\Z")
_CONSTRAINT_RE = re.compile(r"\s*(==|>=|<)\s*(\d+(?:\.\d+)*)\s*\Z")


def parse_version(v: str) -> tuple[int, ...]:
    if not isinstance(v, str) or not _VERSION_RE.match(v):
        raise ValueError(f"invalid version {v!r}")
    return tuple(int(x) for x in v.split("."))


def compare_versions(a: str, b: str) -> int:
    """Numeric per-component comparison; missing components count as 0."""
    pa, pb = parse_version(a), parse_version(b)
    n = max(len(pa), len(pb))
    pa += (0,) * (n - len(pa))
    pb += (0,) * (n - len(pb))
    return (pa > pb) - (pa < pb)


def version_key(v: str) -> tuple[int, ...]:
    """Sort key agreeing with ``compare_versions`` (pads to 8 components)."""
    p = parse_version(v)
    return p + (0,) * max(0, 8 - len(p))


@dataclass(frozen=True)
class VersionRange:
    """Conjunction of ``==v``, ``>=v`` and ``<v`` constraints."""

    constraints: tuple[tuple[str, str], ...]

    @classmethod
    def parse(cls, text: str) -> VersionRange:
        parts = [p for p in text.split(",") if p.strip()]
        if not parts:
            raise ValueError(f"empty version range {text!r}")
        out = []
        for p in parts:
            m = _CONSTRAINT_RE.match(p)
            if not m:
                raise ValueError(f"invalid constraint {p.strip()!r} in range {text!r}")
            out.append((m.group(1), m.group(2)))
        return cls(tuple(out))

    @classmethod
    def exact(cls, version: str) -> VersionRange:
        parse_version(version)
        return cls((("==", version),))

    def contains(self, version: str) -> bool:
        for op, v in self.constraints:
            c = compare_versions(version, v)
            if op == "==" and c != 0 or op == ">=" and c < 0 or op == "<" and c >= 0:
                return False
        return True

    def __str__(self) -> str:
        return ",".join(op + v for op, v in self.constraints)


def parse_requirement(text: str) -> tuple[str, VersionRange]:
    """``"pandas@2.0"`` (exact) or ``"numpy@>=2.0.0"`` (range)."""
    name, sep, rest = text.partition("@")
    if not sep or not name:
        raise ValueError(f"requirement must look like pkg@version: {text!r}")
    rest = rest.strip()
    rng = VersionRange.parse(rest) if rest[:1] in "=<>" else VersionRange.exact(rest)
    return name.strip(), rng


@dataclass(frozen=True)
class Dependency:
    pkg: str
    range: VersionRange


@dataclass(frozen=True)
class ConflictRule:
    a: str
    b: str
    message: str

    def sides(self) -> list[tuple[str, VersionRange]]:
        return [parse_requirement(self.a), parse_requirement(self.b)]

    def matches(self, installed: Mapping[str, str]) -> bool:
        for pkg, rng in self.sides():
            if pkg not in installed or not rng.contains(installed[pkg]):
                return False
        return True

    def to_json(self) -> dict:
        return {"a": self.a, "b": self.b, "message": self.message}


@dataclass(frozen=True)
class PackageInfo:
    versions: tuple[str, ...]
    latest: str


@dataclass
class PackageRegistry:
    packages: dict[str, PackageInfo] = field(default_factory=dict)
    dependencies: dict[str, tuple[Dependency, ...]] = field(default_factory=dict)
    conflicts: list[ConflictRule] = field(default_factory=list)

    @classmethod
    def from_json(cls, obj: Mapping) -> PackageRegistry:
        packages = {}
        for name, info in obj.get("packages", {}).items():
            versions = tuple(info["versions"])
            for v in versions:
                parse_version(v)
            latest = info.get("latest", max(versions, key=version_key))
            if latest not in versions:
                raise ValueError(f"latest {latest!r} of {name!r} is not a listed version")
            packages[name] = PackageInfo(versions, latest)
        deps = {}
        for key, items in obj.get("dependencies", {}).items():
            parse_requirement(key)
            deps[key] = tuple(Dependency(d["pkg"], VersionRange.parse(d["range"])) for d in items)
        conflicts = [ConflictRule(c["a"], c["b"], c["message"]) for c in obj.get("conflicts", [])]
        for c in conflicts:
            c.sides()
        return cls(packages, deps, conflicts)

    @classmethod
    def load(cls, path: str | os.PathLike) -> PackageRegistry:
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))

    def to_json(self) -> dict:
        return {
            "packages": {n: {"versions": list(p.versions), "latest": p.latest}
                         for n, p in sorted(self.packages.items())},
            "dependencies": {k: [{"pkg": d.pkg, "range": str(d.range)} for d in v]
                             for k, v in sorted(self.dependencies.items())},
            "conflicts": [c.to_json() for c in self.conflicts],
        }

    def canonical_version(self, pkg: str, version: str) -> str:
        """The registry's spelling of ``version`` (``2.0`` matches ``2.0.0``)."""
        if pkg not in self.packages:
            raise UnknownPackage(f"package {pkg!r} is not in the registry")
        try:
            for v in self.packages[pkg].versions:
                if compare_versions(v, version) == 0:
                    return v
        except ValueError:
            pass
        raise UnknownVersion(f"{pkg} {version} is not in the registry")

    def deps_of(self, pkg: str, version: str) -> tuple[Dependency, ...]:
        for key, deps in self.dependencies.items():
            name, rng = parse_requirement(key)
            if name == pkg and rng.contains(version):
                return deps
        return ()

    def newest_matching(self, pkg: str, rng: VersionRange) -> str | None:
        """Greatest version satisfying ``rng`` that is not newer than ``latest``."""
        info = self.packages[pkg]
        ok = [v for v in info.versions
              if rng.contains(v) and compare_versions(v, info.latest) <= 0]
        return max(ok, key=version_key) if ok else None

    def info(self, pkg: str) -> dict:
        if pkg not in self.packages:
            raise UnknownPackage(f"package {pkg!r} is not in the registry")
        p = self.packages[pkg]
        return {
            "name": pkg,
            "versions": list(p.versions),
            "latest": p.latest,
            "dependencies": {k: [{"pkg": d.pkg, "range": str(d.range)} for d in v]
                             for k, v in sorted(self.dependencies.items())
                             if parse_requirement(k)[0] == pkg},
            "conflicts": [c.to_json() for c in self.conflicts
                          if pkg in (parse_requirement(c.a)[0], parse_requirement(c.b)[0])],
        }


PINNED = "PINNED"
TRANSITIVE = "TRANSITIVE"


@dataclass(frozen=True)
class ResolvedEnv:
    runtime_version: str
    installed: dict[str, str]
    provenance: dict[str, str]

    def to_json(self) -> dict:
        return {"runtime": self.runtime_version,
                "installed": dict(sorted(self.installed.items())),
                "provenance": dict(sorted(self.provenance.items()))}


def resolve_env(spec: EnvSpec, registry: PackageRegistry) -> ResolvedEnv:
    installed: dict[str, str] = {}
    provenance: dict[str, str] = {}
    for pkg in sorted(spec.pins):
        installed[pkg] = registry.canonical_version(pkg, spec.pins[pkg])
        provenance[pkg] = PINNED
    queue = sorted(installed)
    i = 0
    while i < len(queue):
        pkg = queue[i]
        i += 1
        for dep in registry.deps_of(pkg, installed[pkg]):
            if dep.pkg in installed:
                if not dep.range.contains(installed[dep.pkg]):
                    raise Unsatisfiable(
                        f"{pkg} {installed[pkg]} needs {dep.pkg}{dep.range}, "
                        f"but {dep.pkg} {installed[dep.pkg]} is {provenance[dep.pkg].lower()}")
                continue
            if dep.pkg not in registry.packages:
                raise UnknownPackage(f"{pkg} depends on unknown package {dep.pkg!r}")
            v = registry.newest_matching(dep.pkg, dep.range)
            if v is None:
                raise Unsatisfiable(f"no version of {dep.pkg} satisfies {dep.range}")
            installed[dep.pkg] = v
            provenance[dep.pkg] = TRANSITIVE
            queue.append(dep.pkg)
    return ResolvedEnv(spec.runtime_version, installed, provenance)


@dataclass(frozen=True)
class Violation:
    packages: tuple[str, ...]

    def __bool__(self) -> bool:
        return True

    def __str__(self) -> str:
        return "packages not on the whitelist: " + ", ".join(self.packages)


def check_whitelist(spec: EnvSpec, whitelist: Iterable[str]) -> Violation | None:
    """``None`` when every pinned package is allowed, else the offenders."""
    allowed = set(whitelist)
    bad = tuple(sorted(p for p in spec.pins if p not in allowed))
    return Violation(bad) if bad else None


def check_conflicts(env: ResolvedEnv, registry: PackageRegistry) -> ConflictRule | None:
    """First registry conflict rule whose two sides are both installed."""
    for rule in registry.conflicts:
        if rule.matches(env.installed):
            return rule
    return None
