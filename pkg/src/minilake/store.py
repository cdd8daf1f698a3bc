"""Content-addressed object store and the branch/commit catalog.

Objects are immutable byte strings named by their SHA-256. Commits are
objects too: a commit's id is the hash of its canonical JSON encoding
(sorted keys, no whitespace, integer UTC seconds). Branch heads are the only
mutable state and move exclusively through compare-and-swap.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from filelock import FileLock

from .errors import (DanglingReference, DuplicateBranch, InvalidBranchName, MergeConflict,
                     MergeContention, NotAnAncestor, ProtectedBranch, StorageError, UnknownBranch,
                     UnknownRef)
from .table import Schema, Table, decode_table, encode_table

BRANCH_RE = re.compile(r"[a-z0-9_/-]+\Z")
HEX_RE = re.compile(r"[0-9a-f]{64}\Z")
PROTECTED_BRANCHES = frozenset({"main"})
MERGE_ATTEMPTS = 3


def object_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class TableSnapshot:
    schema_id: str
    data_id: str
    row_count: int

    def to_json(self) -> dict:
        return {"schema_id": self.schema_id, "data_id": self.data_id, "row_count": self.row_count}

    @classmethod
    def from_json(cls, obj: Mapping) -> TableSnapshot:
        return cls(obj["schema_id"], obj["data_id"], int(obj["row_count"]))


@dataclass(frozen=True, eq=False)
class Commit:
    id: str
    parents: tuple[str, ...]
    table_map: Mapping[str, TableSnapshot]
    message: str
    author: str
    timestamp: int
    code_hash: str | None = None

    @staticmethod
    def encode(parents, table_map, message, author, timestamp, code_hash) -> bytes:
        return canonical_json({
            "author": author,
            "code_hash": code_hash,
            "message": message,
            "parents": list(parents),
            "table_map": {k: v.to_json() for k, v in table_map.items()},
            "timestamp": int(timestamp),
        })

    @classmethod
    def decode(cls, oid: str, data: bytes) -> Commit:
        try:
            obj = json.loads(data.decode("utf-8"))
            return cls(
                id=oid,
                parents=tuple(obj["parents"]),
                table_map={k: TableSnapshot.from_json(v) for k, v in obj["table_map"].items()},
                message=obj["message"],
                author=obj["author"],
                timestamp=obj["timestamp"],
                code_hash=obj["code_hash"],
            )
        except (UnicodeDecodeError, ValueError, KeyError, TypeError, AttributeError):
            raise UnknownRef(f"{oid} is not a commit") from None

    def __eq__(self, other):
        return isinstance(other, Commit) and other.id == self.id

    def __hash__(self):
        return hash(self.id)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "parents": list(self.parents),
            "table_map": {k: v.to_json() for k, v in sorted(self.table_map.items())},
            "message": self.message,
            "author": self.author,
            "timestamp": self.timestamp,
            "code_hash": self.code_hash,
        }


@dataclass(frozen=True)
class BranchRef:
    name: str
    head: str


@dataclass(frozen=True)
class TableDiffSet:
    added: frozenset[str] = frozenset()
    removed: frozenset[str] = frozenset()
    changed: Mapping[str, tuple[TableSnapshot, TableSnapshot]] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not (self.added or self.removed or self.changed)

    def to_json(self) -> dict:
        return {
            "added": sorted(self.added),
            "removed": sorted(self.removed),
            "changed": {k: {"old": a.to_json(), "new": b.to_json()}
                        for k, (a, b) in sorted(self.changed.items())},
        }


# ---------------------------------------------------------------- backends


class MemoryBackend:
    """Dict-backed storage for tests."""

    def __init__(self):
        self._objects: dict[str, bytes] = {}
        self._refs: dict[str, str] = {}
        self._reflog: list[dict] = []
        self._lock = threading.Lock()
        self.writes = 0

    def has(self, oid: str) -> bool:
        return oid in self._objects

    def get(self, oid: str) -> bytes | None:
        return self._objects.get(oid)

    def put(self, oid: str, data: bytes) -> None:
        with self._lock:
            if oid not in self._objects:
                self._objects[oid] = bytes(data)
                self.writes += 1

    def object_count(self) -> int:
        return len(self._objects)

    def refs(self) -> dict[str, str]:
        with self._lock:
            return dict(self._refs)

    def cas(self, name: str, expected: str | None, new: str | None, meta: dict) -> bool:
        with self._lock:
            if self._refs.get(name) != expected:
                return False
            if new is None:
                del self._refs[name]
            else:
                self._refs[name] = new
            self._reflog.append({"seq": len(self._reflog), "branch": name, "old": expected,
                                 "new": new, "ts": time.time(), **meta})
            self.writes += 1
            return True

    def reflog(self) -> list[dict]:
        with self._lock:
            return list(self._reflog)


class DirBackend:
    """``objects/<first2>/<hex>`` files plus a ``refs.json`` replaced by atomic rename.

    Ref updates take a file lock so separate processes (CLI next to a running
    server) still get compare-and-swap semantics. Every successful update is
    appended to ``reflog.jsonl``.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.objects_dir = self.root / "objects"
        self.refs_path = self.root / "refs.json"
        self.reflog_path = self.root / "reflog.jsonl"
        self.objects_dir.mkdir(parents=True, exist_ok=True)
        self._thread_lock = threading.Lock()
        self._file_lock = FileLock(str(self.root / "refs.lock"))
        self.writes = 0

    def _path(self, oid: str) -> Path:
        return self.objects_dir / oid[:2] / oid

    def has(self, oid: str) -> bool:
        return self._path(oid).exists()

    def get(self, oid: str) -> bytes | None:
        try:
            return self._path(oid).read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise StorageError(f"reading object {oid}: {exc}") from exc

    def put(self, oid: str, data: bytes) -> None:
        path = self._path(oid)
        if path.exists():
            return
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise StorageError(f"writing object {oid}: {exc}") from exc
        self.writes += 1

    def object_count(self) -> int:
        return sum(1 for p in self.objects_dir.glob("*/*") if not p.name.startswith("."))

    def refs(self) -> dict[str, str]:
        try:
            return json.loads(self.refs_path.read_text("utf-8"))
        except FileNotFoundError:
            return {}
        except (OSError, ValueError) as exc:
            raise StorageError(f"reading refs: {exc}") from exc

    def cas(self, name: str, expected: str | None, new: str | None, meta: dict) -> bool:
        with self._thread_lock, self._file_lock:
            refs = self.refs()
            if refs.get(name) != expected:
                return False
            if new is None:
                del refs[name]
            else:
                refs[name] = new
            fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".refs-")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(refs, f, sort_keys=True, indent=1)
            os.replace(tmp, self.refs_path)
            entry = {"branch": name, "old": expected, "new": new, "ts": time.time(), **meta}
            with open(self.reflog_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
            self.writes += 1
            return True

    def reflog(self) -> list[dict]:
        try:
            lines = self.reflog_path.read_text("utf-8").splitlines()
        except FileNotFoundError:
            return []
        return [dict(json.loads(l), seq=i) for i, l in enumerate(lines) if l.strip()]


# ---------------------------------------------------------------- catalog


@dataclass(frozen=True)
class MergePlan:
    """A prepared merge: the commit the target should move to, and from where."""

    kind: str  # "noop" | "fast_forward" | "merge"
    target: str
    expected_head: str
    result: str


class Catalog:
    def __init__(self, backend=None, clock: Callable[[], float] = time.time):
        self.backend = backend if backend is not None else MemoryBackend()
        self.clock = clock
        self._commits: dict[str, Commit] = {}  # commits are immutable, so caching is safe

    # objects

    def put_object(self, data: bytes) -> str:
        oid = object_id(data)
        self.backend.put(oid, data)
        return oid

    def get_object(self, oid: str) -> bytes:
        data = self.backend.get(oid)
        if data is None:
            raise UnknownRef(f"no object {oid}")
        return data

    def put_table(self, table: Table) -> TableSnapshot:
        schema_id = self.put_object(table.schema.canonical_bytes())
        data_id = self.put_object(encode_table(table))
        return TableSnapshot(schema_id, data_id, table.row_count)

    def read_table(self, snap: TableSnapshot) -> Table:
        return decode_table(self.get_object(snap.data_id))

    def read_schema(self, snap: TableSnapshot) -> Schema:
        return Schema.from_json(json.loads(self.get_object(snap.schema_id)))

    # commits

    def get_commit(self, oid: str) -> Commit:
        if not isinstance(oid, str) or not HEX_RE.match(oid):
            raise UnknownRef(f"not a commit id: {oid!r}")
        c = self._commits.get(oid)
        if c is None:
            c = self._commits[oid] = Commit.decode(oid, self.get_object(oid))
        return c

    def _write_commit(self, parents: Iterable[str], table_map: Mapping[str, TableSnapshot],
                      message: str, author: str, code_hash: str | None = None,
                      timestamp: int | None = None) -> Commit:
        parents = tuple(parents)
        for p in parents:
            self.get_commit(p)
        for name, snap in table_map.items():
            for oid in (snap.schema_id, snap.data_id):
                if not self.backend.has(oid):
                    raise DanglingReference(f"table {name!r} references missing object {oid}")
        ts = int(self.clock()) if timestamp is None else int(timestamp)
        table_map = dict(sorted(table_map.items()))
        data = Commit.encode(parents, table_map, message, author, ts, code_hash)
        oid = self.put_object(data)
        c = Commit(oid, parents, table_map, message, author, ts, code_hash)
        self._commits[oid] = c
        return c

    def commit(self, parent: str | None, table_map: Mapping[str, TableSnapshot], message: str,
               author: str, code_hash: str | None = None, timestamp: int | None = None) -> Commit:
        """Persist a commit (not attached to any branch)."""
        return self._write_commit([parent] if parent else [], table_map, message, author,
                                  code_hash, timestamp)

    # refs

    def branches(self) -> dict[str, str]:
        return self.backend.refs()

    def branch_head(self, name: str) -> str:
        head = self.backend.refs().get(name)
        if head is None:
            raise UnknownBranch(f"no branch {name!r}")
        return head

    def resolve_ref(self, ref: str) -> str:
        head = self.backend.refs().get(ref)
        if head is not None:
            return head
        if isinstance(ref, str) and HEX_RE.match(ref) and self.backend.has(ref):
            return self.get_commit(ref).id
        raise UnknownRef(f"unknown ref {ref!r}")

    def resolve_commit(self, ref: str) -> Commit:
        return self.get_commit(self.resolve_ref(ref))

    def init_main(self, author: str = "system", timestamp: int | None = None) -> Commit:
        """Create the root commit and ``main`` if the catalog is empty."""
        if "main" in self.branches():
            return self.resolve_commit("main")
        root = self.commit(None, {}, "init", author, timestamp=timestamp)
        self.backend.cas("main", None, root.id, {"reason": "init"})
        return root

    def create_branch(self, name: str, from_ref: str) -> BranchRef:
        if not isinstance(name, str) or not BRANCH_RE.match(name):
            raise InvalidBranchName(f"invalid branch name {name!r}")
        head = self.resolve_ref(from_ref)
        if not self.backend.cas(name, None, head, {"reason": "create"}):
            raise DuplicateBranch(f"branch {name!r} already exists")
        return BranchRef(name, head)

    def delete_branch(self, name: str) -> None:
        if name in PROTECTED_BRANCHES:
            raise ProtectedBranch(f"branch {name!r} is protected")
        head = self.branch_head(name)
        if not self.backend.cas(name, head, None, {"reason": "delete"}):
            raise MergeContention(f"branch {name!r} moved during delete")

    def update_branch_cas(self, name: str, expected_head: str, new_head: str,
                          reason: str = "update", **meta) -> bool:
        """Move ``name`` to ``new_head`` iff it currently points at ``expected_head``."""
        if name not in self.backend.refs():
            raise UnknownBranch(f"no branch {name!r}")
        self.get_commit(new_head)
        return self.backend.cas(name, expected_head, new_head, {"reason": reason, **meta})

    def advance_branch(self, name: str, changes: Mapping[str, TableSnapshot | None],
                       message: str, author: str, code_hash: str | None = None) -> Commit:
        """Commit ``changes`` (None deletes a table) on top of a branch head and move it."""
        for _ in range(MERGE_ATTEMPTS):
            head = self.get_commit(self.branch_head(name))
            tables = dict(head.table_map)
            for table, snap in changes.items():
                if snap is None:
                    tables.pop(table, None)
                else:
                    tables[table] = snap
            c = self._write_commit([head.id], tables, message, author, code_hash)
            if self.update_branch_cas(name, head.id, c.id, reason="commit"):
                return c
        raise MergeContention(f"branch {name!r} kept moving")

    # history

    def log(self, ref: str) -> list[Commit]:
        """First-parent chain from ``ref`` back to the root, newest first."""
        out = []
        c = self.resolve_commit(ref)
        while True:
            out.append(c)
            if not c.parents:
                return out
            c = self.get_commit(c.parents[0])

    def ancestors(self, oid: str) -> dict[str, int]:
        """Every ancestor (inclusive) mapped to its BFS distance."""
        seen = {oid: 0}
        queue = deque([oid])
        while queue:
            cur = queue.popleft()
            for p in self.get_commit(cur).parents:
                if p not in seen:
                    seen[p] = seen[cur] + 1
                    queue.append(p)
        return seen

    def is_ancestor(self, ancestor: str, descendant: str) -> bool:
        return ancestor in self.ancestors(descendant)

    def merge_base(self, a: str, b: str) -> str | None:
        """Lowest common ancestor; ties broken by total distance, then id."""
        anc_a, anc_b = self.ancestors(a), self.ancestors(b)
        common = set(anc_a) & set(anc_b)
        if not common:
            return None
        # every node between two common ancestors is itself common, so a common
        # node is lowest iff none of its children is common
        has_common_child = set()
        for x in common:
            has_common_child.update(self.get_commit(x).parents)
        lowest = common - has_common_child
        return min(lowest, key=lambda c: (anc_a[c] + anc_b[c], c))

    # merge / revert / diff

    def prepare_merge(self, source_ref: str, target_branch: str, author: str) -> MergePlan:
        """Compute (and persist, if needed) the commit a merge would install."""
        target_head = self.branch_head(target_branch)
        source = self.resolve_ref(source_ref)
        if source == target_head or self.is_ancestor(source, target_head):
            return MergePlan("noop", target_branch, target_head, target_head)
        if self.is_ancestor(target_head, source):
            return MergePlan("fast_forward", target_branch, target_head, source)
        base_id = self.merge_base(source, target_head)
        base = self.get_commit(base_id).table_map if base_id else {}
        ours = self.get_commit(target_head).table_map
        theirs = self.get_commit(source).table_map
        merged, conflicts = {}, []
        for name in sorted(set(base) | set(ours) | set(theirs)):
            b, o, t = base.get(name), ours.get(name), theirs.get(name)
            if o == t or t == b:
                pick = o
            elif o == b:
                pick = t
            else:
                conflicts.append(name)
                continue
            if pick is not None:
                merged[name] = pick
        if conflicts:
            raise MergeConflict(conflicts)
        c = self._write_commit([target_head, source], merged,
                               f"merge {source_ref} into {target_branch}", author)
        return MergePlan("merge", target_branch, target_head, c.id)

    def apply_merge(self, plan: MergePlan, reason: str = "merge", **meta) -> bool:
        if plan.kind == "noop":
            return self.branch_head(plan.target) == plan.expected_head
        return self.update_branch_cas(plan.target, plan.expected_head, plan.result,
                                      reason=reason, merge_kind=plan.kind, **meta)

    def merge(self, source_ref: str, target_branch: str, author: str) -> Commit:
        """Three-way, table-granular merge of ``source_ref`` into ``target_branch``."""
        for _ in range(MERGE_ATTEMPTS):
            plan = self.prepare_merge(source_ref, target_branch, author)
            if self.apply_merge(plan):
                return self.get_commit(plan.result)
        raise MergeContention(f"{target_branch!r} kept moving; gave up after "
                              f"{MERGE_ATTEMPTS} attempts")

    def revert(self, branch: str, commit_id: str, author: str) -> Commit:
        """Append a commit restoring ``commit_id``'s tables; history is kept."""
        target = self.resolve_commit(commit_id)
        for _ in range(MERGE_ATTEMPTS):
            head = self.branch_head(branch)
            if not self.is_ancestor(target.id, head):
                raise NotAnAncestor(f"{target.id[:12]} is not an ancestor of {branch!r}")
            c = self._write_commit([head], target.table_map,
                                   f"revert {branch} to {target.id[:12]}", author)
            if self.update_branch_cas(branch, head, c.id, reason="revert"):
                return c
        raise MergeContention(f"branch {branch!r} kept moving")

    def diff(self, ref_a: str, ref_b: str) -> TableDiffSet:
        a = self.resolve_commit(ref_a).table_map
        b = self.resolve_commit(ref_b).table_map
        return TableDiffSet(
            added=frozenset(set(b) - set(a)),
            removed=frozenset(set(a) - set(b)),
            changed={k: (a[k], b[k]) for k in sorted(set(a) & set(b)) if a[k] != b[k]},
        )

    def list_tables(self, ref: str) -> list[str]:
        return sorted(self.resolve_commit(ref).table_map)

    def read_tables(self, ref: str, names: Iterable[str] | None = None) -> dict[str, Table]:
        tm = self.resolve_commit(ref).table_map
        names = tm if names is None else names
        return {n: self.read_table(tm[n]) for n in names if n in tm}

    def reflog(self, branch: str | None = None) -> list[dict]:
        entries = self.backend.reflog()
        return [e for e in entries if branch is None or e["branch"] == branch]
