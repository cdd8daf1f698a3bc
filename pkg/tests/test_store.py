import hashlib
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minilake.errors import (DuplicateBranch, InvalidBranchName, MergeConflict, MergeContention,
                             NotAnAncestor, ProtectedBranch, UnknownBranch, UnknownRef)
from minilake.store import (Catalog, Commit, DirBackend, MemoryBackend, canonical_json,
                            object_id)
from minilake.table import Schema, Table

from conftest import Ticker

SCHEMA = Schema.of(("v", "INT64"))


def tbl(*vals):
    return Table.from_rows(SCHEMA, [(v,) for v in vals])


@pytest.fixture
def cat():
    c = Catalog(MemoryBackend(), clock=Ticker())
    c.init_main()
    return c


def write(cat, branch, **tables):
    changes = {k: (None if v is None else cat.put_table(tbl(*v))) for k, v in tables.items()}
    return cat.advance_branch(branch, changes, "w", "test")


def test_objects_are_content_addressed(cat):
    a = cat.put_object(b"hello")
    assert a == hashlib.sha256(b"hello").hexdigest() == object_id(b"hello")
    n = cat.backend.object_count()
    assert cat.put_object(b"hello") == a
    assert cat.backend.object_count() == n
    assert cat.get_object(a) == b"hello"


def test_commit_id_is_hash_of_canonical_encoding(cat):
    c = write(cat, "main", t=[1, 2])
    raw = cat.get_object(c.id)
    assert object_id(raw) == c.id
    assert raw == Commit.encode(c.parents, c.table_map, c.message, c.author, c.timestamp,
                                c.code_hash)
    assert Commit.decode(c.id, raw).to_json() == c.to_json()
    assert canonical_json({"b": 1, "a": [1, 2]}) == b'{"a":[1,2],"b":1}'


def test_identical_tables_share_snapshots(cat):
    s1, s2 = cat.put_table(tbl(1, 2)), cat.put_table(tbl(1, 2))
    assert s1 == s2
    assert cat.read_table(s1) == tbl(1, 2)


def test_branch_lifecycle(cat):
    head = cat.branch_head("main")
    ref = cat.create_branch("dev", "main")
    assert ref.head == head
    with pytest.raises(DuplicateBranch):
        cat.create_branch("dev", "main")
    with pytest.raises(InvalidBranchName):
        cat.create_branch("bad name", "main")
    with pytest.raises(UnknownRef):
        cat.create_branch("x", "nope")
    with pytest.raises(ProtectedBranch):
        cat.delete_branch("main")
    cat.delete_branch("dev")
    with pytest.raises(UnknownBranch):
        cat.branch_head("dev")


def test_refs_resolve_by_name_or_full_id(cat):
    c = write(cat, "main", t=[1])
    assert cat.resolve_ref("main") == c.id
    assert cat.resolve_ref(c.id) == c.id
    with pytest.raises(UnknownRef):
        cat.resolve_ref("0" * 64)


def test_cas_rejects_stale_expectation(cat):
    old = cat.branch_head("main")
    new = write(cat, "main", t=[1]).id
    assert not cat.update_branch_cas("main", old, old, reason="test")
    assert cat.branch_head("main") == new


def test_writes_are_invisible_to_other_branches(cat):
    cat.create_branch("dev", "main")
    write(cat, "dev", t=[1])
    assert cat.list_tables("main") == []
    assert cat.list_tables("dev") == ["t"]


def test_log_and_ancestry(cat):
    root = cat.branch_head("main")
    c1 = write(cat, "main", t=[1])
    c2 = write(cat, "main", t=[2])
    assert [c.id for c in cat.log("main")] == [c2.id, c1.id, root]
    assert cat.is_ancestor(root, c2.id)
    assert not cat.is_ancestor(c2.id, root)


def test_merge_noop_and_fast_forward(cat):
    cat.create_branch("dev", "main")
    c = write(cat, "dev", t=[1])
    merged = cat.merge("dev", "main", "test")
    assert merged.id == c.id == cat.branch_head("main")
    # source already contained in target
    again = cat.merge("dev", "main", "test")
    assert again.id == c.id


def test_three_way_merge_is_table_granular(cat):
    write(cat, "main", a=[1], b=[1], gone=[0])
    cat.create_branch("dev", "main")
    write(cat, "dev", a=[2], gone=None)
    write(cat, "main", b=[3], c=[4])
    merged = cat.merge("dev", "main", "test")
    tm = merged.table_map
    assert cat.read_table(tm["a"]) == tbl(2)
    assert cat.read_table(tm["b"]) == tbl(3)
    assert cat.read_table(tm["c"]) == tbl(4)
    assert "gone" not in tm
    assert len(merged.parents) == 2


def test_same_change_on_both_sides_is_not_a_conflict(cat):
    cat.create_branch("dev", "main")
    write(cat, "dev", t=[9])
    write(cat, "main", t=[9], other=[1])
    merged = cat.merge("dev", "main", "test")
    assert cat.read_table(merged.table_map["t"]) == tbl(9)


def test_conflicting_merge_names_tables_and_leaves_target(cat):
    write(cat, "main", t=[1])
    cat.create_branch("dev", "main")
    write(cat, "dev", t=[2])
    head = write(cat, "main", t=[3]).id
    with pytest.raises(MergeConflict) as exc:
        cat.merge("dev", "main", "test")
    assert exc.value.tables == ["t"]
    assert cat.branch_head("main") == head


def test_revert_restores_tables_and_keeps_history(cat):
    c1 = write(cat, "main", t=[1])
    write(cat, "main", t=[2], u=[3])
    r = cat.revert("main", c1.id, "test")
    assert dict(r.table_map) == dict(c1.table_map)
    assert len(cat.log("main")) == 4
    cat.create_branch("side", c1.id)
    other = write(cat, "side", z=[1])
    with pytest.raises(NotAnAncestor):
        cat.revert("main", other.id, "test")


def test_diff(cat):
    a = write(cat, "main", t=[1], u=[1])
    b = write(cat, "main", t=[2], u=None, v=[1])
    d = cat.diff(a.id, b.id)
    assert d.added == {"v"} and d.removed == {"u"} and set(d.changed) == {"t"}
    assert cat.diff(a.id, a.id).is_empty()


def test_reflog_records_every_move(cat):
    write(cat, "main", t=[1])
    entries = cat.reflog("main")
    assert entries[0]["old"] is None
    assert entries[-1]["reason"] == "commit"
    assert all(e["branch"] == "main" for e in entries)


def test_dir_backend_persists(tmp_path):
    c = Catalog(DirBackend(tmp_path), clock=Ticker())
    c.init_main()
    head = write(c, "main", t=[1, 2]).id
    again = Catalog(DirBackend(tmp_path))
    assert again.branch_head("main") == head
    assert again.read_tables("main")["t"] == tbl(1, 2)
    assert len(again.reflog("main")) == 2


def test_concurrent_writers_never_lose_updates(tmp_path):
    c = Catalog(DirBackend(tmp_path))
    c.init_main()
    done, lost = [], []

    def worker(i):
        cat = Catalog(DirBackend(tmp_path))
        for j in range(5):
            name = f"t{i}_{j}"
            try:
                write(cat, "main", **{name: [i, j]})
                done.append(name)
            except MergeContention:
                lost.append(name)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    tables = set(c.list_tables("main"))
    assert set(done) <= tables
    assert not (set(lost) & tables)
    assert len(c.log("main")) == len(done) + 1


# ---------------------------------------------------------------- properties


def brute_force_lcas(cat, a, b):
    common = set(cat.ancestors(a)) & set(cat.ancestors(b))
    return {x for x in common
            if not any(y != x and cat.is_ancestor(x, y) for y in common)}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.booleans()),
                min_size=1, max_size=14))
def test_merge_base_is_a_lowest_common_ancestor(ops):
    cat = Catalog(MemoryBackend(), clock=Ticker())
    cat.init_main()
    names = ["main", "b1", "b2", "b3"]
    for n in names[1:]:
        cat.create_branch(n, "main")
    for i, (x, y, do_merge) in enumerate(ops):
        if do_merge and x != y:
            try:
                cat.merge(names[x], names[y], "p")
            except MergeConflict:
                pass
        else:
            write(cat, names[x], **{f"t{i}": [i]})
    for x in names:
        for y in names:
            a, b = cat.branch_head(x), cat.branch_head(y)
            assert cat.merge_base(a, b) in brute_force_lcas(cat, a, b)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.dictionaries(st.sampled_from("abcd"),
                                st.one_of(st.none(), st.lists(st.integers(-5, 5), max_size=3)),
                                max_size=3), max_size=8))
def test_committed_states_are_immutable(batches):
    cat = Catalog(MemoryBackend(), clock=Ticker())
    cat.init_main()
    expected, state = {}, {}
    for batch in batches:
        for k, v in batch.items():
            if v is None:
                state.pop(k, None)
            else:
                state[k] = tbl(*v)
        c = write(cat, "main", **batch)
        expected[c.id] = dict(state)
    for cid, tables in expected.items():
        assert cat.read_tables(cid) == tables
