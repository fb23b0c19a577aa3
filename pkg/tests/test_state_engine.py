from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from nicpool.app_model import AccessPattern
from nicpool.cluster import RackNetwork
from nicpool.errors import DuplicateAdd, NonReducibleUcf, NotFound, UnknownApp, ValueTooLarge
from nicpool.state_engine import ENTRY_SIZE, N_BUCKETS, StateEntry, StateFabric, StateTable, hash_key

NICS = ["n1", "n2", "n3"]


def fabric(pattern, nics=NICS):
    f = StateFabric(RackNetwork(default_rtt_us=4.52), nics)
    f.register_app("app", pattern, nics[:2])
    return f


def test_full_access_write_is_propagated():
    f = fabric(AccessPattern.FULL_ACCESS)
    f.register_app("app", AccessPattern.FULL_ACCESS, NICS)
    r = f.add("app", "n1", "k", 1)
    assert r.count("WRITE") == 2
    assert r.latency_us >= 4.52
    for n in NICS:
        assert f.table("app", n).get("k") == 1


def test_non_external_write_stays_local():
    f = fabric(AccessPattern.NON_EXTERNAL_WRITE)
    r = f.add("app", "n1", "k", 1)
    assert r.n_messages == 0
    assert f.table("app", "n2").find("k") is None


def test_remote_read_and_not_found():
    f = fabric(AccessPattern.NON_EXTERNAL_WRITE)
    f.add("app", "n2", "k", 7)
    val, r = f.get("app", "n1", "k")
    assert val == 7 and r.count("READ") == 1 and r.latency_us >= 4.52
    val, r = f.get("app", "n2", "k")
    assert r.n_messages == 0
    with pytest.raises(NotFound):
        f.get("app", "n1", "missing")
    with pytest.raises(UnknownApp):
        f.get("other", "n1", "k")


def test_traverse_unions_all_members():
    f = fabric(AccessPattern.NON_EXTERNAL_WRITE)
    f.add("app", "n1", "a", 1)
    f.add("app", "n2", "b", 2)
    items, r = f.traverse("app", "n1")
    assert sorted(items) == [("a", 1), ("b", 2)]
    assert r.count("READ") == 1


def test_compute_sum_and_count():
    f = fabric(AccessPattern.NON_EXTERNAL_WRITE)
    f.add("app", "n1", "x", 10)
    f.add("app", "n2", "y", 20)
    f.add("app", "n2", "z", 30)
    assert f.compute("app", "n1", "SUM")[0] == 60
    g = fabric(AccessPattern.NON_EXTERNAL_WRITE)
    for i in range(800):
        g.add("app", NICS[i % 2], f"flow{i}", i)
    assert g.compute("app", "n2", "COUNT")[0] == 800
    with pytest.raises(NonReducibleUcf):
        g.compute("app", "n1", "identity")


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(-1000, 1000)), max_size=1 << 12))
def test_compute_matches_reduce_over_traverse(writes):
    nics = [f"nic{i}" for i in range(8)]
    f = StateFabric(RackNetwork(), nics)
    f.register_app("app", AccessPattern.NON_EXTERNAL_WRITE, nics)
    for i, (nic, v) in enumerate(writes):
        f.add("app", nics[nic], f"k{i}", v)
    items, _ = f.traverse("app", "nic0")
    assert f.compute("app", "nic0", "SUM")[0] == sum(v for _, v in items)
    assert f.compute("app", "nic3", "COUNT")[0] == len(items) == len(writes)


@settings(max_examples=40)
@given(st.lists(st.tuples(st.sampled_from(["add", "set", "remove"]), st.integers(0, 2), st.integers(0, 9),
                          st.integers(0, 99)), max_size=60))
def test_full_access_replicas_are_byte_identical(ops):
    f = StateFabric(RackNetwork(), NICS)
    f.register_app("app", AccessPattern.FULL_ACCESS, NICS)
    for t, (op, nic, key, val) in enumerate(ops):
        try:
            getattr(f, op)("app", NICS[nic], f"k{key}", *(() if op == "remove" else (val,)), now=float(t))
        except (DuplicateAdd, NotFound):
            pass
    first = f.table("app", "n1").content_bytes()
    assert all(f.table("app", n).content_bytes() == first for n in NICS)


def test_entries_are_64_bytes_and_round_trip():
    e = StateEntry("flow-1", hash_key("flow-1"), 0x1000, 8, 12.5)
    raw = e.pack()
    assert len(raw) == ENTRY_SIZE
    back = StateEntry.unpack(raw)
    assert (back.s_name, back.h_key, back.s_addr, back.s_len, back.lu_time) == ("flow-1", e.h_key, 0x1000, 8, 12.5)


def test_bucket_is_hash_mod_4096():
    t = StateTable("n1", "app")
    for i in range(100):
        t.add(f"k{i}", i, 0.0)
    for i in (0, 42, 99):
        assert t.bucket_of(f"k{i}") == hash_key(f"k{i}") % N_BUCKETS


def test_table_errors():
    t = StateTable("n1", "app", max_value_len=16)
    t.add("k", 1, 0.0)
    with pytest.raises(DuplicateAdd):
        t.add("k", 2, 0.0)
    with pytest.raises(ValueTooLarge):
        t.set("k", b"x" * 17, 0.0)
    with pytest.raises(NotFound):
        t.remove("nope")


def test_eviction_is_strictly_after_lifespan():
    t = StateTable("n1", "app")
    t.add("old", 1, 0.0)
    t.add("new", 2, 1_000_000.0)
    assert t.evict_expired(500_000_000.0) == 0
    assert t.evict_expired(501_000_000.0) == 1
    assert t.find("old") is None and t.find("new") is not None


def test_sync_backup_and_restore():
    f = fabric(AccessPattern.NON_EXTERNAL_WRITE)
    f.add("app", "n1", "a", 1)
    f.add("app", "n1", "b", 2)
    assert f.sync_backup("app", "n1", "n2") == 2
    assert f.sync_backup("app", "n1", "n2") == 0
    f.set("app", "n1", "a", 5, now=1.0)
    f.remove("app", "n1", "b")
    f.add("app", "n1", "c", 3)
    assert f.sync_backup("app", "n1", "n2") == 3
    f.add("app", "n1", "unsynced", 9)
    assert f.restore_from_backup("app", "n1", "n2", now=2.0) == 2
    assert sorted(f.table("app", "n2").items()) == [("a", 5), ("c", 3)]
    assert "n1" not in f.members("app")
