from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from nicpool.cluster import AcceleratorKind, ResourceVector, build_cluster
from nicpool.errors import EmptyCluster, GrantReclaimed, Insufficient, NegativeResource

from conftest import BF2_ACCELS, PENSANDO_ACCELS


def sixteen_nic_rack():
    return build_cluster({"nics": [
        {"id": "bf2-", "count": 8, "model": "BF2", "cores": 8, "accelerators": BF2_ACCELS},
        {"id": "bf1-", "count": 4, "model": "BF1", "cores": 16},
        {"id": "pen-", "count": 4, "model": "Pensando", "cores": 16, "accelerators": PENSANDO_ACCELS},
    ]})


def test_sixteen_nic_rack():
    c = sixteen_nic_rack()
    assert len(c) == 16
    assert c.nic("bf2-1").unit_capacity == 7
    assert c.nic("pen-4").has_kind(AcceleratorKind.AES)
    assert not c.nic("bf1-1").accelerators


def test_empty_cluster():
    with pytest.raises(EmptyCluster):
        build_cluster({"nics": []})


def test_single_core_nic_has_no_units():
    c = build_cluster({"nics": [{"id": "tiny", "cores": 1, "reserved_to_cores": 1}]})
    assert c.nic("tiny").unit_capacity == 0


def test_allocate_cpu_units():
    c = sixteen_nic_rack()
    c.allocate("bf2-1", ResourceVector(2), "a")
    assert c.nic("bf2-1").free_units == 5


def test_missing_accelerator_is_insufficient():
    c = sixteen_nic_rack()
    with pytest.raises(Insufficient) as err:
        c.allocate("bf2-1", ResourceVector(0, {"AES": 1}), "a")
    assert "AES" in str(err.value)


def test_accelerators_are_exclusive():
    c = sixteen_nic_rack()
    c.allocate("bf2-1", ResourceVector(0, {"Regex": 1}), "a")
    with pytest.raises(Insufficient):
        c.allocate("bf2-1", ResourceVector(0, {"Regex": 1}), "b")


def test_reclaim_twice_fails():
    c = sixteen_nic_rack()
    g = c.allocate("bf2-1", ResourceVector(1), "a")
    c.reclaim(g)
    with pytest.raises(GrantReclaimed):
        c.reclaim(g)


def test_negative_resources_rejected():
    with pytest.raises(NegativeResource):
        ResourceVector(-1)


def test_most_resourceful_tie_and_accel():
    c = build_cluster({"nics": [{"id": "A", "cores": 4}, {"id": "B", "cores": 8}, {"id": "C", "cores": 8}]})
    assert c.most_resourceful() == "B"
    c = sixteen_nic_rack()
    assert c.most_resourceful(ResourceVector(0, {"AES": 1})).startswith("pen-")
    solo = build_cluster({"nics": [{"id": "only", "cores": 2}]})
    assert solo.most_resourceful() == "only"


ops = st.lists(st.tuples(st.sampled_from(["alloc", "free"]), st.integers(0, 2), st.integers(0, 3),
                         st.booleans()), max_size=40)


@given(ops)
def test_conservation_under_random_allocations(seq):
    c = build_cluster({"nics": [{"id": "n", "count": 3, "cores": 5, "accelerators": BF2_ACCELS}]})
    grants = []
    for op, nic_idx, units, accel in seq:
        nic = c.order[nic_idx]
        if op == "alloc":
            req = ResourceVector(units, {"Regex": 1} if accel else {})
            try:
                grants.append(c.allocate(nic, req, "app"))
            except Insufficient:
                pass
        elif grants:
            c.reclaim(grants.pop(units % len(grants)))
        for nid in c.order:
            d = c.nic(nid)
            free, total, granted = d.free_vector(), d.total_vector(), c.granted_vector(nid)
            assert free + granted == total
