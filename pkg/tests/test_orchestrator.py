from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from nicpool.app_model import FiveTuple, Packet
from nicpool.errors import DstUnavailable, NoPipeline, StaleSubpipe
from nicpool.orchestrator import HOST_EGRESS, FlowTable, PipelineIdentifier, migrate_flow, route_next

FLOW = FiveTuple(10, 20, 1000, 80)


class Pipe:
    def __init__(self, pid, capacity, used=0):
        self.pid = pid
        self.capacity = capacity
        self.used = used

    def free(self):
        return self.capacity - self.used


def test_new_flow_goes_to_most_free():
    p1, p2 = Pipe(1, 1024, 824), Pipe(2, 1024, 524)
    assert FlowTable().choose(FLOW, [p1, p2]) is p2


def test_pinned_flow_stays_below_watermark():
    p1, p2 = Pipe(1, 100), Pipe(2, 100)
    t = FlowTable(0.8)
    assert t.choose(FLOW, [p1, p2]) is p1
    p1.used = 79
    assert t.choose(FLOW, [p1, p2]) is p1
    p1.used = 80
    assert t.choose(FLOW, [p1, p2]) is p2
    assert t.spills == 1


def test_all_full_returns_none_and_no_pipes_raises():
    t = FlowTable()
    assert t.choose(FLOW, [Pipe(1, 4, 4)]) is None
    with pytest.raises(NoPipeline):
        t.choose(FLOW, [])


@given(st.lists(st.integers(0, 50), min_size=1, max_size=6), st.lists(st.integers(0, 7), max_size=30))
def test_choice_never_returns_a_full_pipeline(used, flows):
    pipes = [Pipe(i, 50, u) for i, u in enumerate(used)]
    t = FlowTable(0.8)
    for f in flows:
        p = t.choose(f, pipes)
        if p is None:
            assert all(q.free() == 0 for q in pipes)
        else:
            assert p.free() > 0
            p.used += 1


def test_route_next():
    pkt = Packet(FLOW, 100)
    a, b = [Pipe(1, 8)], [Pipe(2, 8)]
    tables = [FlowTable(), FlowTable()]
    pkt.subpipe_seq = 0
    assert route_next(pkt, [a, b], tables) is b[0]
    pkt.subpipe_seq = 1
    assert route_next(pkt, [a, b], tables) == HOST_EGRESS
    pkt.subpipe_seq = 0
    with pytest.raises(StaleSubpipe):
        route_next(pkt, [a, []], tables)


def ident(nic, idx=0):
    return PipelineIdentifier("app", nic, idx, 0)


def test_migration_overflow_counts_drops():
    arrivals = [Packet(FLOW, 100, None, i) for i in range(300)]
    rep = migrate_flow(FLOW, ident("a"), ident("b"), arrivals, bound=256)
    assert rep.cached == 256 and rep.dropped == 44
    assert [p.flow_seq for p in rep.replayed] == list(range(256))


def test_same_nic_migration_is_free():
    calls = []
    rep = migrate_flow(FLOW, ident("a", 0), ident("a", 1), [Packet(FLOW, 10)],
                       state_copy=lambda s, d: calls.append((s, d)) or 5.0,
                       link_cost=lambda s, d, n: 1.0)
    assert not rep.cross_nic and rep.cost_us == 0 and not calls


def test_cross_nic_migration_copies_state_and_ships_cache():
    rep = migrate_flow(FLOW, ident("a"), ident("b"), [Packet(FLOW, 10), Packet(FLOW, 30)],
                       state_copy=lambda s, d: 5.0, link_cost=lambda s, d, n: n / 10)
    assert rep.cross_nic and rep.cost_us == pytest.approx(9.0)


def test_migration_needs_a_destination():
    with pytest.raises(DstUnavailable):
        migrate_flow(FLOW, ident("a"), None)
