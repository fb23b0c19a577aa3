"""Traffic Orchestrator logic: flow tables, pipeline choice and lazy migration.

The functions here are independent of the event loop so they can be tested
on their own; :mod:`nicpool.dataplane` drives them during a run.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Hashable, Iterable, List, Optional, Sequence

from .errors import DstUnavailable, MigrationBufferOverflow, NoPipeline, StaleSubpipe

DEFAULT_MIGRATION_BUFFER = 256


@dataclass(frozen=True)
class PipelineIdentifier:
    app_id: str
    nic_id: str
    index: int
    subpipe_seq: int
    copy_id: int = 0


HOST_EGRESS = "HostEgress"


class FlowTableEntry:
    __slots__ = ("flow", "pinned", "load", "last_seen", "suspended", "buffer", "dropped")

    def __init__(self, flow, now: float = 0.0):
        self.flow = flow
        self.pinned: List = []
        self.load: Dict[int, int] = {}
        self.last_seen = now
        self.suspended = False
        self.buffer: Deque = deque()
        self.dropped = 0

    def to_dict(self) -> dict:
        return {"flow": str(self.flow), "pinned": [getattr(p, "pid", p) for p in self.pinned],
                "load": {str(k): v for k, v in sorted(self.load.items())}, "last_seen": self.last_seen}


def _free(p) -> int:
    return p.free()


class FlowTable:
    """Flow -> pinned pipelines, with capacity-based choice and watermark spill.

    Pipelines only need ``pid``, ``free()`` and ``capacity``. "Available
    capacity" is the number of free ingress slots.
    """

    def __init__(self, watermark: float = 0.8):
        self.watermark = watermark
        self.entries: Dict[Hashable, FlowTableEntry] = {}
        self.spills = 0

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, key) -> Optional[FlowTableEntry]:
        return self.entries.get(key)

    def choose(self, key, candidates: Sequence, now: float = 0.0, flow=None):
        """Pick a pipeline for the next packet of ``key``; None when all are full.

        Existing flows stay on their pinned pipeline (most free if several)
        until it reaches the watermark; only then may a new pipeline with
        more room be added. New flows go to the pipeline with the most free
        slots. Ties go to the earlier candidate.
        """
        if not candidates:
            raise NoPipeline(f"no live pipeline for {key!r}")
        e = self.entries.get(key)
        if e is not None and e.pinned:
            for p in e.pinned:
                if p not in candidates:
                    e.pinned = [q for q in e.pinned if q in candidates]
                    break
        if e is None or not e.pinned:
            best = _most_free(candidates)
            if best is None:
                return None
            if e is None:
                e = self.entries[key] = FlowTableEntry(flow if flow is not None else key, now)
            e.pinned.append(best)
            pick = best
        else:
            pinned = e.pinned
            best = pinned[0] if len(pinned) == 1 else _most_free(pinned, allow_full=True)
            bfree = best.free()
            if best.capacity - bfree < self.watermark * best.capacity:
                pick = best
            else:
                others = [p for p in candidates if p not in pinned]
                alt = _most_free(others)
                if alt is not None and alt.free() > bfree:
                    pinned.append(alt)
                    self.spills += 1
                    pick = alt
                elif bfree > 0:
                    pick = best
                else:
                    return None
        e.last_seen = now
        e.load[pick.pid] = e.load.get(pick.pid, 0) + 1
        return pick

    def repoint(self, key, dst) -> None:
        e = self.entries[key]
        e.pinned = [dst]

    def drop_pipeline(self, pipe) -> List[Hashable]:
        """Forget ``pipe``; returns keys left with no pinned pipeline."""
        orphans = []
        for k, e in self.entries.items():
            if pipe in e.pinned:
                e.pinned.remove(pipe)
                if not e.pinned:
                    orphans.append(k)
        return orphans

    def flows_on(self, pipe) -> List[Hashable]:
        return [k for k, e in self.entries.items() if pipe in e.pinned]

    def dump(self) -> List[dict]:
        return [e.to_dict() for _, e in sorted(self.entries.items(), key=lambda kv: repr(kv[0]))]


def _most_free(pipes: Iterable, allow_full: bool = False):
    best = None
    bfree = 0 if not allow_full else -1
    for p in pipes:
        f = p.free()
        if f > bfree:
            best, bfree = p, f
    return best


def route_ingress(table: FlowTable, pkt, pipelines: Sequence, now: float = 0.0):
    """Pipeline for an arriving packet; raises NoPipeline when the app has none."""
    return table.choose(pkt.flow, pipelines, now, pkt.flow)


def route_next(pkt, chain: Sequence[Sequence], tables: Sequence[FlowTable], now: float = 0.0):
    """Next hop after sub-pipeline ``pkt.subpipe_seq``.

    ``chain[k]`` lists the live pipelines of sub-pipeline k for the packet's
    copy and ``tables[k]`` is its flow table. Returns HOST_EGRESS after the
    last sub-pipeline, a pipeline otherwise, or None when the next one is
    full. Raises StaleSubpipe if the next sub-pipeline has been removed.
    """
    k = pkt.subpipe_seq
    if k >= len(chain) - 1:
        return HOST_EGRESS
    nxt = chain[k + 1]
    if not nxt:
        raise StaleSubpipe(f"sub-pipeline {k + 1} is gone")
    return tables[k + 1].choose(pkt.flow, nxt, now, pkt.flow)


@dataclass
class MigrationReport:
    flow: object
    src: Optional[PipelineIdentifier]
    dst: PipelineIdentifier
    cross_nic: bool
    cached: int = 0
    dropped: int = 0
    cost_us: float = 0.0
    replayed: List = field(default_factory=list)


class Migration:
    """A suspended flow: packets are cached until ``finish`` replays them."""

    def __init__(self, flow, src, dst, bound: int = DEFAULT_MIGRATION_BUFFER):
        if dst is None:
            raise DstUnavailable("migration needs a live destination")
        self.flow = flow
        self.src = src
        self.dst = dst
        self.bound = bound
        self.buffer: Deque = deque()
        self.dropped = 0

    def offer(self, pkt) -> bool:
        if len(self.buffer) >= self.bound:
            self.dropped += 1
            return False
        self.buffer.append(pkt)
        return True

    def offer_strict(self, pkt) -> None:
        if not self.offer(pkt):
            raise MigrationBufferOverflow(f"migration buffer for {self.flow} is full ({self.bound})")


def migrate_flow(flow, src: Optional[PipelineIdentifier], dst: Optional[PipelineIdentifier],
                 arrivals: Iterable = (), *, bound: int = DEFAULT_MIGRATION_BUFFER,
                 state_copy: Optional[Callable[[str, str], float]] = None,
                 link_cost: Optional[Callable[[str, str, int], float]] = None) -> MigrationReport:
    """Stand-alone lazy migration of one flow.

    Packets in ``arrivals`` show up while the flow is suspended and are cached
    (at most ``bound``; the rest are dropped and counted). A cross-NIC move
    copies the flow's state via ``state_copy(src_nic, dst_nic)`` and pays
    ``link_cost`` for shipping the cache; a same-NIC move costs nothing.
    Cached packets come back in arrival order.
    """
    if dst is None:
        raise DstUnavailable("migration needs a live destination")
    mig = Migration(flow, src, dst, bound)
    for pkt in arrivals:
        mig.offer(pkt)
    cross = src is not None and src.nic_id != dst.nic_id
    cost = 0.0
    if cross:
        if state_copy is not None:
            cost += state_copy(src.nic_id, dst.nic_id)
        if link_cost is not None and mig.buffer:
            cost += link_cost(src.nic_id, dst.nic_id, sum(p.payload_len for p in mig.buffer))
    return MigrationReport(flow, src, dst, cross, len(mig.buffer), mig.dropped, cost, list(mig.buffer))
