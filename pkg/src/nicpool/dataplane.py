"""Virtual-time data plane.

A single-threaded discrete-event loop moves packets through per-pipeline
ring buffers. Every (stage, NIC) pair of an application has one pool of
servers that pulls round-robin from the rings of all pipelines feeding that
stage on that NIC. A server that finishes a packet whose downstream ring is
full keeps the packet and stays blocked until space frees up, so rings are
lossless inside a pipeline; only ingress can drop.

Hops between NICs cost the TO redirect overhead, half the RTT and the
serialization time at port speed. Final outputs return to the app's anchor
NIC, where per-flow sequence numbers restore generator order.
"""

from __future__ import annotations

import heapq
import itertools
import random
from array import array
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, Iterable, List, Optional, Sequence, Tuple

from .app_model import (
    AppSpec,
    FiveTuple,
    Packet,
    Proto,
    SocketTable,
    StageContext,
    StageKind,
    StageRunner,
    default_registry,
)
from .cluster import Cluster, LatencyModel
from .errors import GrantMissing, UcfPanic
from .orchestrator import FlowTable, Migration, PipelineIdentifier
from .planner import CopyPlacement, Placement

PRIO_CONTROL = 0
PRIO_STAGE = 1
PRIO_TRANSFER = 2
PRIO_ARRIVAL = 3

LIVE = "live"
DRAINING = "draining"
DEAD = "dead"
RETIRED = "retired"


@dataclass
class DataplaneConfig:
    ring_capacity: int = 1024
    watermark: float = 0.8
    batch_size: int = 32
    to_overhead_us: float = 0.3
    migration_buffer: int = 256
    failover_cache: int = 65536
    record_order: bool = False


class Engine:
    """Event heap ordered by (time, priority, insertion id)."""

    __slots__ = ("now", "_q", "_seq", "processed")

    def __init__(self):
        self.now = 0.0
        self._q: list = []
        self._seq = itertools.count()
        self.processed = 0

    def at(self, t: float, prio: int, fn: Callable, arg=None) -> None:
        heapq.heappush(self._q, (t, prio, next(self._seq), fn, arg))

    def peek(self) -> Optional[float]:
        return self._q[0][0] if self._q else None

    def run(self, until: float) -> None:
        q = self._q
        pop = heapq.heappop
        n = 0
        while q and q[0][0] <= until:
            t, _, _, fn, arg = pop(q)
            self.now = t
            fn(arg)
            n += 1
        self.processed += n
        if self.now < until:
            self.now = until


class RingBuffer:
    """Bounded FIFO. ``reserved`` counts slots promised to packets in transit."""

    __slots__ = ("capacity", "q", "reserved", "role", "owner", "upstream", "pushed", "high")

    def __init__(self, capacity: int, role: str = "InterStage", owner=None):
        self.capacity = capacity
        self.q: Deque[Packet] = deque()
        self.reserved = 0
        self.role = role
        self.owner = owner
        self.upstream = None
        self.pushed = 0
        self.high = 0

    def __len__(self) -> int:
        return len(self.q)

    def free(self) -> int:
        return self.capacity - len(self.q) - self.reserved

    def push(self, pkt: Packet) -> None:
        if len(self.q) >= self.capacity:
            raise OverflowError("ring buffer overflow")
        self.q.append(pkt)
        self.pushed += 1
        n = len(self.q)
        if n > self.high:
            self.high = n

    def pop(self) -> Packet:
        return self.q.popleft()


class Server:
    __slots__ = ("model", "copy_id", "retiring", "busy", "accel")

    def __init__(self, model: Optional[LatencyModel], copy_id: int, accel: bool = False):
        self.model = model
        self.copy_id = copy_id
        self.retiring = False
        self.busy = False
        self.accel = accel


class StagePool:
    """All servers of one stage of one app on one NIC."""

    __slots__ = ("rt", "index", "nic_id", "stage", "runner", "servers", "idle", "buffers", "rr",
                 "blocked", "busy_us", "served", "started", "ctx", "retry_pending", "is_accel", "default_model")

    def __init__(self, rt: "AppRuntime", index: int, nic_id: str):
        self.rt = rt
        self.index = index
        self.nic_id = nic_id
        self.stage = rt.app.stages[index]
        self.runner = StageRunner(self.stage, rt.registry, rt.flow_records, rt.sockets)
        self.servers: List[Server] = []
        self.idle: List[Server] = []
        self.buffers: List[Tuple[RingBuffer, "Pipeline", int]] = []
        self.rr = 0
        self.blocked: Deque = deque()
        self.busy_us = 0.0
        self.served = 0
        self.started = 0
        state = rt.state_handle(nic_id)
        self.ctx = StageContext(self.stage.params, state, 0.0, nic_id, rt.app.app_id)
        self.retry_pending = False
        self.is_accel = self.stage.kind == StageKind.ACCEL_FN
        self.default_model = self.stage.service_model or LatencyModel(0.0, 0.0)

    def add_server(self, server: Server) -> None:
        self.servers.append(server)
        self.idle.append(server)

    def n_active(self) -> int:
        return sum(1 for s in self.servers if not s.retiring)

    # --- event handlers -------------------------------------------------
    def pull(self) -> None:
        rt = self.rt
        sim = rt.sim
        if self.nic_id in sim.dead:
            return
        bufs = self.buffers
        nb = len(bufs)
        eng = sim.engine
        while self.idle and nb:
            start = self.rr
            found = None
            for k in range(nb):
                i = (start + k) % nb
                if bufs[i][0].q:
                    found = i
                    break
            if found is None:
                return
            self.rr = (found + 1) % nb
            ring, pipe, j = bufs[found]
            pkt = ring.q.popleft()
            server = self.idle.pop()
            server.busy = True
            model = server.model or self.default_model
            dt = model.fixed_us + model.per_byte_us * pkt.payload_len
            self.busy_us += dt
            self.started += 1
            eng.at(eng.now + dt, PRIO_STAGE, self.done, (server, pkt, pipe, j))
            up = ring.upstream
            if up is not None:
                up.wake()

    def wake(self) -> None:
        if self.blocked and not self.retry_pending:
            self.retry_pending = True
            eng = self.rt.sim.engine
            eng.at(eng.now, PRIO_STAGE, self._retry)

    def _retry(self, _=None) -> None:
        self.retry_pending = False
        if self.nic_id in self.rt.sim.dead:
            return
        still = deque()
        rt = self.rt
        while self.blocked:
            item = self.blocked.popleft()
            server, pkt, pipe, j = item
            if rt.forward(pkt, pipe, j):
                self._release(server)
            else:
                still.append(item)
        self.blocked = still
        self.pull()

    def _release(self, server: Server) -> None:
        server.busy = False
        if server.retiring:
            self.servers.remove(server)
        else:
            self.idle.append(server)

    def done(self, arg) -> None:
        server, pkt, pipe, j = arg
        rt = self.rt
        sim = rt.sim
        if self.nic_id in sim.dead:
            rt.limbo.append((pkt, pipe))
            return
        ctx = self.ctx
        ctx.now = sim.engine.now
        self.served += 1
        try:
            ok = self.runner.run(pkt, ctx)
        except UcfPanic:
            rt.stats.panics += 1
            ok = False
        if not ok:
            rt.drop_inside(pkt, pipe)
        elif not rt.forward(pkt, pipe, j):
            self.blocked.append(arg)
            return
        self._release(server)
        self.pull()


class Pipeline:
    __slots__ = ("pid", "rt", "copy", "subpipe_seq", "nic_id", "start", "end", "rings", "pools", "state",
                 "inflight", "ident")

    def __init__(self, pid: int, rt: "AppRuntime", copy: "CopyRuntime", subpipe_seq: int, nic_id: str,
                 start: int, end: int, capacity: int):
        self.pid = pid
        self.rt = rt
        self.copy = copy
        self.subpipe_seq = subpipe_seq
        self.nic_id = nic_id
        self.start = start
        self.end = end
        self.rings = [RingBuffer(capacity, "Ingress" if j == 0 else "InterStage", (pid, start + j))
                      for j in range(end - start + 1)]
        self.pools: List[StagePool] = []
        self.state = LIVE
        self.inflight = 0
        self.ident = PipelineIdentifier(rt.app.app_id, nic_id, pid, subpipe_seq, copy.copy_id)

    @property
    def capacity(self) -> int:
        return self.rings[0].capacity

    def free(self) -> int:
        return self.rings[0].free()

    def resident(self) -> List[Packet]:
        return [p for r in self.rings for p in r.q]

    def __repr__(self) -> str:
        return f"Pipeline({self.pid}, copy={self.copy.copy_id}, sub={self.subpipe_seq}, nic={self.nic_id}, {self.state})"


class CopyRuntime:
    __slots__ = ("copy_id", "placement", "subs", "tables", "state")

    def __init__(self, placement: CopyPlacement, watermark: float):
        self.copy_id = placement.copy_id
        self.placement = placement
        self.subs: List[List[Pipeline]] = []
        self.tables: List[FlowTable] = []
        self.state = LIVE

    def pipelines(self) -> List[Pipeline]:
        return [p for sub in self.subs for p in sub]


class Aggregator:
    """Per-flow in-order release: a packet leaves once every earlier packet
    of its flow has left or been dropped."""

    PENDING, DONE, DROPPED = 0, 1, 2

    def __init__(self, on_release: Callable[[Packet, float], None]):
        self.flows: Dict[FiveTuple, Deque[list]] = {}
        self.on_release = on_release
        self.held = 0

    def admit(self, pkt: Packet) -> None:
        entry = [0, pkt]
        pkt.token = entry
        dq = self.flows.get(pkt.flow)
        if dq is None:
            dq = self.flows[pkt.flow] = deque()
        dq.append(entry)

    def _settle(self, flow: FiveTuple, now: float) -> None:
        dq = self.flows[flow]
        while dq and dq[0][0]:
            status, pkt = dq.popleft()
            if status == 1:
                self.on_release(pkt, now)
        if not dq:
            del self.flows[flow]

    def complete(self, pkt: Packet, now: float) -> None:
        entry = pkt.token
        if entry is None or entry[0]:
            return
        entry[0] = 1
        dq = self.flows.get(pkt.flow)
        if dq is not None and dq[0] is entry:
            self._settle(pkt.flow, now)
        else:
            self.held += 1

    def drop(self, pkt: Packet, now: float) -> None:
        entry = pkt.token
        if entry is None or entry[0]:
            return
        entry[0] = 2
        if pkt.flow in self.flows:
            self._settle(pkt.flow, now)

    def pending(self) -> int:
        return sum(len(d) for d in self.flows.values())


class AppStats:
    def __init__(self, app_id: str, record_order: bool = False):
        self.app_id = app_id
        self.generated = 0
        self.admitted = 0
        self.ingress_drops = 0
        self.stage_drops = 0
        self.panics = 0
        self.egress = 0
        self.migrations = 0
        self.migration_drops = 0
        self.pre_sync_loss = 0
        self.cache_overflow = 0
        self.cached_for_failover = 0
        self.replayed = 0
        self.stale_reroutes = 0
        self.times = array("d")
        self.bits = array("q")
        self.lats = array("d")
        self.order: Optional[List[tuple]] = [] if record_order else None

    def rate_gbps(self, t0: float, t1: float) -> float:
        """Egress rate over [t0, t1): bits after the first departure / span."""
        i = bisect_left(self.times, t0)
        j = bisect_left(self.times, t1)
        if j - i < 2:
            return 0.0
        span = self.times[j - 1] - self.times[i]
        if span <= 0:
            return 0.0
        return sum(self.bits[i + 1:j]) / span / 1000.0

    def bits_between(self, t0: float, t1: float) -> int:
        i = bisect_left(self.times, t0)
        j = bisect_left(self.times, t1)
        return sum(self.bits[i:j])

    def latencies_between(self, t0: float, t1: float) -> List[float]:
        i = bisect_left(self.times, t0)
        j = bisect_left(self.times, t1)
        return list(self.lats[i:j])

    def counters(self) -> dict:
        return {
            "generated": self.generated,
            "admitted": self.admitted,
            "egress": self.egress,
            "ingress_drops": self.ingress_drops,
            "stage_drops": self.stage_drops,
            "ucf_panics": self.panics,
            "migrations": self.migrations,
            "migration_drops": self.migration_drops,
            "pre_sync_loss": self.pre_sync_loss,
            "failover_cached": self.cached_for_failover,
            "failover_cache_overflow": self.cache_overflow,
            "replayed": self.replayed,
            "stale_reroutes": self.stale_reroutes,
        }


class AppRuntime:
    """Live pipelines, pools, flow tables and counters of one application."""

    def __init__(self, sim: "Simulator", app: AppSpec, anchor: str, state_fabric=None):
        self.sim = sim
        self.app = app
        self.registry = app.registry or default_registry()
        self.anchor = anchor
        self.fabric = state_fabric
        self.flow_records: Dict = {}
        self.sockets = SocketTable()
        self.copies: Dict[int, CopyRuntime] = {}
        self.pools: Dict[Tuple[int, str], StagePool] = {}
        self.ingress_table = FlowTable(sim.config.watermark)
        self.entry_pipes: List[Pipeline] = []
        self.aggregator = Aggregator(self._release)
        self.stats = AppStats(app.app_id, sim.config.record_order)
        self.source: Optional["TrafficSource"] = None
        # (packet, stage to resume at, is a failover replay)
        self.backlog: Deque[Tuple[Packet, int, bool]] = deque()
        self.holding = False
        self.limbo: List[Tuple[Packet, "Pipeline"]] = []
        self.last_sync = 0.0
        self.admitted_count = 0
        self.kick_pending = False
        self.migrating: Dict[FiveTuple, Migration] = {}
        # flows whose pipelines were retired by a shrink; state still on the old NIC
        self.orphans: Dict[FiveTuple, Pipeline] = {}
        self.on_copy_retired: Optional[Callable[[int], None]] = None
        self.handles: Dict[str, object] = {}

    # --- construction -----------------------------------------------------
    def state_handle(self, nic_id: str):
        if self.fabric is None or not self.app.stateful:
            return None
        h = self.handles.get(nic_id)
        if h is None:
            eng = self.sim.engine
            h = self.handles[nic_id] = self.fabric.handle(self.app.app_id, nic_id, lambda: eng.now)
        return h

    def pool(self, stage: int, nic_id: str) -> StagePool:
        key = (stage, nic_id)
        p = self.pools.get(key)
        if p is None:
            p = self.pools[key] = StagePool(self, stage, nic_id)
        return p

    def add_copy(self, cp: CopyPlacement) -> CopyRuntime:
        sim = self.sim
        cluster = sim.cluster
        for g in cp.grants:
            if not cluster.is_live(g):
                raise GrantMissing(f"grant {g.grant_id} of copy {cp.copy_id} is not live")
        cr = CopyRuntime(cp, sim.config.watermark)
        units: Dict[str, List[str]] = {}
        for g in cp.grants:
            units.setdefault(g.nic_id, []).extend(g.units)
        for i, (n, nic) in enumerate(zip(cp.replicas, cp.stage_nics)):
            st = self.app.stages[i]
            pool = self.pool(i, nic)
            for _ in range(n):
                model = st.service_model
                accel = st.kind == StageKind.ACCEL_FN
                if accel:
                    mine = [u for u in units.get(nic, []) if cluster.accel_unit(u).kind == st.accel]
                    if not mine:
                        raise GrantMissing(f"no {st.accel.value} unit granted on {nic}")
                    uid = mine[0]
                    units[nic].remove(uid)
                    if model is None:
                        model = cluster.accel_unit(uid).perf_metric
                pool.add_server(Server(model, cp.copy_id, accel))
        for sub in cp.subpipelines():
            count = max(cp.replicas[sub.start:sub.end + 1])
            pipes = []
            for _ in range(count):
                pipe = Pipeline(next(sim.pipe_ids), self, cr, sub.subpipe_seq, sub.nic_id, sub.start, sub.end,
                                sim.config.ring_capacity)
                pipe.pools = [self.pool(s, sub.nic_id) for s in range(sub.start, sub.end + 1)]
                for j, ring in enumerate(pipe.rings):
                    pipe.pools[j].buffers.append((ring, pipe, j))
                    if j > 0:
                        ring.upstream = pipe.pools[j - 1]
                    elif sub.subpipe_seq > 0:
                        ring.upstream = cr.subs[sub.subpipe_seq - 1][0].pools[-1]
                    else:
                        ring.upstream = self
                pipes.append(pipe)
            cr.subs.append(pipes)
            cr.tables.append(FlowTable(sim.config.watermark))
        self.copies[cp.copy_id] = cr
        self.holding = False
        self._refresh_entry()
        self.kick()
        return cr

    def _refresh_entry(self) -> None:
        self.entry_pipes = [p for cr in self.copies.values() if cr.state == LIVE for p in cr.subs[0]
                            if p.state == LIVE]

    def pipelines(self) -> List[Pipeline]:
        return [p for cr in self.copies.values() for p in cr.pipelines()]

    # --- ingress ----------------------------------------------------------
    def kick(self) -> None:
        if not self.kick_pending:
            self.kick_pending = True
            eng = self.sim.engine
            eng.at(eng.now, PRIO_STAGE, self._on_kick)

    def wake(self) -> None:
        """Called when an ingress ring frees a slot."""
        if self.backlog or (self.source is not None and self.source.pull_based):
            self.kick()

    def _on_kick(self, _=None) -> None:
        self.kick_pending = False
        self.drain_backlog()
        if not self.backlog and self.source is not None and self.source.pull_based:
            self.source.fill(self)

    def admit(self, pkt: Packet) -> None:
        pkt.batch_seq = self.admitted_count // self.sim.config.batch_size
        self.admitted_count += 1
        self.stats.admitted += 1
        self.aggregator.admit(pkt)

    def offer(self, pkt: Packet) -> bool:
        """Route a freshly generated packet. False means it was not admitted."""
        st = self.stats
        st.generated += 1
        mig = self.migrating.get(pkt.flow)
        if mig is not None:
            self.admit(pkt)
            if not mig.offer(pkt):
                st.migration_drops += 1
                self.aggregator.drop(pkt, self.sim.engine.now)
            return True
        if not self.entry_pipes:
            if self.holding and len(self.backlog) < self.sim.config.failover_cache:
                self.admit(pkt)
                st.cached_for_failover += 1
                self.backlog.append((pkt, 0, True))
                return True
            st.ingress_drops += 1
            return False
        entry = self.ingress_table.entries.get(pkt.flow)
        if entry is not None:
            src = self.orphans.pop(pkt.flow, None)
            if entry.pinned:
                stale = [p for p in entry.pinned if p.state == DRAINING]
                src = stale[0] if stale else None
            if src is not None and self._start_migration(pkt, entry, src):
                return True
        pipe = self.ingress_table.choose(pkt.flow, self.entry_pipes, self.sim.engine.now, pkt.flow)
        if pipe is None:
            st.ingress_drops += 1
            return False
        self.admit(pkt)
        self.enter(pipe, 0, pkt, self.anchor)
        return True

    def can_accept(self, flow: FiveTuple) -> bool:
        if flow in self.migrating:
            return False
        return any(p.free() > 0 for p in self.entry_pipes)

    def enter(self, pipe: Pipeline, j: int, pkt: Packet, from_nic: str) -> None:
        sim = self.sim
        eng = sim.engine
        pkt.dispatch_time = eng.now
        pkt.pipeline = pipe
        pkt.stage = pipe.start + j
        pkt.subpipe_seq = pipe.subpipe_seq
        pipe.inflight += 1
        ring = pipe.rings[j]
        if from_nic == pipe.nic_id:
            ring.push(pkt)
            pipe.pools[j].pull()
        else:
            ring.reserved += 1
            dt = sim.xfer_cost(from_nic, pipe.nic_id, pkt.payload_len)
            eng.at(eng.now + dt, PRIO_TRANSFER, self._arrive, (pipe, j, pkt))

    def _arrive(self, arg) -> None:
        pipe, j, pkt = arg
        ring = pipe.rings[j]
        ring.reserved -= 1
        if pipe.state == DEAD:
            # the NIC was declared dead while this packet was on the wire
            self.stats.cached_for_failover += 1
            self.backlog.append((pkt, pipe.start + j, True))
            self.kick()
            return
        ring.push(pkt)
        pipe.pools[j].pull()

    # --- stage hops -------------------------------------------------------
    def forward(self, pkt: Packet, pipe: Pipeline, j: int) -> bool:
        """Move a processed packet on; False means blocked (downstream full)."""
        if j < len(pipe.rings) - 1:
            ring = pipe.rings[j + 1]
            if len(ring.q) + ring.reserved >= ring.capacity:
                return False
            ring.push(pkt)
            pkt.stage = pipe.start + j + 1
            pipe.pools[j + 1].pull()
            return True
        cr = pipe.copy
        k = pipe.subpipe_seq
        now = self.sim.engine.now
        if k == len(cr.subs) - 1:
            self._leave(pipe)
            self.egress(pkt, pipe.nic_id)
            return True
        nxt = [p for p in cr.subs[k + 1] if p.state == LIVE or p.state == DRAINING]
        s = pipe.end + 1
        if nxt:
            target = cr.tables[k + 1].choose(pkt.flow, nxt, now, pkt.flow)
            if target is None:
                return False
            self._leave(pipe)
            self.enter(target, 0, pkt, pipe.nic_id)
            return True
        # next sub-pipeline is gone: re-route to any live pipeline holding stage s
        self.stats.stale_reroutes += 1
        target = self._holder(s)
        if target is None:
            self._leave(pipe)
            self.backlog.append((pkt, s, False))
            return True
        self._leave(pipe)
        self.enter(target, s - target.start, pkt, pipe.nic_id)
        return True

    def _holder(self, s: int) -> Optional[Pipeline]:
        best, bfree = None, 0
        for cr in self.copies.values():
            if cr.state != LIVE:
                continue
            for sub in cr.subs:
                for p in sub:
                    if p.state == LIVE and p.start <= s <= p.end:
                        ring = p.rings[s - p.start]
                        f = ring.capacity - len(ring.q) - ring.reserved
                        if f > bfree:
                            best, bfree = p, f
        return best

    def _leave(self, pipe: Pipeline) -> None:
        pipe.inflight -= 1
        if pipe.state == DRAINING and pipe.inflight == 0:
            self._maybe_retire(pipe.copy)

    def drop_inside(self, pkt: Packet, pipe: Pipeline) -> None:
        self.stats.stage_drops += 1
        self._leave(pipe)
        self.aggregator.drop(pkt, self.sim.engine.now)

    def egress(self, pkt: Packet, from_nic: str) -> None:
        sim = self.sim
        if from_nic == self.anchor:
            self.aggregator.complete(pkt, sim.engine.now)
        else:
            eng = sim.engine
            dt = sim.xfer_cost(from_nic, self.anchor, pkt.payload_len)
            eng.at(eng.now + dt, PRIO_TRANSFER, self._egress_arrive, pkt)

    def _egress_arrive(self, pkt: Packet) -> None:
        self.aggregator.complete(pkt, self.sim.engine.now)

    def _release(self, pkt: Packet, now: float) -> None:
        st = self.stats
        st.egress += 1
        st.times.append(now)
        st.bits.append(pkt.payload_len * 8)
        st.lats.append(now - pkt.ingress_time)
        if st.order is not None:
            st.order.append((pkt.flow, pkt.batch_seq, pkt.flow_seq))

    # --- backlog (failover replay, migration spill, stale hops) ------------
    def drain_backlog(self) -> None:
        bl = self.backlog
        now = self.sim.engine.now
        while bl:
            pkt, s, replay = bl[0]
            if s == 0:
                if not self.entry_pipes:
                    return
                target = self.ingress_table.choose(pkt.flow, self.entry_pipes, now, pkt.flow)
            else:
                target = self._holder(s)
            if target is None:
                return
            bl.popleft()
            if replay:
                self.stats.replayed += 1
            self.enter(target, s - target.start, pkt, self.anchor)

    # --- migration ----------------------------------------------------------
    def _start_migration(self, pkt: Packet, entry, src: Pipeline) -> bool:
        live = [p for p in self.entry_pipes if p not in entry.pinned]
        dst = None
        for p in live:
            if dst is None or p.free() > dst.free():
                dst = p
        if dst is None:
            return False
        self.stats.migrations += 1
        cost = 0.0
        if src.nic_id != dst.nic_id and self.fabric is not None and self.app.stateful:
            key = pkt.flow.key()
            table = self.fabric._tables.get((self.app.app_id, src.nic_id))
            names = [e.s_name for e in table.entries() if key in e.s_name] if table is not None else []
            cost = self.fabric.copy_entries(self.app.app_id, src.nic_id, dst.nic_id, names,
                                            self.sim.engine.now).latency_us
        entry.pinned = [dst]
        if cost <= 0:
            return False
        mig = Migration(pkt.flow, src.ident, dst, self.sim.config.migration_buffer)
        self.migrating[pkt.flow] = mig
        self.admit(pkt)
        mig.offer(pkt)
        eng = self.sim.engine
        eng.at(eng.now + cost, PRIO_CONTROL, self._finish_migration, mig)
        return True

    def _finish_migration(self, mig: Migration) -> None:
        del self.migrating[mig.flow]
        dst = mig.dst
        for pkt in mig.buffer:
            if dst.state == LIVE and dst.free() > 0:
                self.enter(dst, 0, pkt, self.anchor)
            else:
                self.backlog.append((pkt, 0, False))
        self.kick()

    # --- scaling ------------------------------------------------------------
    def drain_copy(self, copy_id: int) -> None:
        cr = self.copies[copy_id]
        cr.state = DRAINING
        for p in cr.pipelines():
            if p.state == LIVE:
                p.state = DRAINING
        self._refresh_entry()
        self._maybe_retire(cr)

    def _maybe_retire(self, cr: CopyRuntime) -> None:
        if cr.state == RETIRED:
            return
        pipes = cr.pipelines()
        if any(p.inflight > 0 for p in pipes if p.state == DRAINING):
            return
        if any(p.state == LIVE for p in pipes):
            return
        self._retire(cr)

    def _retire(self, cr: CopyRuntime) -> None:
        cr.state = RETIRED
        mine = set(id(p) for p in cr.pipelines())
        for p in cr.pipelines():
            p.state = RETIRED if p.state != DEAD else DEAD
        for pool in list(self.pools.values()):
            pool.buffers = [b for b in pool.buffers if id(b[1]) not in mine]
            pool.rr = 0
            for s in list(pool.servers):
                if s.copy_id == cr.copy_id:
                    if s.busy:
                        s.retiring = True
                    else:
                        pool.servers.remove(s)
                        if s in pool.idle:
                            pool.idle.remove(s)
        for p in cr.pipelines():
            for key in self.ingress_table.drop_pipeline(p):
                if p.state != DEAD:
                    self.orphans[key] = p
        del self.copies[cr.copy_id]
        self._refresh_entry()
        if self.on_copy_retired is not None:
            self.on_copy_retired(cr.copy_id)

    # --- failure ------------------------------------------------------------
    def nic_failed(self, nic_id: str, cache_since: float, hold: bool = True) -> List[int]:
        """React to a detected NIC failure; returns ids of the copies lost.

        Packets stranded on the NIC that were dispatched at or after
        ``cache_since`` (the last sync) are kept for replay; older ones are
        counted as pre-sync loss. With ``hold``, an app left without any
        pipeline caches new arrivals until a replacement is launched.
        """
        now = self.sim.engine.now
        lost_copies = []
        stranded: List[Packet] = []
        for cr in list(self.copies.values()):
            if nic_id not in cr.placement.stage_nics:
                continue
            lost_copies.append(cr.copy_id)
            for p in cr.pipelines():
                if p.nic_id == nic_id:
                    stranded.extend(p.resident())
                    for r in p.rings:
                        r.q.clear()
                    p.inflight = 0
                    p.state = DEAD
                elif p.state == LIVE:
                    p.state = DRAINING
            cr.state = DRAINING
        for key, pool in list(self.pools.items()):
            if pool.nic_id == nic_id:
                stranded.extend(item[1] for item in pool.blocked)
                pool.blocked.clear()
                del self.pools[key]
        stranded.extend(pkt for pkt, _ in self.limbo)
        self.limbo = []
        if self.anchor == nic_id:
            alive = [cr for cr in self.copies.values() if cr.state == LIVE]
            if alive:
                self.anchor = alive[0].placement.stage_nics[0]
        self._refresh_entry()
        st = self.stats
        cap = self.sim.config.failover_cache
        cached = 0
        for pkt in sorted(stranded, key=lambda p: (p.flow, p.flow_seq)):
            if pkt.dispatch_time >= cache_since and cached < cap:
                cached += 1
                st.cached_for_failover += 1
                self.backlog.append((pkt, pkt.stage, True))
            else:
                if pkt.dispatch_time >= cache_since:
                    st.cache_overflow += 1
                else:
                    st.pre_sync_loss += 1
                self.aggregator.drop(pkt, now)
        for cid in lost_copies:
            cr = self.copies.get(cid)
            if cr is not None:
                self._maybe_retire(cr)
        if not self.entry_pipes and hold:
            self.holding = True
        self.kick()
        return lost_copies


class TrafficSource:
    pull_based = False

    def __init__(self, app_id: str, flows: Sequence[FiveTuple], pkt_bytes: int = 1500,
                 payload: Optional[bytes] = None):
        if not flows:
            raise ValueError("a traffic source needs at least one flow")
        self.app_id = app_id
        self.flows = list(flows)
        self.pkt_bytes = pkt_bytes
        self.payload = payload
        self.seq: Dict[FiveTuple, int] = {}
        self.rr = 0

    def make(self, now: float, ingress_time: float) -> Packet:
        flow = self.flows[self.rr]
        self.rr = (self.rr + 1) % len(self.flows)
        n = self.seq.get(flow, 0)
        self.seq[flow] = n + 1
        return Packet(flow, self.pkt_bytes, self.payload, n, ingress_time)

    def fill(self, rt: AppRuntime) -> None:
        pass


class SaturatingSource(TrafficSource):
    """Offers packets whenever an ingress slot is free."""

    pull_based = True

    def fill(self, rt: AppRuntime) -> None:
        now = rt.sim.engine.now
        gen = now - rt.sim.config.to_overhead_us
        table = rt.ingress_table
        st = rt.stats
        while rt.entry_pipes:
            flow = self.flows[self.rr]
            if flow in rt.migrating:
                return
            pipe = table.choose(flow, rt.entry_pipes, now, flow)
            if pipe is None:
                return
            pkt = self.make(now, gen)
            st.generated += 1
            rt.admit(pkt)
            rt.enter(pipe, 0, pkt, rt.anchor)


class RateSource(TrafficSource):
    """Constant bit rate, flows in round-robin order.

    ``rate_gbps`` may be a number or a callable of time (e.g. the current
    target of the app).
    """

    def __init__(self, app_id: str, flows: Sequence[FiveTuple], rate_gbps, pkt_bytes: int = 1500,
                 payload: Optional[bytes] = None, start_us: float = 0.0, stop_us: float = float("inf")):
        super().__init__(app_id, flows, pkt_bytes, payload)
        self.rate = rate_gbps
        self.start_us = start_us
        self.stop_us = stop_us
        self.next_gen = start_us

    def current_rate(self, now: float) -> float:
        return self.rate(now) if callable(self.rate) else float(self.rate)

    def start(self, rt: AppRuntime) -> None:
        overhead = rt.sim.config.to_overhead_us
        rt.sim.engine.at(self.start_us + overhead, PRIO_ARRIVAL, self._arrival, rt)

    def _arrival(self, rt: AppRuntime) -> None:
        eng = rt.sim.engine
        overhead = rt.sim.config.to_overhead_us
        gen = eng.now - overhead
        if gen >= self.stop_us:
            return
        rate = self.current_rate(gen)
        if rate > 0:
            rt.offer(self.make(eng.now, gen))
            gap = self.pkt_bytes * 8 / (rate * 1000.0)
        else:
            gap = 1000.0
        eng.at(gen + gap + overhead, PRIO_ARRIVAL, self._arrival, rt)


def make_flows(n: int, seed: int = 0, proto: Proto = Proto.TCP) -> List[FiveTuple]:
    """``n`` distinct pseudo-random flows, reproducible from ``seed``."""
    rng = random.Random(seed)
    out: List[FiveTuple] = []
    seen = set()
    while len(out) < n:
        ft = FiveTuple(rng.getrandbits(32), rng.getrandbits(32), rng.randrange(1024, 65536),
                       rng.choice((80, 443, 8080, 53)), proto)
        if ft not in seen:
            seen.add(ft)
            out.append(ft)
    return out


class Simulator:
    """Owns the event loop and every application's runtime."""

    def __init__(self, cluster: Cluster, config: Optional[DataplaneConfig] = None, fabric=None):
        self.cluster = cluster
        self.config = config or DataplaneConfig()
        self.fabric = fabric
        self.engine = Engine()
        self.apps: Dict[str, AppRuntime] = {}
        self.dead: set = set()
        self.pipe_ids = itertools.count()

    @property
    def now(self) -> float:
        return self.engine.now

    def xfer_cost(self, a: str, b: str, nbytes: int) -> float:
        net = self.cluster.network
        bw = min(self.cluster.nic(a).port_bw_gbps, self.cluster.nic(b).port_bw_gbps)
        return self.config.to_overhead_us + net.rtt(a, b) / 2.0 + nbytes * 8 / (bw * 1000.0)

    def add_app(self, app: AppSpec, placement: Placement) -> AppRuntime:
        rt = AppRuntime(self, app, placement.anchor_nic, self.fabric)
        self.apps[app.app_id] = rt
        for cp in placement.copies:
            rt.add_copy(cp)
        return rt

    def attach(self, source: TrafficSource) -> None:
        rt = self.apps[source.app_id]
        rt.source = source
        if isinstance(source, RateSource):
            source.start(rt)
        else:
            rt.kick()

    def inject(self, app_id: str, pkt: Packet, at: float) -> None:
        """Offer one packet at time ``at`` (its ingress time is ``at``)."""
        rt = self.apps[app_id]
        pkt.ingress_time = at
        self.engine.at(at + self.config.to_overhead_us, PRIO_ARRIVAL, lambda p: rt.offer(p), pkt)

    def kill_nic(self, nic_id: str) -> None:
        """The NIC stops processing now; nothing notices until detection."""
        self.dead.add(nic_id)

    def revive_nic(self, nic_id: str) -> None:
        self.dead.discard(nic_id)

    def run(self, until: float) -> "SimStats":
        self.engine.run(until)
        return SimStats(self, until)

    def pool_busy(self) -> Dict[Tuple[str, int, str], float]:
        return {(a, k[0], k[1]): p.busy_us for a, rt in self.apps.items() for k, p in rt.pools.items()}


class SimStats:
    """Snapshot of a run, reduced to plain data for reports."""

    def __init__(self, sim: Simulator, until: float):
        self.until = until
        self.apps = {a: rt.stats for a, rt in sim.apps.items()}
        self.events = sim.engine.processed
        self.pool_busy = sim.pool_busy()
        self._sim = sim

    def rate_gbps(self, app_id: str, t0: float, t1: float) -> float:
        return self.apps[app_id].rate_gbps(t0, t1)

    def nic_utilization(self, t0: float, t1: float, busy0: Optional[Dict] = None) -> Dict[str, dict]:
        """Busy fraction of allocatable cores and of accelerators on each NIC."""
        sim = self._sim
        span = max(t1 - t0, 1e-9)
        cpu: Dict[str, float] = {}
        acc: Dict[str, float] = {}
        for rt in sim.apps.values():
            for (stage, nic), pool in rt.pools.items():
                b = pool.busy_us - (busy0 or {}).get((rt.app.app_id, stage, nic), 0.0)
                d = acc if pool.is_accel else cpu
                d[nic] = d.get(nic, 0.0) + b
        out = {}
        for nid in sim.cluster.order:
            nic = sim.cluster.nic(nid)
            ncpu = max(nic.unit_capacity, 1)
            nacc = max(len(nic.accelerators), 1)
            out[nid] = {
                "cores_allocated": nic.used_units / ncpu,
                "cores_busy": min(1.0, cpu.get(nid, 0.0) / (ncpu * span)),
                "accel_busy": min(1.0, acc.get(nid, 0.0) / (nacc * span)),
            }
        return out


# ---------------------------------------------------------------------------
# stand-alone helpers mirroring the TO's steps


def instantiate(sim: Simulator, app: AppSpec, placement: Placement) -> List[Pipeline]:
    """Create rings, pipelines and server pools for ``placement``."""
    rt = sim.add_app(app, placement)
    return rt.pipelines()


def partition(batch: Sequence[Packet], pipelines: Sequence, table: FlowTable, *, start_batch: int = 0,
              now: float = 0.0) -> Tuple[Dict[int, List[Packet]], List[Packet]]:
    """Stamp ``batch`` with one batch sequence number and spread it flow-affinely.

    Pipelines need ``pid``, ``capacity`` and a ``rings[0]`` ring buffer.
    Returns (pid -> packets pushed, dropped packets).
    """
    out: Dict[int, List[Packet]] = {}
    dropped: List[Packet] = []
    for pkt in batch:
        pkt.batch_seq = start_batch
        pipe = table.choose(pkt.flow, pipelines, now, pkt.flow)
        if pipe is None:
            dropped.append(pkt)
            continue
        pipe.rings[0].push(pkt)
        out.setdefault(pipe.pid, []).append(pkt)
    return out, dropped


def aggregate(events: Iterable[Tuple[str, Packet]], admitted: Iterable[Packet]) -> List[Packet]:
    """Replay completion/drop events through the reorder stage.

    ``admitted`` lists packets in generator order; ``events`` are
    ("done" | "drop", packet) in completion order. Returns released packets.
    """
    out: List[Packet] = []
    agg = Aggregator(lambda p, now: out.append(p))
    for p in admitted:
        agg.admit(p)
    for kind, p in events:
        if kind == "done":
            agg.complete(p, 0.0)
        else:
            agg.drop(p, 0.0)
    return out
