"""Offline profiling in virtual time.

An application is run alone on an empty copy of the rack under its minimal
allocation (one unit or accelerator per stage) with saturating traffic.
The egress rate gives the baseline throughput and the mean charged service
time of each stage gives its latency. A separate single-packet run gives the
unloaded end-to-end latency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .app_model import AppSpec, Packet
from .cluster import Cluster
from .dataplane import DataplaneConfig, SaturatingSource, Simulator, make_flows
from .errors import InsufficientForProfiling, NothingPlaceable
from .planner import AllocationPlan, place
from .state_engine import StateFabric


@dataclass(frozen=True)
class TrafficModel:
    pkt_bytes: int = 1500
    n_flows: int = 16
    seed: int = 0
    payload: Optional[bytes] = None


@dataclass(frozen=True)
class Profile:
    app_id: str
    lambda_gbps: float
    stage_latency_us: Tuple[float, ...]
    pipeline_latency_us: float
    pkt_bytes: int = 1500
    nics: Tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "app_id": self.app_id,
            "lambda_gbps": self.lambda_gbps,
            "stage_latency_us": list(self.stage_latency_us),
            "pipeline_latency_us": self.pipeline_latency_us,
            "pkt_bytes": self.pkt_bytes,
            "nics": list(self.nics),
        }


def minimal_allocation(app: AppSpec) -> AllocationPlan:
    n = len(app.stages)
    return AllocationPlan((1,) * n, (1,) * n, 0, 1, None)


def full_copy(R: Sequence[int]) -> AllocationPlan:
    return AllocationPlan(tuple(R), tuple(R), 1, 0, None)


def empty_copy(cluster: Cluster) -> Cluster:
    """A snapshot of ``cluster`` with every grant returned."""
    work = cluster.snapshot()
    for g in list(work.grants.values()):
        if g.live:
            work.reclaim(g)
    return work


def _sim_for(app: AppSpec, alloc: AllocationPlan, cluster: Cluster, config: Optional[DataplaneConfig]):
    work = empty_copy(cluster)
    try:
        placement = place(app, alloc, work)
    except NothingPlaceable as exc:
        raise InsufficientForProfiling(f"{app.app_id}: {exc}") from None
    fabric = None
    if app.stateful:
        fabric = StateFabric(work.network, work.order, registry=app.registry)
        fabric.register_app(app.app_id, app.access_pattern, placement.nics())
    sim = Simulator(work, config, fabric)
    sim.add_app(app, placement)
    return sim, placement


def saturated_rate(app: AppSpec, alloc: AllocationPlan, cluster: Cluster, traffic: TrafficModel = TrafficModel(),
                   *, warmup_us: float = 10_000.0, measure_us: float = 100_000.0,
                   config: Optional[DataplaneConfig] = None):
    """Run ``alloc`` saturated; returns (Gbps, simulator, placement)."""
    sim, placement = _sim_for(app, alloc, cluster, config)
    flows = make_flows(traffic.n_flows, traffic.seed)
    sim.attach(SaturatingSource(app.app_id, flows, traffic.pkt_bytes, traffic.payload))
    end = warmup_us + measure_us
    stats = sim.run(end)
    return stats.rate_gbps(app.app_id, warmup_us, end), sim, placement


def unloaded_latency(app: AppSpec, alloc: AllocationPlan, cluster: Cluster,
                     traffic: TrafficModel = TrafficModel(), config: Optional[DataplaneConfig] = None) -> float:
    """End-to-end latency of a single packet through an idle deployment."""
    sim, _ = _sim_for(app, alloc, cluster, config)
    flow = make_flows(1, traffic.seed)[0]
    sim.inject(app.app_id, Packet(flow, traffic.pkt_bytes, traffic.payload), 0.0)
    sim.run(float("inf"))
    lats = sim.apps[app.app_id].stats.lats
    if not lats:
        raise InsufficientForProfiling(f"{app.app_id}: the probe packet never left the pipeline")
    return lats[0]


def profile(app: AppSpec, cluster: Cluster, traffic: TrafficModel = TrafficModel(), *,
            warmup_us: float = 10_000.0, measure_us: float = 100_000.0,
            config: Optional[DataplaneConfig] = None) -> Profile:
    """Profile ``app`` under its minimal allocation on an empty copy of ``cluster``."""
    alloc = minimal_allocation(app)
    lam, sim, placement = saturated_rate(app, alloc, cluster, traffic, warmup_us=warmup_us,
                                         measure_us=measure_us, config=config)
    rt = sim.apps[app.app_id]
    L: List[float] = []
    for i in range(len(app.stages)):
        busy = sum(p.busy_us for (s, _), p in rt.pools.items() if s == i)
        n = sum(p.started for (s, _), p in rt.pools.items() if s == i)
        L.append(busy / n if n else 0.0)
    if lam <= 0 or any(x <= 0 for x in L):
        raise InsufficientForProfiling(f"{app.app_id}: no steady-state output during profiling")
    lat = unloaded_latency(app, alloc, cluster, traffic, config)
    return Profile(app.app_id, lam, tuple(L), lat, traffic.pkt_bytes, tuple(placement.nics()))


def measure_t(app: AppSpec, R: Sequence[int], cluster: Cluster, traffic: TrafficModel = TrafficModel(), *,
              warmup_us: float = 10_000.0, measure_us: float = 100_000.0,
              config: Optional[DataplaneConfig] = None) -> float:
    """Saturated throughput of one full copy with replicas ``R``."""
    rate, _, _ = saturated_rate(app, full_copy(R), cluster, traffic, warmup_us=warmup_us,
                                measure_us=measure_us, config=config)
    return rate

