"""Rack model: heterogeneous NICs, accelerators, links, and grant bookkeeping."""

from __future__ import annotations

import copy
import enum
import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .errors import (
    BadAcceleratorKind,
    EmptyCluster,
    GrantReclaimed,
    Insufficient,
    NegativeResource,
    UnknownNic,
)

GB_PER_UNIT = 4
DEFAULT_RTT_US = 4.52
PACKET_BITS_REF = 1500 * 8


class AcceleratorKind(str, enum.Enum):
    REGEX = "Regex"
    COMPRESSION = "Compression"
    AES = "AES"
    SHA = "SHA"

    @classmethod
    def parse(cls, value) -> "AcceleratorKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if str(value).lower() == kind.value.lower():
                return kind
        raise BadAcceleratorKind(f"unknown accelerator kind {value!r}")


CPU_UNIT = "CpuUnit"


@dataclass(frozen=True)
class LatencyModel:
    """Service time of one operation: ``fixed_us + per_byte_us * nbytes``."""

    fixed_us: float = 0.0
    per_byte_us: float = 0.0

    def __post_init__(self):
        if self.fixed_us < 0 or self.per_byte_us < 0:
            raise NegativeResource("latency model terms must be >= 0")

    def __call__(self, nbytes: int) -> float:
        return self.fixed_us + self.per_byte_us * nbytes

    def rank_key(self) -> Tuple[float, float]:
        return (self.fixed_us, self.per_byte_us)


class ResourceVector:
    """CPU resource units plus per-kind accelerator counts."""

    __slots__ = ("cpu_units", "accel")

    def __init__(self, cpu_units: int = 0, accel: Optional[Mapping] = None):
        if cpu_units < 0:
            raise NegativeResource("cpu_units must be >= 0")
        self.cpu_units = int(cpu_units)
        acc: Dict[AcceleratorKind, int] = {}
        for k, v in (accel or {}).items():
            if v < 0:
                raise NegativeResource(f"accelerator count for {k} must be >= 0")
            if v:
                acc[AcceleratorKind.parse(k)] = int(v)
        self.accel = acc

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        acc = dict(self.accel)
        for k, v in other.accel.items():
            acc[k] = acc.get(k, 0) + v
        return ResourceVector(self.cpu_units + other.cpu_units, acc)

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        if other.cpu_units > self.cpu_units:
            raise NegativeResource("subtraction would make cpu_units negative")
        acc = dict(self.accel)
        for k, v in other.accel.items():
            left = acc.get(k, 0) - v
            if left < 0:
                raise NegativeResource(f"subtraction would make {k.value} negative")
            acc[k] = left
        return ResourceVector(self.cpu_units - other.cpu_units, acc)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResourceVector):
            return NotImplemented
        return self.cpu_units == other.cpu_units and self.accel == other.accel

    def __hash__(self):
        return hash((self.cpu_units, tuple(sorted((k.value, v) for k, v in self.accel.items()))))

    def __repr__(self) -> str:
        acc = ", ".join(f"{k.value}:{v}" for k, v in sorted(self.accel.items(), key=lambda kv: kv[0].value))
        return f"ResourceVector(cpu_units={self.cpu_units}, accel={{{acc}}})"

    def is_zero(self) -> bool:
        return self.cpu_units == 0 and not self.accel

    def to_dict(self) -> dict:
        return {
            "cpu_units": self.cpu_units,
            "accel": {k.value: v for k, v in sorted(self.accel.items(), key=lambda kv: kv[0].value)},
        }


@dataclass
class AcceleratorUnit:
    kind: AcceleratorKind
    perf_metric: LatencyModel
    capacity_gbps: float = 0.0
    unit_id: str = ""
    allocated_to: Optional[str] = None

    def __post_init__(self):
        self.kind = AcceleratorKind.parse(self.kind)
        if not self.capacity_gbps:
            # one unit serves one packet at a time; reported capacity assumes 1500 B packets
            t = self.perf_metric(1500)
            self.capacity_gbps = PACKET_BITS_REF / t / 1000.0 if t > 0 else float("inf")


@dataclass
class NicDescriptor:
    nic_id: str
    model: str
    total_cores: int
    memory_gb: int
    accelerators: List[AcceleratorUnit] = field(default_factory=list)
    port_bw_gbps: float = 100.0
    reserved_to_cores: int = 1
    standby: bool = False
    # bookkeeping
    used_units: int = 0

    def __post_init__(self):
        if self.total_cores < 0 or self.memory_gb < 0 or self.reserved_to_cores < 0:
            raise NegativeResource(f"{self.nic_id}: negative resource in descriptor")
        if self.port_bw_gbps <= 0:
            raise NegativeResource(f"{self.nic_id}: port bandwidth must be positive")
        for i, unit in enumerate(self.accelerators):
            if not unit.unit_id:
                unit.unit_id = f"{self.nic_id}/{unit.kind.value}{i}"

    @property
    def unit_capacity(self) -> int:
        cores = max(0, self.total_cores - self.reserved_to_cores)
        return min(cores, self.memory_gb // GB_PER_UNIT)

    @property
    def free_units(self) -> int:
        return self.unit_capacity - self.used_units

    @property
    def allocated_cores(self) -> int:
        return self.used_units

    @property
    def allocated_memory_gb(self) -> int:
        return self.used_units * GB_PER_UNIT

    def free_accels(self, kind: AcceleratorKind) -> List[AcceleratorUnit]:
        units = [u for u in self.accelerators if u.kind == kind and u.allocated_to is None]
        return sorted(units, key=lambda u: (u.perf_metric.rank_key(), u.unit_id))

    def free_vector(self) -> ResourceVector:
        acc: Dict[AcceleratorKind, int] = {}
        for u in self.accelerators:
            if u.allocated_to is None:
                acc[u.kind] = acc.get(u.kind, 0) + 1
        return ResourceVector(self.free_units, acc)

    def total_vector(self) -> ResourceVector:
        acc: Dict[AcceleratorKind, int] = {}
        for u in self.accelerators:
            acc[u.kind] = acc.get(u.kind, 0) + 1
        return ResourceVector(self.unit_capacity, acc)

    def has_kind(self, kind: AcceleratorKind) -> bool:
        return any(u.kind == kind for u in self.accelerators)

    def best_metric(self, kind: AcceleratorKind, free_only: bool = True) -> Optional[LatencyModel]:
        units = self.free_accels(kind) if free_only else [u for u in self.accelerators if u.kind == kind]
        if not units:
            return None
        return min((u.perf_metric for u in units), key=lambda m: m.rank_key())


@dataclass
class Grant:
    grant_id: int
    app_id: str
    nic_id: str
    req: ResourceVector
    units: Tuple[str, ...] = ()
    live: bool = True


class RackNetwork:
    """Symmetric pairwise round-trip latencies with a default scalar."""

    def __init__(self, default_rtt_us: float = DEFAULT_RTT_US, rtt_us: Optional[Mapping] = None):
        if default_rtt_us < 0:
            raise NegativeResource("rtt must be >= 0")
        self.default_rtt_us = float(default_rtt_us)
        self._rtt: Dict[Tuple[str, str], float] = {}
        for (a, b), v in (rtt_us or {}).items():
            self.set_rtt(a, b, v)

    def set_rtt(self, a: str, b: str, value: float) -> None:
        if value < 0:
            raise NegativeResource("rtt must be >= 0")
        if a == b:
            return
        self._rtt[(a, b)] = float(value)
        self._rtt[(b, a)] = float(value)

    def rtt(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        return self._rtt.get((a, b), self.default_rtt_us)


class Cluster:
    """NIC inventory plus allocation state.

    Only the controller mutates a live cluster; planning and profiling work
    on ``snapshot()`` copies.
    """

    def __init__(self, nics: Iterable[NicDescriptor], network: Optional[RackNetwork] = None):
        nics = list(nics)
        if not nics:
            raise EmptyCluster("a cluster needs at least one NIC")
        self.nics: Dict[str, NicDescriptor] = {}
        for nic in nics:
            if nic.nic_id in self.nics:
                raise ValueError(f"duplicate nic_id {nic.nic_id!r}")
            self.nics[nic.nic_id] = nic
        self.order: List[str] = [n.nic_id for n in nics]
        self.network = network or RackNetwork()
        self.grants: Dict[int, Grant] = {}
        self._grant_ids = itertools.count(1)
        self.failed: set = set()

    def __len__(self) -> int:
        return len(self.nics)

    def nic(self, nic_id: str) -> NicDescriptor:
        try:
            return self.nics[nic_id]
        except KeyError:
            raise UnknownNic(f"unknown nic {nic_id!r}") from None

    def index(self, nic_id: str) -> int:
        return self.order.index(nic_id)

    def snapshot(self) -> "Cluster":
        return copy.deepcopy(self)

    def alive(self, nic_id: str) -> bool:
        return nic_id not in self.failed

    def candidates(self, include_standby: bool = False, pool: Optional[Iterable[str]] = None) -> List[str]:
        allowed = set(pool) if pool is not None else None
        out = []
        for nid in self.order:
            nic = self.nics[nid]
            if nid in self.failed:
                continue
            if nic.standby and not include_standby:
                continue
            if allowed is not None and nid not in allowed:
                continue
            out.append(nid)
        return out

    def fits(self, nic_id: str, req: ResourceVector) -> bool:
        nic = self.nic(nic_id)
        if nic_id in self.failed or req.cpu_units > nic.free_units:
            return False
        return all(len(nic.free_accels(k)) >= v for k, v in req.accel.items())

    def allocate(self, nic_id: str, req: ResourceVector, app_id: str) -> Grant:
        nic = self.nic(nic_id)
        if req.cpu_units > nic.free_units or nic_id in self.failed:
            raise Insufficient(CPU_UNIT, nic_id)
        picked: List[AcceleratorUnit] = []
        for kind, count in sorted(req.accel.items(), key=lambda kv: kv[0].value):
            free = nic.free_accels(kind)
            if len(free) < count:
                raise Insufficient(kind.value, nic_id)
            picked.extend(free[:count])
        nic.used_units += req.cpu_units
        for unit in picked:
            unit.allocated_to = app_id
        grant = Grant(next(self._grant_ids), app_id, nic_id, req, tuple(u.unit_id for u in picked))
        self.grants[grant.grant_id] = grant
        return grant

    def reclaim(self, grant: Grant) -> None:
        stored = self.grants.get(grant.grant_id)
        if stored is None or not stored.live:
            raise GrantReclaimed(f"grant {grant.grant_id} already reclaimed")
        nic = self.nic(stored.nic_id)
        nic.used_units -= stored.req.cpu_units
        ids = set(stored.units)
        for unit in nic.accelerators:
            if unit.unit_id in ids:
                unit.allocated_to = None
        stored.live = False
        grant.live = False

    def is_live(self, grant: Grant) -> bool:
        stored = self.grants.get(grant.grant_id)
        return stored is not None and stored.live

    def accel_unit(self, unit_id: str) -> AcceleratorUnit:
        nic_id = unit_id.split("/", 1)[0]
        for unit in self.nic(nic_id).accelerators:
            if unit.unit_id == unit_id:
                return unit
        raise KeyError(unit_id)

    def granted_vector(self, nic_id: str) -> ResourceVector:
        total = ResourceVector()
        for g in self.grants.values():
            if g.live and g.nic_id == nic_id:
                total = total + g.req
        return total

    def most_resourceful(self, need: Optional[ResourceVector] = None, *, include_standby: bool = False,
                         pool: Optional[Iterable[str]] = None, exclude: Iterable[str] = ()) -> str:
        """NIC with the most free CPU units among those that can host ``need``'s accelerators.

        Falls back to the max-free-CPU NIC when no NIC has every accelerator
        kind; the caller then handles accelerators separately. Ties go to the
        NIC listed first in the cluster config.
        """
        if not self.nics:
            raise EmptyCluster("empty cluster")
        excluded = set(exclude)
        cands = [n for n in self.candidates(include_standby, pool) if n not in excluded]
        if not cands:
            raise EmptyCluster("no candidate NICs")
        need = need or ResourceVector()

        def accel_ok(nid):
            nic = self.nics[nid]
            return all(len(nic.free_accels(k)) >= v for k, v in need.accel.items())

        feasible = [n for n in cands if accel_ok(n)] or cands
        best = feasible[0]
        for nid in feasible[1:]:
            if self.nics[nid].free_units > self.nics[best].free_units:
                best = nid
        return best


def build_cluster(config: Mapping) -> Cluster:
    """Build a cluster from a parsed config mapping.

    ``config`` has ``nics`` (list of NIC records, each optionally with a
    ``count`` to stamp out identical NICs) and optionally ``default_rtt_us``
    and ``rtt_us`` (list of ``[a, b, value]`` triples).
    """
    records = config.get("nics") or []
    nics: List[NicDescriptor] = []
    for rec_idx, rec in enumerate(records):
        count = int(rec.get("count", 1))
        if count < 0:
            raise NegativeResource("count must be >= 0")
        base_id = rec.get("id") or rec.get("nic_id")
        for i in range(count):
            if base_id is None:
                nic_id = f"nic{len(nics) + 1}"
            elif count == 1:
                nic_id = str(base_id)
            else:
                nic_id = f"{base_id}{i + 1}"
            accels = []
            for a in rec.get("accelerators", []) or []:
                if isinstance(a, str):
                    a = {"kind": a}
                lat = a.get("latency", {}) or {}
                accels.append(
                    AcceleratorUnit(
                        kind=AcceleratorKind.parse(a["kind"]),
                        perf_metric=LatencyModel(float(lat.get("fixed_us", 1.0)), float(lat.get("per_byte_us", 0.0))),
                        capacity_gbps=float(a.get("capacity_gbps", 0.0)),
                    )
                )
            total_cores = int(rec.get("cores", rec.get("total_cores", 0)))
            nics.append(
                NicDescriptor(
                    nic_id=nic_id,
                    model=str(rec.get("model", "generic")),
                    total_cores=total_cores,
                    memory_gb=int(rec.get("memory_gb", GB_PER_UNIT * total_cores)),
                    accelerators=accels,
                    port_bw_gbps=float(rec.get("port_bw_gbps", 100.0)),
                    reserved_to_cores=int(rec.get("reserved_to_cores", 1)),
                    standby=bool(rec.get("standby", False)),
                )
            )
    if not nics:
        raise EmptyCluster("cluster config lists no NICs")
    net = RackNetwork(float(config.get("default_rtt_us", DEFAULT_RTT_US)))
    for triple in config.get("rtt_us", []) or []:
        a, b, v = triple
        net.set_rtt(str(a), str(b), float(v))
    return Cluster(nics, net)
