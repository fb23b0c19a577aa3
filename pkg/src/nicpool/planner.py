"""Replication planning, allocation, placement and rescaling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .app_model import AppSpec, StageKind
from .cluster import AcceleratorKind, Cluster, Grant, ResourceVector
from .errors import EmptyInput, NonPositiveLatency, NonPositiveTarget, NothingPlaceable

_EPS = 1e-9


def _snap(x: float) -> float:
    r = round(x)
    return float(r) if abs(x - r) <= _EPS * max(1.0, abs(x)) else x


def ceil_tol(x: float) -> int:
    """ceil() that ignores float noise such as 1.1/0.1 = 11.000000000000002."""
    return int(math.ceil(_snap(x)))


def floor_tol(x: float) -> int:
    return int(math.floor(_snap(x)))


# ---------------------------------------------------------------------------
# partial pipeline replication


@dataclass(frozen=True)
class ReplicationPlan:
    R: Tuple[int, ...]
    segments: Tuple[Tuple[int, int], ...]  # inclusive (start, end); end is the segment minimum

    @property
    def pipeline_count(self) -> int:
        return max(self.R)

    def to_dict(self) -> dict:
        return {"R": list(self.R), "segments": [list(s) for s in self.segments],
                "pipeline_count": self.pipeline_count}


def plan_replication(L: Sequence[float]) -> ReplicationPlan:
    """Replicate each stage so none starves its slowest-consumer successor.

    Repeatedly take the fastest stage ``d`` of the remaining suffix (earliest
    on ties). Every stage before it in the suffix gets ``ceil(L_i / L_d)``
    replicas, ``d`` itself gets one, and the scan resumes after ``d``.
    """
    L = list(L)
    if not L:
        raise EmptyInput("latency list is empty")
    for x in L:
        if not x > 0:
            raise NonPositiveLatency(f"stage latency must be > 0, got {x}")
    R = [1] * len(L)
    segments = []
    start = 0
    while start < len(L):
        d = min(range(start, len(L)), key=lambda i: (L[i], i))
        for i in range(start, d):
            R[i] = ceil_tol(L[i] / L[d])
        R[d] = 1
        segments.append((start, d))
        start = d + 1
    return ReplicationPlan(tuple(R), tuple(segments))


# ---------------------------------------------------------------------------
# allocation


def stage_vector(app: Optional[AppSpec], replicas: Sequence[int]) -> ResourceVector:
    """Resources for ``replicas[i]`` copies of each stage."""
    cpu = 0
    accel: Dict[AcceleratorKind, int] = {}
    for i, n in enumerate(replicas):
        if app is not None and app.stages[i].kind == StageKind.ACCEL_FN:
            k = app.stages[i].accel
            accel[k] = accel.get(k, 0) + n
        else:
            cpu += n
    return ResourceVector(cpu, accel)


@dataclass(frozen=True)
class AllocationPlan:
    R: Tuple[int, ...]
    per_stage_total: Tuple[int, ...]
    full_copies: int
    remainder_units: int
    total_rv: ResourceVector

    def to_dict(self) -> dict:
        return {
            "R": list(self.R),
            "per_stage_total": list(self.per_stage_total),
            "full_copies": self.full_copies,
            "remainder_units": self.remainder_units,
            "total_rv": self.total_rv.to_dict(),
        }


def compute_allocation(R, P: float, t: float, lam: float, app: Optional[AppSpec] = None) -> AllocationPlan:
    """``R * floor(P/t) + I * ceil((P - floor(P/t) * t) / lam)``.

    ``I`` is one replica of every stage. ``app`` only matters for splitting
    the total into CPU units and accelerators; without it every stage is CPU.
    """
    if isinstance(R, ReplicationPlan):
        R = R.R
    R = tuple(int(r) for r in R)
    if not R:
        raise EmptyInput("replication vector is empty")
    for name, v in (("P", P), ("t", t), ("lambda", lam)):
        if not v > 0:
            raise NonPositiveTarget(f"{name} must be > 0, got {v}")
    full = floor_tol(P / t)
    rest = P - full * t
    rem = ceil_tol(rest / lam) if rest > _EPS * max(1.0, P) else 0
    totals = tuple(r * full + rem for r in R)
    return AllocationPlan(R, totals, full, rem, stage_vector(app, totals))


# ---------------------------------------------------------------------------
# placement


@dataclass(frozen=True)
class PerfTarget:
    throughput_gbps: float
    latency_us: Optional[float] = None
    latency_sensitive: bool = False


@dataclass
class SubPipeline:
    copy_id: int
    subpipe_seq: int
    nic_id: str
    start: int
    end: int  # inclusive

    def to_dict(self) -> dict:
        return {"copy": self.copy_id, "subpipe_seq": self.subpipe_seq, "nic": self.nic_id,
                "stages": [self.start, self.end]}


@dataclass
class CopyPlacement:
    """One pipeline copy: ``replicas[i]`` servers of stage i on ``stage_nics[i]``."""

    copy_id: int
    kind: str  # "full" or "minimal"
    replicas: Tuple[int, ...]
    stage_nics: Tuple[str, ...]
    grants: List[Grant] = field(default_factory=list)

    @property
    def pipeline_count(self) -> int:
        return max(self.replicas)

    def nics(self) -> List[str]:
        out: List[str] = []
        for n in self.stage_nics:
            if n not in out:
                out.append(n)
        return out

    def subpipelines(self) -> List[SubPipeline]:
        subs: List[SubPipeline] = []
        start = 0
        for i in range(1, len(self.stage_nics) + 1):
            if i == len(self.stage_nics) or self.stage_nics[i] != self.stage_nics[start]:
                subs.append(SubPipeline(self.copy_id, len(subs), self.stage_nics[start], start, i - 1))
                start = i
        return subs

    def to_dict(self) -> dict:
        return {"copy": self.copy_id, "kind": self.kind, "replicas": list(self.replicas),
                "stage_nics": list(self.stage_nics),
                "subpipelines": [s.to_dict() for s in self.subpipelines()]}


@dataclass
class Placement:
    app_id: str
    copies: List[CopyPlacement]
    latency_sensitive: bool = False
    best_effort: bool = False
    requested: Tuple[int, int] = (0, 0)  # (full copies, minimal copies)
    id_floor: int = 0  # copy ids below this were used before

    @property
    def anchor_nic(self) -> Optional[str]:
        return self.copies[0].stage_nics[0] if self.copies else None

    @property
    def subpipelines(self) -> List[SubPipeline]:
        return [s for c in self.copies for s in c.subpipelines()]

    @property
    def assignments(self) -> Dict[Tuple[int, int, int], str]:
        """(copy, stage, replica) -> nic_id."""
        out = {}
        for c in self.copies:
            for i, (n, nic) in enumerate(zip(c.replicas, c.stage_nics)):
                for r in range(n):
                    out[(c.copy_id, i, r)] = nic
        return out

    def per_stage_total(self) -> List[int]:
        if not self.copies:
            return []
        tot = [0] * len(self.copies[0].replicas)
        for c in self.copies:
            for i, n in enumerate(c.replicas):
                tot[i] += n
        return tot

    def counts(self) -> Tuple[int, int]:
        full = sum(1 for c in self.copies if c.kind == "full")
        return full, len(self.copies) - full

    def nics(self) -> List[str]:
        out: List[str] = []
        for c in self.copies:
            for n in c.nics():
                if n not in out:
                    out.append(n)
        return out

    def grants(self) -> List[Grant]:
        return [g for c in self.copies for g in c.grants]

    def next_copy_id(self) -> int:
        return max(max((c.copy_id for c in self.copies), default=-1) + 1, self.id_floor)

    def to_dict(self) -> dict:
        full, minimal = self.counts()
        return {
            "app_id": self.app_id,
            "anchor_nic": self.anchor_nic,
            "best_effort": self.best_effort,
            "latency_sensitive": self.latency_sensitive,
            "full_copies": full,
            "minimal_copies": minimal,
            "requested": list(self.requested),
            "per_stage_total": self.per_stage_total(),
            "copies": [c.to_dict() for c in self.copies],
        }


class _Ledger:
    """Tentative free resources while a copy is being laid out."""

    def __init__(self, cluster: Cluster, nics: Sequence[str]):
        self.cluster = cluster
        self.cpu = {n: cluster.nic(n).free_units for n in nics}
        self.acc = {(n, k): len(cluster.nic(n).free_accels(k)) for n in nics for k in AcceleratorKind}

    def has(self, nic: str, kind, n: int) -> bool:
        if kind is None:
            return self.cpu[nic] >= n
        return self.acc[(nic, kind)] >= n

    def take(self, nic: str, kind, n: int) -> None:
        if kind is None:
            self.cpu[nic] -= n
        else:
            self.acc[(nic, kind)] -= n


def _candidates(cluster: Cluster, app_id: str, pool: Optional[Iterable[str]], exclusive: bool,
                include_standby: bool = False) -> List[str]:
    cands = cluster.candidates(include_standby, pool=pool)
    if exclusive:
        foreign = {g.nic_id for g in cluster.grants.values() if g.live and g.app_id != app_id}
        cands = [n for n in cands if n not in foreign]
    return cands


def _layout_copy(app: AppSpec, replicas: Sequence[int], cluster: Cluster, cands: List[str],
                 prefer: Optional[str], single_nic: bool) -> Optional[List[str]]:
    """Pick a NIC for every stage of one copy, or None if it does not fit."""
    if not cands:
        return None
    need = stage_vector(app, replicas)
    whole = [n for n in cands if cluster.fits(n, need)]
    if single_nic:
        if not whole:
            return None
        start = prefer if prefer in whole else cluster.most_resourceful(need, include_standby=True, pool=whole)
        return [start] * len(replicas)
    if prefer in whole:
        start = prefer
    elif whole:
        start = cluster.most_resourceful(need, include_standby=True, pool=whole)
    else:
        start = cluster.most_resourceful(need, include_standby=True, pool=cands)
    led = _Ledger(cluster, cands)
    cur = start
    out: List[str] = []
    for i, n in enumerate(replicas):
        st = app.stages[i]
        kind = st.accel if st.kind == StageKind.ACCEL_FN else None
        if kind is not None:
            owners = [c for c in cands if led.has(c, kind, n)]
            if not owners:
                return None
            if cur not in owners:
                owners.sort(key=lambda c: (cluster.nic(c).best_metric(kind).rank_key(), cands.index(c)))
                cur = owners[0]
        elif not led.has(cur, None, n):
            spill = [c for c in cands if led.has(c, None, n)]
            if not spill:
                return None
            cur = max(spill, key=lambda c: (led.cpu[c], -cands.index(c)))
        led.take(cur, kind, n)
        out.append(cur)
    return out


def _commit_copy(app: AppSpec, copy_id: int, kind: str, replicas: Sequence[int], nics: Sequence[str],
                 cluster: Cluster) -> CopyPlacement:
    per_nic: Dict[str, List[int]] = {}
    for i, (n, nic) in enumerate(zip(replicas, nics)):
        per_nic.setdefault(nic, [0] * len(replicas))[i] += n
    grants = [cluster.allocate(nic, stage_vector(app, reps), app.app_id) for nic, reps in per_nic.items()]
    return CopyPlacement(copy_id, kind, tuple(replicas), tuple(nics), grants)


def _place_copies(app: AppSpec, todo: List[Tuple[str, Tuple[int, ...]]], cluster: Cluster, *,
                  first_id: int, prefer: Optional[str], pool, exclusive: bool,
                  single_nic: bool, include_standby: bool = False) -> List[CopyPlacement]:
    placed: List[CopyPlacement] = []
    cands = _candidates(cluster, app.app_id, pool, exclusive, include_standby)
    for kind, reps in todo:
        nics = _layout_copy(app, reps, cluster, cands, prefer, single_nic)
        if nics is None:
            break
        placed.append(_commit_copy(app, first_id + len(placed), kind, reps, nics, cluster))
        prefer = nics[0]
        if single_nic:
            cands = [prefer]
    return placed


def _copy_list(R: Sequence[int], full: int, minimal: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [("full", tuple(R))] * full + [("minimal", (1,) * len(R))] * minimal


def place(app: AppSpec, alloc: AllocationPlan, cluster: Cluster, target: Optional[PerfTarget] = None, *,
          pool: Optional[Iterable[str]] = None, exclusive: bool = False) -> Placement:
    """Greedy placement of ``alloc``'s copies onto ``cluster`` (grants are taken).

    Full copies go first, then minimal ones. Each copy starts on the NIC the
    previous copy started on while it still fits, otherwise on the most
    resourceful NIC, and spills stage by stage in chain order. Accelerator
    stages go to a NIC owning the kind, the current one if possible, else
    the one with the best latency model. ``exclusive`` forbids NICs that hold
    another application's grants (whole-NIC allocation).
    """
    latency_sensitive = bool(target and target.latency_sensitive)
    pool = list(pool) if pool is not None else None
    todo = _copy_list(alloc.R, alloc.full_copies, alloc.remainder_units)
    if not todo:
        todo = _copy_list(alloc.R, 0, 1)
    placed = _place_copies(app, todo, cluster, first_id=0, prefer=None, pool=pool,
                           exclusive=exclusive, single_nic=latency_sensitive)
    if not placed and alloc.full_copies and not latency_sensitive:
        # not even one full copy fits; fall back to minimal copies
        todo_min = _copy_list(alloc.R, 0, alloc.full_copies + alloc.remainder_units)
        placed = _place_copies(app, todo_min, cluster, first_id=0, prefer=None, pool=pool,
                               exclusive=exclusive, single_nic=False)
    if not placed:
        raise NothingPlaceable(f"{app.app_id}: not even a minimal pipeline fits")
    return Placement(
        app_id=app.app_id,
        copies=placed,
        latency_sensitive=latency_sensitive,
        best_effort=len(placed) < len(todo),
        requested=(alloc.full_copies, alloc.remainder_units),
    )


def place_more(current: Placement, app: AppSpec, cluster: Cluster, copies: Sequence[Tuple[str, Sequence[int]]],
               *, prefer: Optional[str] = None, pool: Optional[Iterable[str]] = None,
               include_standby: bool = False) -> List[CopyPlacement]:
    """Place extra copies for ``current`` in order, stopping at the first that does not fit.

    Used to replace copies lost with a failed NIC. Grants are taken but
    ``current`` is left unchanged.
    """
    todo = [(kind, tuple(reps)) for kind, reps in copies]
    pool = list(pool) if pool is not None else None
    return _place_copies(app, todo, cluster, first_id=current.next_copy_id(), prefer=prefer, pool=pool,
                         exclusive=False, single_nic=current.latency_sensitive, include_standby=include_standby)


def release(placement: Placement, cluster: Cluster, copy_ids: Optional[Iterable[int]] = None) -> None:
    """Reclaim the grants of the given copies (all by default) and drop them."""
    ids = set(copy_ids) if copy_ids is not None else {c.copy_id for c in placement.copies}
    keep = []
    for c in placement.copies:
        if c.copy_id in ids:
            for g in c.grants:
                if cluster.is_live(g):
                    cluster.reclaim(g)
        else:
            keep.append(c)
    placement.copies = keep


def fits_all(apps: Sequence[Tuple[AppSpec, AllocationPlan]], cluster: Cluster, pool: Sequence[str], *,
             exclusive: bool) -> bool:
    """Whether every app, in order, gets its full allocation inside ``pool``."""
    work = cluster.snapshot()
    for app, alloc in apps:
        try:
            pl = place(app, alloc, work, pool=pool, exclusive=exclusive)
        except NothingPlaceable:
            return False
        if pl.best_effort:
            return False
    return True


def nics_required(apps: Sequence[Tuple[AppSpec, AllocationPlan]], cluster: Cluster, *,
                  exclusive: bool) -> Optional[int]:
    """Smallest k such that the first k NICs host every app in full, or None."""
    order = cluster.candidates()
    for k in range(1, len(order) + 1):
        if fits_all(apps, cluster, order[:k], exclusive=exclusive):
            return k
    return None


# ---------------------------------------------------------------------------
# rescaling


@dataclass
class PlacementDelta:
    add: List[CopyPlacement] = field(default_factory=list)
    remove: List[int] = field(default_factory=list)
    migrations: List[Tuple[int, Optional[str]]] = field(default_factory=list)
    alloc: Optional[AllocationPlan] = None
    best_effort: bool = False

    def is_empty(self) -> bool:
        return not self.add and not self.remove

    def to_dict(self) -> dict:
        return {
            "add": [c.to_dict() for c in self.add],
            "remove": list(self.remove),
            "migrations": [[c, n] for c, n in self.migrations],
            "best_effort": self.best_effort,
        }


def rescale(current: Placement, app: AppSpec, cluster: Cluster, new_target: PerfTarget, *,
            R: Sequence[int], t_gbps: float, lambda_gbps: float,
            pool: Optional[Iterable[str]] = None) -> PlacementDelta:
    """Work out (and for growth, allocate) the change to reach ``new_target``.

    Growth only adds copies; existing copies and grants are untouched.
    Shrinking only removes copies, those off the anchor NIC first and newest
    first, as long as what stays still covers the target. Removed copies are
    not released here: the caller drains them and then calls :func:`release`.
    """
    R = tuple(R)
    P = new_target.throughput_gbps
    alloc = compute_allocation(R, P, t_gbps, lambda_gbps, app)
    have_full, have_min = current.counts()
    delta = PlacementDelta(alloc=alloc)
    capacity = have_full * t_gbps + have_min * lambda_gbps
    if current.copies and capacity >= P * (1 - _EPS):
        anchor = current.anchor_nic

        def order(c: CopyPlacement):
            remote = anchor not in c.stage_nics
            return (0 if remote else 1, -c.copy_id)

        kept = len(current.copies)
        for c in sorted(current.copies, key=order):
            rate = t_gbps if c.kind == "full" else lambda_gbps
            if kept > 1 and capacity - rate >= P * (1 - _EPS):
                capacity -= rate
                kept -= 1
                delta.remove.append(c.copy_id)
                delta.migrations.append((c.copy_id, None))
                if c.kind == "full":
                    have_full -= 1
                else:
                    have_min -= 1
        totals = tuple(r * have_full + have_min for r in R)
        delta.alloc = AllocationPlan(R, totals, have_full, have_min, stage_vector(app, totals))
        return delta
    want_full, want_min = alloc.full_copies, alloc.remainder_units
    add_full = max(0, want_full - have_full)
    add_min = max(0, want_min - have_min)
    todo = _copy_list(R, add_full, add_min)
    if todo:
        prefer = current.copies[-1].stage_nics[0] if current.copies else current.anchor_nic
        pool = list(pool) if pool is not None else None
        delta.add = _place_copies(app, todo, cluster, first_id=current.next_copy_id(), prefer=prefer,
                                  pool=pool, exclusive=False, single_nic=current.latency_sensitive)
        delta.best_effort = len(delta.add) < len(todo)
    return delta


def apply_delta(current: Placement, delta: PlacementDelta, cluster: Cluster) -> None:
    """Fold a delta into ``current`` and release removed copies immediately."""
    release(current, cluster, delta.remove)
    current.copies.extend(delta.add)
    if delta.alloc is not None:
        current.requested = (delta.alloc.full_copies, delta.alloc.remainder_units)
    current.best_effort = delta.best_effort
