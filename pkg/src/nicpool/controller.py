"""Control plane: admission, planning, adaptive scaling and failover.

The controller is the only writer of cluster state during a run. It acts
through events on the simulator's clock, so scaling and recovery take
modeled time: new copies become live ``launch_delay_us`` after the decision,
failures are noticed at the next health check, and backups are refreshed on
every sync tick.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .app_model import AppSpec, StageKind
from .cluster import ResourceVector
from .dataplane import PRIO_CONTROL, AppRuntime, RateSource, Simulator
from .errors import (
    BackupUnavailable,
    EmptyCluster,
    InsufficientForProfiling,
    NicPoolError,
    NothingPlaceable,
)
from .planner import (
    AllocationPlan,
    CopyPlacement,
    PerfTarget,
    Placement,
    ReplicationPlan,
    compute_allocation,
    place,
    place_more,
    plan_replication,
    release,
    rescale,
)
from .profiler import Profile, TrafficModel, measure_t, profile
from .state_engine import StateFabric

MS = 1000.0


class Status(str, enum.Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    BEST_EFFORT = "BestEffort"
    FAILED = "Failed"
    STOPPED = "Stopped"


@dataclass
class ControllerConfig:
    check_interval_us: float = 100 * MS
    sync_interval_us: float = 100 * MS
    launch_delay_us: float = 200 * MS
    profile_warmup_us: float = 10 * MS
    profile_measure_us: float = 100 * MS
    traffic: TrafficModel = field(default_factory=TrafficModel)


@dataclass
class AppDeployment:
    app: AppSpec
    target: PerfTarget
    profile: Optional[Profile] = None
    plan: Optional[ReplicationPlan] = None
    t_gbps: float = 0.0
    alloc: Optional[AllocationPlan] = None
    placement: Optional[Placement] = None
    status: Status = Status.PENDING
    backup_nic: Optional[str] = None
    failover: bool = False
    reason: str = ""
    latency_best_effort: bool = False
    pending: Dict[int, CopyPlacement] = field(default_factory=dict)

    @property
    def app_id(self) -> str:
        return self.app.app_id

    def capacity_gbps(self) -> float:
        """Modeled capacity of the copies currently placed."""
        if self.placement is None or self.profile is None:
            return 0.0
        full, minimal = self.placement.counts()
        return full * self.t_gbps + minimal * self.profile.lambda_gbps

    def to_dict(self) -> dict:
        return {
            "app_id": self.app_id,
            "status": self.status.value,
            "reason": self.reason,
            "target_gbps": self.target.throughput_gbps,
            "latency_sensitive": self.target.latency_sensitive,
            "latency_best_effort": self.latency_best_effort,
            "profile": self.profile.to_dict() if self.profile else None,
            "R": list(self.plan.R) if self.plan else None,
            "segments": [list(s) for s in self.plan.segments] if self.plan else None,
            "t_gbps": self.t_gbps,
            "allocation": self.alloc.to_dict() if self.alloc else None,
            "placement": self.placement.to_dict() if self.placement else None,
            "backup_nic": self.backup_nic,
            "capacity_gbps": self.capacity_gbps(),
        }


class HealthMonitor:
    """Connection-request health checks; a NIC that misses one check is failed."""

    def __init__(self, nics, check_interval_us: float, sync_interval_us: float):
        self.check_interval_us = check_interval_us
        self.sync_interval_us = sync_interval_us
        self.last_ok: Dict[str, float] = {n: 0.0 for n in nics}
        self.suspect: set = set()

    def probe(self, nic_id: str, reachable: bool, now: float) -> bool:
        if reachable:
            self.last_ok[nic_id] = now
            self.suspect.discard(nic_id)
        return reachable


@dataclass
class ScaleOutcome:
    app_id: str
    at_us: float
    ready_at_us: float
    added: List[int]
    removed: List[int]
    best_effort: bool
    noop: bool = False


@dataclass
class RecoveryReport:
    nic_id: str
    failed_at_us: Optional[float]
    detected_at_us: float
    apps: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"nic": self.nic_id, "failed_at_ms": _ms(self.failed_at_us), "detected_at_ms": _ms(self.detected_at_us),
                "apps": self.apps}


def _ms(t: Optional[float]) -> Optional[float]:
    return None if t is None else round(t / MS, 6)


def app_needs(app: AppSpec) -> ResourceVector:
    """Accelerator kinds a single copy needs (CPU omitted)."""
    acc: Dict = {}
    for st in app.stages:
        if st.kind == StageKind.ACCEL_FN:
            acc[st.accel] = acc.get(st.accel, 0) + 1
    return ResourceVector(0, acc)


class Controller:
    def __init__(self, sim: Simulator, config: Optional[ControllerConfig] = None):
        self.sim = sim
        self.cluster = sim.cluster
        if sim.fabric is None:
            sim.fabric = StateFabric(self.cluster.network, self.cluster.order)
        self.fabric: StateFabric = sim.fabric
        self.config = config or ControllerConfig()
        self.deployments: Dict[str, AppDeployment] = {}
        self.admission_order: List[str] = []
        self.log: List[dict] = []
        self.monitor = HealthMonitor(self.cluster.order, self.config.check_interval_us,
                                     self.config.sync_interval_us)
        self.failed_at: Dict[str, float] = {}
        self.recoveries: List[RecoveryReport] = []
        self.resource_snapshot: Dict[str, dict] = {}
        self._started = False

    # --- plumbing ---------------------------------------------------------
    @property
    def now(self) -> float:
        return self.sim.engine.now

    def _event(self, kind: str, **info) -> None:
        rec = {"t_ms": _ms(self.now), "event": kind}
        rec.update(info)
        self.log.append(rec)

    def start(self) -> None:
        """Begin periodic health checks and backup syncs."""
        if self._started:
            return
        self._started = True
        eng = self.sim.engine
        eng.at(self.now + self.config.check_interval_us, PRIO_CONTROL, self._health_tick)
        eng.at(self.now + self.config.sync_interval_us, PRIO_CONTROL, self._sync_tick)

    def at(self, t_us: float, fn, *args) -> None:
        """Schedule a control action (scripted timeline events)."""
        self.sim.engine.at(t_us, PRIO_CONTROL, lambda _: fn(*args))

    def runtime(self, app_id: str) -> AppRuntime:
        return self.sim.apps[app_id]

    # --- admission ----------------------------------------------------------
    def submit_app(self, app: AppSpec, target: PerfTarget, *, failover: bool = False) -> AppDeployment:
        """Profile, plan, allocate and place ``app``; FCFS in call order."""
        dep = AppDeployment(app, target, failover=failover)
        self.deployments[app.app_id] = dep
        self.admission_order.append(app.app_id)
        self._event("submit", app=app.app_id, target_gbps=target.throughput_gbps)
        cfg = self.config
        try:
            prof = profile(app, self.cluster, cfg.traffic, warmup_us=cfg.profile_warmup_us,
                           measure_us=cfg.profile_measure_us)
        except InsufficientForProfiling as exc:
            return self._fail(dep, f"InsufficientForProfiling: {exc}")
        dep.profile = prof
        dep.plan = plan_replication(prof.stage_latency_us)
        try:
            dep.t_gbps = measure_t(app, dep.plan.R, self.cluster, cfg.traffic, warmup_us=cfg.profile_warmup_us,
                                   measure_us=cfg.profile_measure_us)
        except InsufficientForProfiling:
            # a full copy never fits; size everything in minimal copies
            dep.t_gbps = prof.lambda_gbps
        if target.latency_us is not None and prof.pipeline_latency_us > target.latency_us:
            dep.latency_best_effort = True
            self._event("latency_best_effort", app=app.app_id, demanded_us=target.latency_us,
                        provided_us=prof.pipeline_latency_us)
        dep.alloc = compute_allocation(dep.plan, target.throughput_gbps, dep.t_gbps, prof.lambda_gbps, app)
        try:
            dep.placement = place(app, dep.alloc, self.cluster, target)
        except NothingPlaceable as exc:
            return self._fail(dep, f"NothingPlaceable: {exc}")
        if app.stateful:
            self.fabric.register_app(app.app_id, app.access_pattern, dep.placement.nics())
        self._track_ids(dep, dep.placement.copies)
        rt = self.sim.add_app(app, dep.placement)
        rt.on_copy_retired = lambda cid, a=app.app_id: self._retired(a, cid)
        dep.status = Status.BEST_EFFORT if dep.placement.best_effort else Status.RUNNING
        if failover:
            dep.backup_nic = self._pick_backup(dep)
            if dep.backup_nic is None:
                self._event("no_backup", app=app.app_id)
        self._event("placed", app=app.app_id, status=dep.status.value, R=list(dep.plan.R),
                    full=dep.placement.counts()[0], minimal=dep.placement.counts()[1],
                    nics=dep.placement.nics(), backup=dep.backup_nic)
        return dep

    def _fail(self, dep: AppDeployment, reason: str) -> AppDeployment:
        dep.status = Status.FAILED
        dep.reason = reason
        self._event("failed", app=dep.app_id, reason=reason)
        return dep

    def _pick_backup(self, dep: AppDeployment) -> Optional[str]:
        hosting = set(dep.placement.nics()) if dep.placement else set()
        hosting.update(n for c in dep.pending.values() for n in c.stage_nics)
        need = app_needs(dep.app)
        for standby in (True, False):
            try:
                return self.cluster.most_resourceful(need, include_standby=standby, exclude=hosting)
            except EmptyCluster:
                continue
        return None

    # --- scaling ------------------------------------------------------------
    def set_target(self, app_id: str, target: PerfTarget) -> ScaleOutcome:
        dep = self.deployments[app_id]
        now = self.now
        if dep.status in (Status.FAILED, Status.STOPPED) or dep.placement is None:
            self._event("set_target_ignored", app=app_id, status=dep.status.value)
            return ScaleOutcome(app_id, now, now, [], [], dep.status == Status.BEST_EFFORT, noop=True)
        if target == dep.target and not dep.placement.best_effort:
            self._event("set_target_noop", app=app_id, target_gbps=target.throughput_gbps)
            return ScaleOutcome(app_id, now, now, [], [], False, noop=True)
        dep.target = target
        return self._reconcile(dep, "set_target")

    def _reconcile(self, dep: AppDeployment, why: str) -> ScaleOutcome:
        now = self.now
        current = self._current(dep)
        delta = rescale(current, dep.app, self.cluster, dep.target, R=dep.plan.R, t_gbps=dep.t_gbps,
                        lambda_gbps=dep.profile.lambda_gbps)
        dep.alloc = delta.alloc
        for cid in delta.remove:
            self._remove_copy(dep, cid)
        ready = now
        self._track_ids(dep, delta.add)
        if delta.add:
            for cp in delta.add:
                dep.pending[cp.copy_id] = cp
            ready = now + self.config.launch_delay_us
            self.sim.engine.at(ready, PRIO_CONTROL, self._launch, (dep.app_id, [c.copy_id for c in delta.add]))
        dep.placement.requested = (delta.alloc.full_copies, delta.alloc.remainder_units)
        dep.placement.best_effort = delta.best_effort
        dep.status = Status.BEST_EFFORT if delta.best_effort else Status.RUNNING
        self._event(why, app=dep.app_id, target_gbps=dep.target.throughput_gbps,
                    add=[c.copy_id for c in delta.add], remove=list(delta.remove),
                    add_nics=[c.nics() for c in delta.add], best_effort=delta.best_effort,
                    ready_ms=_ms(ready))
        return ScaleOutcome(dep.app_id, now, ready, [c.copy_id for c in delta.add], list(delta.remove),
                            delta.best_effort, noop=delta.is_empty())

    def _current(self, dep: AppDeployment) -> Placement:
        """Placed plus pending copies, as the planner should see them."""
        return Placement(dep.app_id, dep.placement.copies + list(dep.pending.values()),
                         dep.placement.latency_sensitive, id_floor=dep.placement.id_floor)

    def _track_ids(self, dep: AppDeployment, copies) -> None:
        for cp in copies:
            dep.placement.id_floor = max(dep.placement.id_floor, cp.copy_id + 1)

    def _remove_copy(self, dep: AppDeployment, cid: int) -> None:
        if cid in dep.pending:
            cp = dep.pending.pop(cid)
            for g in cp.grants:
                if self.cluster.is_live(g):
                    self.cluster.reclaim(g)
            return
        rt = self.sim.apps.get(dep.app_id)
        if rt is not None and cid in rt.copies:
            rt.drain_copy(cid)
        else:
            release(dep.placement, self.cluster, [cid])

    def _launch(self, arg) -> None:
        app_id, ids = arg
        dep = self.deployments[app_id]
        rt = self.sim.apps[app_id]
        launched = []
        for cid in ids:
            cp = dep.pending.pop(cid, None)
            if cp is None:
                continue
            if any(n in self.cluster.failed for n in cp.stage_nics) or not all(
                    self.cluster.is_live(g) for g in cp.grants):
                for g in cp.grants:
                    if self.cluster.is_live(g):
                        self.cluster.reclaim(g)
                continue
            dep.placement.copies.append(cp)
            rt.add_copy(cp)
            launched.append(cid)
        if rt.anchor in self.cluster.failed and dep.placement.copies:
            rt.anchor = dep.placement.anchor_nic
        if dep.status == Status.FAILED and launched:
            dep.status = Status.BEST_EFFORT if dep.placement.best_effort else Status.RUNNING
            dep.reason = ""
        if dep.failover and (dep.backup_nic is None or dep.backup_nic in dep.placement.nics()):
            dep.backup_nic = self._pick_backup(dep)
        self._event("launched", app=app_id, copies=launched, nics=dep.placement.nics(), backup=dep.backup_nic)

    def _retired(self, app_id: str, cid: int) -> None:
        dep = self.deployments[app_id]
        release(dep.placement, self.cluster, [cid])
        self._event("retired", app=app_id, copy=cid)

    def stop_app(self, app_id: str) -> None:
        dep = self.deployments[app_id]
        if dep.status in (Status.FAILED, Status.STOPPED):
            dep.status = Status.STOPPED
            return
        rt = self.sim.apps.get(app_id)
        if rt is not None:
            src = rt.source
            if isinstance(src, RateSource):
                src.stop_us = self.now
            rt.source = None
            for cid in list(dep.pending):
                self._remove_copy(dep, cid)
            for cid in list(rt.copies):
                rt.drain_copy(cid)
        dep.status = Status.STOPPED
        self._event("stopped", app=app_id)

    # --- periodic work ------------------------------------------------------
    def _health_tick(self, _=None) -> None:
        now = self.now
        for nic in self.cluster.order:
            if nic in self.cluster.failed:
                continue
            if not self.monitor.probe(nic, nic not in self.sim.dead, now):
                self.handle_failure(nic)
        self.sim.engine.at(now + self.config.check_interval_us, PRIO_CONTROL, self._health_tick)

    def _sync_tick(self, _=None) -> None:
        self.sync_tick(self.now)
        self.sim.engine.at(self.now + self.config.sync_interval_us, PRIO_CONTROL, self._sync_tick)

    def sync_tick(self, now: float) -> None:
        """Refresh the resource snapshot and replicate state to backups."""
        snap = {}
        for nid in self.cluster.order:
            nic = self.cluster.nic(nid)
            reachable = nid not in self.sim.dead and nid not in self.cluster.failed
            if not reachable and nid not in self.cluster.failed:
                self.monitor.suspect.add(nid)
            snap[nid] = {"used_units": nic.used_units, "free_units": nic.free_units,
                         "reachable": reachable}
        self.resource_snapshot = snap
        for app_id in self.admission_order:
            dep = self.deployments[app_id]
            if not dep.failover or dep.status in (Status.FAILED, Status.STOPPED) or dep.backup_nic is None:
                continue
            rt = self.sim.apps.get(app_id)
            if rt is None:
                continue
            hosting = dep.placement.nics()
            if any(n in self.sim.dead for n in hosting) or dep.backup_nic in self.sim.dead:
                continue  # cannot reach every primary; the previous sync stands
            if dep.app.stateful:
                for n in hosting:
                    self.fabric.sync_backup(app_id, n, dep.backup_nic)
            rt.last_sync = now

    # --- failures -----------------------------------------------------------
    def fail_nic(self, nic_id: str) -> None:
        """Disable a NIC's ports; the controller learns at the next health check."""
        self.failed_at[nic_id] = self.now
        self.sim.kill_nic(nic_id)
        self._event("nic_down", nic=nic_id)

    def recover_nic(self, nic_id: str) -> None:
        self.sim.revive_nic(nic_id)
        self.cluster.failed.discard(nic_id)
        self.monitor.probe(nic_id, True, self.now)
        self._event("nic_up", nic=nic_id)
        for app_id in self.admission_order:
            dep = self.deployments[app_id]
            if dep.placement is None or dep.status == Status.STOPPED:
                continue
            if dep.status in (Status.FAILED, Status.BEST_EFFORT) and dep.profile is not None:
                self._reconcile(dep, "regrow")

    def handle_failure(self, nic_id: str) -> RecoveryReport:
        """Declare ``nic_id`` failed and move every affected app off it."""
        now = self.now
        self.cluster.failed.add(nic_id)
        report = RecoveryReport(nic_id, self.failed_at.get(nic_id), now)
        self._event("nic_failed", nic=nic_id)
        for app_id in self.admission_order:
            dep = self.deployments[app_id]
            if dep.placement is None or dep.status == Status.STOPPED:
                continue
            for cid, cp in list(dep.pending.items()):
                if nic_id in cp.stage_nics:
                    self._remove_copy(dep, cid)
            touched = [c for c in dep.placement.copies if nic_id in c.stage_nics]
            if not touched:
                if dep.backup_nic == nic_id:
                    dep.backup_nic = self._pick_backup(dep)
                    self._event("backup_moved", app=app_id, backup=dep.backup_nic)
                continue
            report.apps.append(self._recover_app(dep, nic_id, touched))
        self.recoveries.append(report)
        return report

    def _recover_app(self, dep: AppDeployment, nic_id: str, touched: List[CopyPlacement]) -> dict:
        rt = self.sim.apps[dep.app_id]
        now = self.now
        cache_since = rt.last_sync if dep.failover else math.inf
        stats = rt.stats
        before = (stats.cached_for_failover, stats.pre_sync_loss)
        lost = rt.nic_failed(nic_id, cache_since, hold=dep.failover)
        # the lost copies' surviving parts only finish in-flight packets, so
        # their grants go back now and can host the replacements
        release(dep.placement, self.cluster, lost)
        info = {"app": dep.app_id, "lost_copies": lost, "cached": stats.cached_for_failover - before[0],
                "pre_sync_loss": stats.pre_sync_loss - before[1]}
        if not dep.failover:
            remaining = [c for c in dep.placement.copies if c.copy_id not in lost]
            dep.status = Status.BEST_EFFORT if remaining else Status.FAILED
            dep.reason = "" if remaining else f"lost with {nic_id}; failover disabled"
            info["replaced"] = []
            self._event("not_recovered", **info)
            return info
        backup = dep.backup_nic
        try:
            if backup is None or backup in self.cluster.failed:
                raise BackupUnavailable(f"{dep.app_id} has no usable backup")
            todo = [(c.kind, c.replicas) for c in touched]
            current = self._current(dep)
            added = place_more(current, dep.app, self.cluster, todo, prefer=backup, include_standby=True)
        except (BackupUnavailable, NicPoolError) as exc:
            added = []
            info["error"] = str(exc)
        if dep.app.stateful and backup is not None:
            target_nic = added[0].stage_nics[0] if added else backup
            pattern, members = self.fabric.apps[dep.app_id]
            if pattern.value == "FullAccess" and any(m != nic_id for m in members):
                self.fabric.remove_member(dep.app_id, nic_id, drop_table=True)
                info["restored_entries"] = 0
            else:
                info["restored_entries"] = self.fabric.restore_from_backup(dep.app_id, nic_id, backup, now,
                                                                           target_nic=target_nic)
        self._track_ids(dep, added)
        ready = now + self.config.launch_delay_us
        for cp in added:
            dep.pending[cp.copy_id] = cp
        if added:
            self.sim.engine.at(ready, PRIO_CONTROL, self._launch, (dep.app_id, [c.copy_id for c in added]))
        survivors = [c for c in dep.placement.copies if c.copy_id not in lost]
        if len(added) < len(touched):
            if not added and not survivors:
                dep.status = Status.FAILED
                dep.reason = info.get("error") or f"no resources to replace copies lost with {nic_id}"
            else:
                dep.status = Status.BEST_EFFORT
        info["replaced"] = [c.copy_id for c in added]
        info["replacement_nics"] = [c.nics() for c in added]
        info["ready_ms"] = _ms(ready) if added else None
        info["status"] = dep.status.value
        self._event("recovery", **info)
        return info

    # --- reporting ----------------------------------------------------------
    def summary(self) -> dict:
        return {
            "deployments": {a: self.deployments[a].to_dict() for a in self.admission_order},
            "admission_order": list(self.admission_order),
            "recoveries": [r.to_dict() for r in self.recoveries],
        }
