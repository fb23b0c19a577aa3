"""Scenario configs, the scenario runner and metrics reports.

Configs are YAML documents with ``schema_version: 1``. Reports are JSON with
sorted keys and floats rounded to six decimals, so the same config and seed
always produce the same bytes. See README.md for the full format.
"""

from __future__ import annotations

import json
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import yaml

from .app_model import AppSpec, StageSpec, build_app
from .cluster import Cluster, LatencyModel, build_cluster
from .controller import MS, Controller, ControllerConfig
from .dataplane import DataplaneConfig, RateSource, SaturatingSource, Simulator, make_flows
from .errors import ConfigError, NicPoolError, ParseError, ValidationError
from .planner import AllocationPlan, PerfTarget, nics_required
from .profiler import TrafficModel, empty_copy, saturated_rate

SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1
EVENTS = ("set_target", "fail_nic", "recover_nic", "stop_app")
ANALYSES = ("convergence", "recovery", "multiplexing", "scaling")


# ---------------------------------------------------------------------------
# YAML with line numbers


class _Node(dict):
    """A mapping that remembers the source line of itself and of each key."""

    line: Optional[int] = None
    lines: Dict[str, int] = {}


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Node()
    out.line = node.start_mark.line + 1
    out.lines = {}
    for knode, vnode in node.value:
        key = loader.construct_object(knode, deep=True)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", line=knode.start_mark.line + 1, field=str(key))
        out[key] = loader.construct_object(vnode, deep=True)
        out.lines[key] = knode.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def load_yaml(text: str, source: str = "<config>") -> Any:
    try:
        return yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise ParseError(f"{source}: {exc.problem or exc}", line=line) from None
    except yaml.YAMLError as exc:
        raise ParseError(f"{source}: {exc}") from None


_MISSING = object()


class _Reader:
    """Typed access to a parsed mapping with dotted field paths in errors."""

    def __init__(self, node: Any, path: str):
        if not isinstance(node, dict):
            raise ParseError(f"expected a mapping, got {type(node).__name__}", line=_line_of(node), field=path or None)
        self.node = node
        self.path = path

    def _field(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def line(self, key: Optional[str] = None) -> Optional[int]:
        lines = getattr(self.node, "lines", {})
        if key is not None and key in lines:
            return lines[key]
        return getattr(self.node, "line", None)

    def fail(self, key: str, message: str):
        raise ParseError(message, line=self.line(key), field=self._field(key))

    def get(self, key: str, types, default=_MISSING):
        if key not in self.node or self.node[key] is None:
            if default is _MISSING:
                self.fail(key, "missing required field")
            return default
        val = self.node[key]
        if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
            self.fail(key, f"expected {_tname(types)}, got a boolean")
        if not isinstance(val, types):
            self.fail(key, f"expected {_tname(types)}, got {type(val).__name__}")
        return val

    def number(self, key: str, default=_MISSING, *, positive: bool = False, nonneg: bool = False) -> float:
        val = self.get(key, (int, float), default)
        if val is None:
            return val
        if positive and not val > 0:
            raise ValidationError("must be > 0", field=self._field(key))
        if nonneg and val < 0:
            raise ValidationError("must be >= 0", field=self._field(key))
        return float(val)

    def integer(self, key: str, default=_MISSING, *, minimum: Optional[int] = None) -> int:
        val = self.get(key, int, default)
        if val is not None and minimum is not None and val < minimum:
            raise ValidationError(f"must be >= {minimum}", field=self._field(key))
        return val

    def sub(self, key: str, default=_MISSING) -> Optional["_Reader"]:
        val = self.get(key, dict, default)
        return None if val is None else _Reader(val, self._field(key))

    def items(self, key: str, default=_MISSING) -> List[Any]:
        return self.get(key, list, default)

    def unknown(self, allowed: Sequence[str]) -> None:
        for k in self.node:
            if k not in allowed:
                self.fail(k, f"unknown field {k!r}")


def _tname(types) -> str:
    types = types if isinstance(types, tuple) else (types,)
    names = {int: "integer", float: "number", str: "string", bool: "boolean", dict: "mapping", list: "list"}
    return " or ".join(names.get(t, t.__name__) for t in types)


def _line_of(node) -> Optional[int]:
    return getattr(node, "line", None)


# ---------------------------------------------------------------------------
# bundled data


def _data_dir():
    return resources.files("nicpool") / "data"


def bundled_scenarios() -> Dict[str, str]:
    """Name -> one-line description of every bundled scenario."""
    out = {}
    for entry in sorted(_data_dir().joinpath("scenarios").iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".yaml"):
            doc = load_yaml(entry.read_text(), entry.name)
            out[entry.name[:-5]] = str(doc.get("description", "")).strip()
    return out


def bundled_scenario_text(name: str) -> str:
    path = _data_dir().joinpath("scenarios", f"{name}.yaml")
    if not path.is_file():
        raise ValidationError(f"no bundled scenario named {name!r}", field="scenario")
    return path.read_text()


def _cluster_text(name: str) -> str:
    path = _data_dir().joinpath("clusters", f"{name}.yaml")
    if not path.is_file():
        raise ValidationError(f"no bundled cluster named {name!r}", field="cluster")
    return path.read_text()


_LIBRARY: Optional[dict] = None


def app_library() -> dict:
    """The bundled application templates keyed by name (parsed YAML)."""
    global _LIBRARY
    if _LIBRARY is None:
        doc = load_yaml(_data_dir().joinpath("apps.yaml").read_text(), "apps.yaml")
        r = _Reader(doc, "")
        _check_schema(r)
        _LIBRARY = dict(r.get("apps", dict))
    return _LIBRARY


def _check_schema(r: _Reader) -> None:
    v = r.get("schema_version", int)
    if v != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {v} (expected {SCHEMA_VERSION})", field="schema_version")


# ---------------------------------------------------------------------------
# config types


@dataclass(frozen=True)
class TrafficSpec:
    flows: int = 32
    pkt_bytes: int = 1500
    rate: Union[float, str] = "target"   # Gbps, "target" or "saturating"
    seed: int = 0
    start_ms: float = 0.0


@dataclass
class AppEntry:
    app: AppSpec
    target_gbps: float
    latency_us: Optional[float] = None
    latency_sensitive: bool = False
    failover: bool = False
    traffic: TrafficSpec = field(default_factory=TrafficSpec)
    template: Optional[str] = None

    @property
    def app_id(self) -> str:
        return self.app.app_id

    def perf_target(self, gbps: Optional[float] = None) -> PerfTarget:
        return PerfTarget(self.target_gbps if gbps is None else gbps, self.latency_us, self.latency_sensitive)


@dataclass(frozen=True)
class TimelineEvent:
    at_ms: float
    event: str
    app: Optional[str] = None
    nic: Optional[str] = None
    target_gbps: Optional[float] = None


@dataclass(frozen=True)
class ScalingSpec:
    app: str
    copies: Sequence[int]
    warmup_ms: float = 10.0
    measure_ms: float = 50.0


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    duration_ms: float
    bin_ms: float
    cluster: Mapping
    apps: List[AppEntry]
    timeline: List[TimelineEvent] = field(default_factory=list)
    description: str = ""
    dataplane: DataplaneConfig = field(default_factory=DataplaneConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    analyses: Sequence[str] = ()
    scaling: Optional[ScalingSpec] = None

    def with_overrides(self, *, seed: Optional[int] = None, bin_ms: Optional[float] = None) -> "ScenarioConfig":
        if seed is not None:
            self.seed = int(seed)
        if bin_ms is not None:
            if not bin_ms > 0:
                raise ValidationError("must be > 0", field="bin_ms")
            self.bin_ms = float(bin_ms)
        return self


def _latency(r: _Reader, key: str) -> Optional[LatencyModel]:
    raw = r.node.get(key)
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return LatencyModel(r.number(key, nonneg=True))
    s = r.sub(key, None)
    if s is None:
        return None
    s.unknown(("fixed_us", "per_byte_us"))
    return LatencyModel(s.number("fixed_us", 0.0, nonneg=True), s.number("per_byte_us", 0.0, nonneg=True))


def _stage(r: _Reader) -> StageSpec:
    r.unknown(("name", "kind", "ucf", "accel", "service", "window_size", "slide_interval", "params"))
    try:
        return StageSpec(
            name=r.get("name", str),
            kind=r.get("kind", str),
            ucf=r.get("ucf", str, None),
            accel=r.get("accel", str, None),
            service_model=_latency(r, "service"),
            window_size=r.integer("window_size", 1),
            slide_interval=r.integer("slide_interval", 1),
            params=dict(r.get("params", dict, {})),
        )
    except ConfigError:
        raise
    except NicPoolError as exc:
        raise ValidationError(str(exc), field=r.path) from None
    except ValueError as exc:
        raise ValidationError(str(exc), field=f"{r.path}.kind") from None


def build_app_from(r: _Reader, app_id: str, vocabulary=None) -> AppSpec:
    """Build an AppSpec from a template mapping (library entry or inline)."""
    r.unknown(("description", "abstraction", "stateful", "access_pattern", "stages"))
    stages = [_stage(_Reader(s, f"{r.path}.stages[{i}]")) for i, s in enumerate(r.items("stages"))]
    try:
        return build_app(stages, r.get("abstraction", str, "PacketLevel"), r.get("stateful", bool, False),
                         r.get("access_pattern", str, "NonExternalWrite"), app_id=app_id, vocabulary=vocabulary)
    except NicPoolError as exc:
        raise ValidationError(str(exc), field=r.path) from None
    except ValueError as exc:
        raise ValidationError(str(exc), field=r.path) from None


def _overridden(template: dict, overrides: _Reader) -> dict:
    """Apply ``stage_service_us`` overrides (one fixed latency per stage)."""
    doc = _Node(template)
    doc.line, doc.lines = getattr(template, "line", None), getattr(template, "lines", {})
    svc = overrides.get("stage_service_us", list, None)
    if svc is not None:
        stages = list(doc["stages"])
        if len(svc) != len(stages):
            raise ValidationError(f"needs {len(stages)} entries", field=f"{overrides.path}.stage_service_us")
        new = []
        for st, v in zip(stages, svc):
            st = dict(st)
            if v is not None:
                if not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0:
                    raise ValidationError("entries must be positive numbers or null",
                                          field=f"{overrides.path}.stage_service_us")
                st["service"] = {"fixed_us": v}
            new.append(st)
        doc["stages"] = new
    return doc


def _traffic(r: Optional[_Reader], default_seed: int) -> TrafficSpec:
    if r is None:
        return TrafficSpec(seed=default_seed)
    r.unknown(("flows", "pkt_bytes", "rate", "seed", "start_ms"))
    rate = r.get("rate", (int, float, str), "target")
    if isinstance(rate, str) and rate not in ("target", "saturating"):
        r.fail("rate", f"rate must be a number, 'target' or 'saturating', got {rate!r}")
    if not isinstance(rate, str) and not rate > 0:
        raise ValidationError("must be > 0", field=f"{r.path}.rate")
    pkt = r.integer("pkt_bytes", 1500, minimum=1)
    if pkt > 65535:
        raise ValidationError("must be <= 65535", field=f"{r.path}.pkt_bytes")
    return TrafficSpec(r.integer("flows", 32, minimum=1), pkt, rate if isinstance(rate, str) else float(rate),
                       r.integer("seed", default_seed), r.number("start_ms", 0.0, nonneg=True))


def _vocabulary(cluster_cfg: Mapping):
    kinds = set()
    for nic in cluster_cfg.get("nics") or []:
        for a in nic.get("accelerators") or []:
            kinds.add(a if isinstance(a, str) else a.get("kind"))
    return kinds


def _cluster_config(r: _Reader, base_dir: Optional[Path]) -> Mapping:
    ref = r.node.get("cluster")
    if isinstance(ref, str):
        if base_dir is not None and (base_dir / ref).is_file():
            text = (base_dir / ref).read_text()
        else:
            text = _cluster_text(ref)
        doc = load_yaml(text, ref)
        cr = _Reader(doc, "cluster")
        _check_schema(cr)
        return cr.get("cluster", dict)
    sub = r.sub("cluster")
    return sub.node


def parse_config(text: str, source: str = "<config>", base_dir: Optional[Path] = None) -> ScenarioConfig:
    """Parse and validate a scenario document."""
    doc = load_yaml(text, source)
    if doc is None:
        raise ParseError(f"{source}: empty document")
    r = _Reader(doc, "")
    r.unknown(("schema_version", "name", "description", "seed", "duration_ms", "bin_ms", "cluster", "apps",
               "timeline", "dataplane", "controller", "analyses", "scaling"))
    _check_schema(r)
    seed = r.integer("seed")
    cluster_cfg = _cluster_config(r, base_dir)
    try:
        build_cluster(cluster_cfg)
    except (NicPoolError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad cluster: {exc}", field="cluster") from None
    vocab = _vocabulary(cluster_cfg)

    library = app_library()
    apps: List[AppEntry] = []
    seen = set()
    for i, node in enumerate(r.items("apps")):
        a = _Reader(node, f"apps[{i}]")
        a.unknown(("id", "use", "spec", "overrides", "target_gbps", "latency_us", "latency_sensitive",
                   "failover", "traffic"))
        app_id = a.get("id", str)
        if app_id in seen:
            a.fail("id", f"duplicate app id {app_id!r}")
        seen.add(app_id)
        use = a.get("use", str, None)
        if use is not None:
            if use not in library:
                a.fail("use", f"unknown library app {use!r}; known: {', '.join(sorted(library))}")
            template, path = library[use], f"apps[{i}].use"
        else:
            template, path = a.get("spec", dict), f"apps[{i}].spec"
        ov = a.sub("overrides", None)
        if ov is not None:
            ov.unknown(("stage_service_us",))
            template = _overridden(template, ov)
        spec = build_app_from(_Reader(template, path), app_id, vocab)
        apps.append(AppEntry(
            app=spec,
            target_gbps=a.number("target_gbps", positive=True),
            latency_us=a.number("latency_us", None, positive=True),
            latency_sensitive=a.get("latency_sensitive", bool, False),
            failover=a.get("failover", bool, False),
            traffic=_traffic(a.sub("traffic", None), seed + i),
            template=use,
        ))
    if not apps:
        raise ValidationError("at least one app is required", field="apps")

    nic_ids = set(build_cluster(cluster_cfg).order)
    timeline: List[TimelineEvent] = []
    last = 0.0
    for i, node in enumerate(r.items("timeline", [])):
        e = _Reader(node, f"timeline[{i}]")
        e.unknown(("at_ms", "event", "app", "nic", "target_gbps"))
        at = e.number("at_ms", nonneg=True)
        if at < last:
            raise ValidationError("timeline times must be nondecreasing", field=f"timeline[{i}].at_ms")
        last = at
        kind = e.get("event", str)
        if kind not in EVENTS:
            e.fail("event", f"unknown event {kind!r}; expected one of {', '.join(EVENTS)}")
        app = nic = tgt = None
        if kind in ("set_target", "stop_app"):
            app = e.get("app", str)
            if app not in seen:
                e.fail("app", f"unknown app {app!r}")
        if kind == "set_target":
            tgt = e.number("target_gbps", positive=True)
        if kind in ("fail_nic", "recover_nic"):
            nic = e.get("nic", str)
            if nic not in nic_ids:
                e.fail("nic", f"unknown NIC {nic!r}")
        timeline.append(TimelineEvent(at, kind, app, nic, tgt))

    dp = r.sub("dataplane", None)
    dcfg = DataplaneConfig(record_order=True)
    if dp is not None:
        dp.unknown(("ring_capacity", "watermark", "batch_size", "to_overhead_us", "migration_buffer",
                    "failover_cache"))
        dcfg = DataplaneConfig(
            ring_capacity=dp.integer("ring_capacity", dcfg.ring_capacity, minimum=1),
            watermark=dp.number("watermark", dcfg.watermark, positive=True),
            batch_size=dp.integer("batch_size", dcfg.batch_size, minimum=1),
            to_overhead_us=dp.number("to_overhead_us", dcfg.to_overhead_us, nonneg=True),
            migration_buffer=dp.integer("migration_buffer", dcfg.migration_buffer, minimum=0),
            failover_cache=dp.integer("failover_cache", dcfg.failover_cache, minimum=0),
            record_order=True,
        )
        if dcfg.watermark > 1:
            raise ValidationError("must be <= 1", field="dataplane.watermark")

    ct = r.sub("controller", None)
    ccfg = ControllerConfig()
    if ct is not None:
        ct.unknown(("check_interval_ms", "sync_interval_ms", "launch_delay_ms", "profile_warmup_ms",
                    "profile_measure_ms", "profile_flows", "profile_pkt_bytes"))
        ccfg = ControllerConfig(
            check_interval_us=ct.number("check_interval_ms", ccfg.check_interval_us / MS, positive=True) * MS,
            sync_interval_us=ct.number("sync_interval_ms", ccfg.sync_interval_us / MS, positive=True) * MS,
            launch_delay_us=ct.number("launch_delay_ms", ccfg.launch_delay_us / MS, nonneg=True) * MS,
            profile_warmup_us=ct.number("profile_warmup_ms", ccfg.profile_warmup_us / MS, nonneg=True) * MS,
            profile_measure_us=ct.number("profile_measure_ms", ccfg.profile_measure_us / MS, positive=True) * MS,
            traffic=TrafficModel(pkt_bytes=ct.integer("profile_pkt_bytes", 1500, minimum=1),
                                 n_flows=ct.integer("profile_flows", 16, minimum=1), seed=seed),
        )

    analyses = r.items("analyses", [])
    for i, a in enumerate(analyses):
        if a not in ANALYSES:
            raise ValidationError(f"unknown analysis {a!r}; expected one of {', '.join(ANALYSES)}",
                                  field=f"analyses[{i}]")
    scaling = None
    sc = r.sub("scaling", None)
    if sc is not None:
        sc.unknown(("app", "copies", "warmup_ms", "measure_ms"))
        app = sc.get("app", str)
        if app not in seen:
            sc.fail("app", f"unknown app {app!r}")
        copies = sc.items("copies")
        if not copies or any(not isinstance(k, int) or isinstance(k, bool) or k < 1 for k in copies):
            raise ValidationError("copies must be a list of positive integers", field="scaling.copies")
        scaling = ScalingSpec(app, tuple(copies), sc.number("warmup_ms", 10.0, nonneg=True),
                              sc.number("measure_ms", 50.0, positive=True))
    if "scaling" in analyses and scaling is None:
        raise ValidationError("the scaling analysis needs a scaling block", field="scaling")

    return ScenarioConfig(
        name=r.get("name", str),
        description=str(r.get("description", str, "")).strip(),
        seed=seed,
        duration_ms=r.number("duration_ms", nonneg=True),
        bin_ms=r.number("bin_ms", 100.0, positive=True),
        cluster=cluster_cfg,
        apps=apps,
        timeline=timeline,
        dataplane=dcfg,
        controller=ccfg,
        analyses=tuple(analyses),
        scaling=scaling,
    )


def load_config(ref: Union[str, Path]) -> ScenarioConfig:
    """Load a scenario by file path or bundled name."""
    path = Path(ref)
    if path.is_file():
        return parse_config(path.read_text(), str(path), path.parent)
    if path.suffix or "/" in str(ref):
        raise ConfigError(f"no such scenario file: {ref}")
    return parse_config(bundled_scenario_text(str(ref)), f"{ref}.yaml")


# ---------------------------------------------------------------------------
# running


def _r(x: Optional[float]) -> Optional[float]:
    if x is None:
        return None
    return round(float(x), 6) + 0.0


def _clean(obj):
    """Round floats and normalise containers for stable JSON."""
    if isinstance(obj, float):
        return _r(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def percentiles(values: Sequence[float]) -> dict:
    """avg/p50/p90/p99 (inclusive method); all ``None`` when empty."""
    if not values:
        return {"avg": None, "p50": None, "p90": None, "p99": None, "count": 0}
    if len(values) == 1:
        v = values[0]
        return {"avg": v, "p50": v, "p90": v, "p99": v, "count": 1}
    q = statistics.quantiles(values, n=100, method="inclusive")
    return {"avg": statistics.fmean(values), "p50": q[49], "p90": q[89], "p99": q[98], "count": len(values)}


def order_violations(order: Sequence[tuple]) -> int:
    """Egress records whose per-flow sequence number is not increasing."""
    last: Dict[Any, int] = defaultdict(lambda: -1)
    bad = 0
    for flow, _, seq in order:
        if seq <= last[flow]:
            bad += 1
        last[flow] = max(last[flow], seq)
    return bad


@dataclass
class MetricsReport:
    data: dict

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1) + "\n"

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())

    def __getitem__(self, key):
        return self.data[key]


class _TargetSchedule:
    """Offered rate of a "target" traffic source: follows the app's target."""

    def __init__(self, initial: float):
        self.points = [(0.0, initial)]

    def set(self, t_us: float, gbps: float) -> None:
        self.points.append((t_us, gbps))

    def __call__(self, now: float) -> float:
        rate = 0.0
        for t, g in self.points:
            if t <= now:
                rate = g
            else:
                break
        return rate


class ScenarioRun:
    """A live scenario: simulator, controller and traffic, ready to run."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.cluster: Cluster = build_cluster(cfg.cluster)
        self.sim = Simulator(self.cluster, cfg.dataplane)
        self.ctl = Controller(self.sim, cfg.controller)
        self.schedules: Dict[str, _TargetSchedule] = {}
        self.targets: Dict[str, List[tuple]] = {}
        self.entries = {e.app_id: e for e in cfg.apps}

    def setup(self) -> None:
        ctl = self.ctl
        ctl.start()
        for i, e in enumerate(self.cfg.apps):
            dep = ctl.submit_app(e.app, e.perf_target(), failover=e.failover)
            self.targets[e.app_id] = [(0.0, e.target_gbps)]
            if e.app_id not in self.sim.apps:
                continue
            tr = e.traffic
            flows = make_flows(tr.flows, self.cfg.seed * 1000 + tr.seed)
            if tr.rate == "saturating":
                src = SaturatingSource(e.app_id, flows, tr.pkt_bytes)
            else:
                rate = tr.rate
                if rate == "target":
                    rate = self.schedules[e.app_id] = _TargetSchedule(dep.target.throughput_gbps)
                src = RateSource(e.app_id, flows, rate, tr.pkt_bytes, start_us=tr.start_ms * MS)
            self.sim.attach(src)
        for ev in self.cfg.timeline:
            ctl.at(ev.at_ms * MS, self._apply, ev)

    def _apply(self, ev: TimelineEvent) -> None:
        ctl = self.ctl
        if ev.event == "set_target":
            e = self.entries[ev.app]
            self.targets[ev.app].append((ev.at_ms, ev.target_gbps))
            if ev.app in self.schedules:
                self.schedules[ev.app].set(ev.at_ms * MS, ev.target_gbps)
            if ev.app in ctl.deployments:
                ctl.set_target(ev.app, e.perf_target(ev.target_gbps))
        elif ev.event == "fail_nic":
            ctl.fail_nic(ev.nic)
        elif ev.event == "recover_nic":
            ctl.recover_nic(ev.nic)
        elif ev.event == "stop_app":
            self.targets[ev.app].append((ev.at_ms, 0.0))
            if ev.app in self.schedules:
                self.schedules[ev.app].set(ev.at_ms * MS, 0.0)
            if ev.app in ctl.deployments:
                ctl.stop_app(ev.app)

    def run(self) -> MetricsReport:
        self.setup()
        end = self.cfg.duration_ms * MS
        busy0 = self.sim.pool_busy()
        stats = self.sim.run(end)
        return MetricsReport(_clean(self._report(stats, busy0)))

    # --- report ---------------------------------------------------------------
    def _bins(self) -> List[float]:
        cfg = self.cfg
        n = int(cfg.duration_ms // cfg.bin_ms + 1e-9)
        return [i * cfg.bin_ms for i in range(n)]

    def _series(self, app_id: str) -> List[float]:
        st = self.sim.apps[app_id].stats
        w = self.cfg.bin_ms * MS
        return [st.bits_between(b * MS, b * MS + w) / w / 1000.0 for b in self._bins()]

    def _report(self, stats, busy0) -> dict:
        cfg = self.cfg
        end = cfg.duration_ms * MS
        apps = {}
        for e in cfg.apps:
            a = e.app_id
            rec: Dict[str, Any] = {"template": e.template, "targets": [list(p) for p in self.targets[a]]}
            if a in self.sim.apps:
                st = self.sim.apps[a].stats
                rec["throughput_gbps"] = self._series(a)
                rec["mean_gbps"] = st.bits_between(0.0, end) / max(end, 1e-9) / 1000.0
                rec["latency_us"] = percentiles(list(st.lats))
                rec["counters"] = dict(st.counters(), flow_spills=self.sim.apps[a].ingress_table.spills)
                rec["order_violations"] = order_violations(st.order or [])
            apps[a] = rec
        util = stats.nic_utilization(0.0, end, busy0) if end > 0 else {}
        report = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "scenario": cfg.name,
            "description": cfg.description,
            "seed": cfg.seed,
            "duration_ms": cfg.duration_ms,
            "bin_ms": cfg.bin_ms,
            "bins_ms": self._bins(),
            "apps": apps,
            "nics": util,
            "planner": self.ctl.summary(),
            "events": self.ctl.log,
            "sim_events": stats.events,
        }
        analysis = {}
        if "convergence" in cfg.analyses:
            analysis["convergence"] = self._convergence()
        if "recovery" in cfg.analyses:
            analysis["recovery"] = self._recovery()
        if "multiplexing" in cfg.analyses:
            analysis["multiplexing"] = self._multiplexing()
        if "scaling" in cfg.analyses:
            analysis["scaling"] = self._scaling()
        report["analysis"] = analysis
        return report

    def _convergence(self, tol: float = 0.05) -> List[dict]:
        """For each target the app is given, when throughput settles within ``tol``."""
        out = []
        bins = self._bins()
        for a, points in sorted(self.targets.items()):
            if a not in self.sim.apps:
                continue
            series = self._series(a)
            for k, (t0, target) in enumerate(points):
                t1 = points[k + 1][0] if k + 1 < len(points) else self.cfg.duration_ms
                idx = [i for i, b in enumerate(bins) if b >= t0 and b + self.cfg.bin_ms <= t1]
                rec = {"app": a, "at_ms": t0, "target_gbps": target, "converged_at_ms": None,
                       "convergence_ms": None, "steady_gbps": None, "error": None}
                if target > 0 and idx:
                    conv = None
                    for j in range(len(idx)):
                        if all(abs(series[i] - target) <= tol * target for i in idx[j:]):
                            conv = idx[j]
                            break
                    if conv is not None:
                        steady = [series[i] for i in idx if i >= conv]
                        mean = sum(steady) / len(steady)
                        rec.update(converged_at_ms=bins[conv], convergence_ms=bins[conv] - t0,
                                   steady_gbps=mean, error=abs(mean - target) / target)
                out.append(rec)
        return out

    def _recovery(self, frac: float = 0.95, pre_ms: float = 500.0) -> List[dict]:
        """Per failure and affected app: time from detection until throughput
        stays at ``frac`` of its pre-failure level."""
        out = []
        bins = self._bins()
        w = self.cfg.bin_ms
        fails = sorted(self.ctl.recoveries, key=lambda r: r.detected_at_us)
        bounds = [(r.failed_at_us or r.detected_at_us) / MS for r in fails]
        for n, rep in enumerate(fails):
            failed = (rep.failed_at_us or rep.detected_at_us) / MS
            detected = rep.detected_at_us / MS
            horizon = bounds[n + 1] if n + 1 < len(bounds) else self.cfg.duration_ms
            for info in rep.apps:
                a = info["app"]
                if a not in self.sim.apps:
                    continue
                series = self._series(a)
                pre = [series[i] for i, b in enumerate(bins) if failed - pre_ms <= b and b + w <= failed]
                pre_gbps = sum(pre) / len(pre) if pre else 0.0
                after = [i for i, b in enumerate(bins) if b >= detected and b + w <= horizon]
                during = [series[i] for i, b in enumerate(bins) if b + w > failed and b < detected + 2 * w]
                rec = {"nic": rep.nic_id, "app": a, "failed_at_ms": failed, "detected_at_ms": detected,
                       "pre_failure_gbps": pre_gbps, "dip_gbps": min(during) if during else None,
                       "recovered_at_ms": None, "recovery_ms": None}
                if pre_gbps > 0:
                    for j in range(len(after)):
                        if all(series[i] >= frac * pre_gbps for i in after[j:]):
                            rec["recovered_at_ms"] = bins[after[j]]
                            rec["recovery_ms"] = bins[after[j]] - detected
                            break
                out.append(rec)
        return out

    def _multiplexing(self) -> dict:
        deps = [self.ctl.deployments[e.app_id] for e in self.cfg.apps]
        pairs = [(d.app, d.alloc) for d in deps if d.alloc is not None]
        base = empty_copy(self.cluster)
        return {
            "apps": [d.app_id for d in deps],
            "fine_grained_nics": nics_required(pairs, base, exclusive=False),
            "whole_nic_nics": nics_required(pairs, base, exclusive=True),
            "nics_used_by_controller": sorted({n for d in deps if d.placement for n in d.placement.nics()}),
        }

    def _scaling(self) -> List[dict]:
        spec = self.cfg.scaling
        dep = self.ctl.deployments[spec.app]
        e = self.entries[spec.app]
        traffic = TrafficModel(e.traffic.pkt_bytes, e.traffic.flows, self.cfg.seed)
        out = []
        for k in spec.copies:
            R = tuple(dep.plan.R)
            alloc = AllocationPlan(R, tuple(r * k for r in R), k, 0, None)
            rate, _, placement = saturated_rate(dep.app, alloc, self.cluster, traffic,
                                                warmup_us=spec.warmup_ms * MS, measure_us=spec.measure_ms * MS,
                                                config=self.cfg.dataplane)
            out.append({"copies": k, "gbps": rate, "per_copy_model_gbps": dep.t_gbps,
                        "model_gbps": k * dep.t_gbps, "nics": placement.nics()})
        return out


def run_scenario(cfg: Union[ScenarioConfig, str, Path], output: Optional[Union[str, Path]] = None) -> MetricsReport:
    """Run a scenario (config object, file path or bundled name)."""
    if not isinstance(cfg, ScenarioConfig):
        cfg = load_config(cfg)
    report = ScenarioRun(cfg).run()
    if output is not None:
        report.write(output)
    return report
