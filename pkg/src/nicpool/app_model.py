"""Applications as linear chains of packet, flow, socket and accelerator stages.

A stage wraps a user-customized function (UCF) looked up by name in a
:class:`UcfRegistry`. :func:`execute_stage` gives the reference semantics of
each stage kind; the simulator reuses the same :class:`StageRunner` objects on
its hot path.
"""

from __future__ import annotations

import base64
import enum
import functools
import hashlib
import hmac as _hmac
import itertools
import re
import struct
import zlib
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .cluster import CPU_UNIT, AcceleratorKind, LatencyModel
from .errors import (
    AbstractionMismatch,
    BadParams,
    DuplicateRegistration,
    EmptyPipeline,
    TypeMismatch,
    UcfPanic,
    UnknownAccelerator,
    UnknownSocket,
    UnknownUcf,
)

MAX_PAYLOAD = 1500


class Proto(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


@dataclass(frozen=True, order=True)
class FiveTuple:
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    proto: Proto = Proto.TCP

    def __post_init__(self):
        for name in ("src_ip", "dst_ip"):
            v = getattr(self, name)
            if not 0 <= v < 2**32:
                raise ValueError(f"{name} must be a 32-bit address")
        for name in ("src_port", "dst_port"):
            v = getattr(self, name)
            if not 0 <= v <= 65535:
                raise ValueError(f"{name} out of range: {v}")
        if not isinstance(self.proto, Proto):
            object.__setattr__(self, "proto", Proto(self.proto))
        object.__setattr__(self, "_hash", hash((self.src_ip, self.dst_ip, self.src_port, self.dst_port,
                                                self.proto.value)))

    def __hash__(self) -> int:
        return self._hash

    def key(self) -> str:
        """Compact 18-character name, short enough to prefix into a state name."""
        return _flow_key(self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.proto.value)

    def __str__(self) -> str:
        def ip(v):
            return ".".join(str((v >> s) & 0xFF) for s in (24, 16, 8, 0))

        return f"{ip(self.src_ip)}:{self.src_port}->{ip(self.dst_ip)}:{self.dst_port}/{self.proto.value}"


@functools.lru_cache(maxsize=1 << 16)
def _flow_key(src_ip, dst_ip, src_port, dst_port, proto) -> str:
    raw = struct.pack(">IIHHB", src_ip, dst_ip, src_port, dst_port, 6 if proto == "TCP" else 17)
    return base64.urlsafe_b64encode(raw).decode().rstrip("=")


_pkt_ids = itertools.count()


class Packet:
    """A simulated packet. ``payload`` may be None for synthetic traffic."""

    __slots__ = (
        "pid", "flow", "payload_len", "payload", "meta", "flow_seq", "batch_seq",
        "subpipe_seq", "ingress_time", "dispatch_time", "pipeline", "stage", "token",
    )

    def __init__(self, flow: FiveTuple, payload_len: int, payload: Optional[bytes] = None,
                 flow_seq: int = 0, ingress_time: float = 0.0, meta: Optional[dict] = None):
        if not 0 <= payload_len <= MAX_PAYLOAD:
            raise ValueError(f"payload_len must be within 0..{MAX_PAYLOAD}")
        if payload is not None and len(payload) > MAX_PAYLOAD:
            raise ValueError("payload exceeds the fixed per-packet buffer")
        self.pid = next(_pkt_ids)
        self.flow = flow
        self.payload_len = payload_len
        self.payload = payload
        self.meta = meta if meta is not None else {}
        self.flow_seq = flow_seq
        self.batch_seq = -1
        self.subpipe_seq = 0
        self.ingress_time = ingress_time
        self.dispatch_time = ingress_time
        self.pipeline = None
        self.stage = 0
        self.token = None

    def copy(self) -> "Packet":
        p = Packet(self.flow, self.payload_len, self.payload, self.flow_seq, self.ingress_time, dict(self.meta))
        p.batch_seq = self.batch_seq
        p.subpipe_seq = self.subpipe_seq
        return p

    def fields(self) -> tuple:
        return (self.flow, self.payload_len, self.payload, tuple(sorted(self.meta.items(), key=repr)),
                self.flow_seq, self.batch_seq)

    def __repr__(self) -> str:
        return f"Packet(flow={self.flow}, seq={self.flow_seq}, batch={self.batch_seq}, len={self.payload_len})"


@dataclass
class FlowRecord:
    flow: FiveTuple
    flow_meta: Dict[str, Any] = field(default_factory=dict)


class EpollEvent(str, enum.Enum):
    EPOLL_IN = "EPOLL_IN"
    EPOLL_OUT = "EPOLL_OUT"


@dataclass
class SocketEvent:
    socket_id: int
    event: EpollEvent
    message: bytes
    meta: Dict[str, Any] = field(default_factory=dict)


class StageKind(str, enum.Enum):
    PKT_TRANS = "PktTrans"
    PKT_FLT = "PktFlt"
    FLOW_EXT = "FlowExt"
    FLOW_TRANS = "FlowTrans"
    SOCKET_EPOLL = "SocketEpoll"
    ACCEL_FN = "AccelFn"

    @classmethod
    def parse(cls, value) -> "StageKind":
        if isinstance(value, cls):
            return value
        for k in cls:
            if str(value).lower() in (k.value.lower(), k.name.lower()):
                return k
        raise ValueError(f"unknown stage kind {value!r}")


class Abstraction(str, enum.Enum):
    PACKET = "PacketLevel"
    SOCKET = "SocketLevel"


class AccessPattern(str, enum.Enum):
    NON_EXTERNAL_WRITE = "NonExternalWrite"
    FULL_ACCESS = "FullAccess"


class Action(str, enum.Enum):
    PASS = "Pass"
    DROP = "Drop"
    EMIT = "Emit"


@dataclass
class StageResult:
    action: Action
    output: Any = None
    emitted: List[FlowRecord] = field(default_factory=list)
    service_us: float = 0.0
    error: Optional[BaseException] = None


@dataclass(frozen=True)
class StageSpec:
    name: str
    kind: StageKind
    ucf: Optional[str] = None
    accel: Optional[AcceleratorKind] = None
    service_model: Optional[LatencyModel] = None
    window_size: int = 1
    slide_interval: int = 1
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", StageKind.parse(self.kind))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        if self.accel is not None:
            try:
                object.__setattr__(self, "accel", AcceleratorKind.parse(self.accel))
            except Exception:
                raise UnknownAccelerator(f"stage {self.name}: unknown accelerator {self.accel!r}") from None
        if self.kind == StageKind.ACCEL_FN and self.accel is None:
            raise UnknownAccelerator(f"stage {self.name}: AccelFn needs an accelerator kind")
        if self.kind != StageKind.ACCEL_FN and self.accel is not None:
            raise BadParams(f"stage {self.name}: only AccelFn stages name an accelerator")
        if self.kind == StageKind.FLOW_EXT and (self.window_size < 1 or self.slide_interval < 1):
            raise BadParams(f"stage {self.name}: window_size and slide_interval must be >= 1")

    @property
    def resource_class(self):
        return self.accel if self.kind == StageKind.ACCEL_FN else CPU_UNIT

    def service_us(self, nbytes: int) -> float:
        return self.service_model(nbytes) if self.service_model is not None else 0.0


@dataclass(frozen=True)
class AppSpec:
    app_id: str
    stages: Tuple[StageSpec, ...]
    abstraction: Abstraction = Abstraction.PACKET
    stateful: bool = False
    access_pattern: AccessPattern = AccessPattern.NON_EXTERNAL_WRITE
    registry: "UcfRegistry" = field(default=None, repr=False, compare=False)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def accel_kinds(self) -> List[AcceleratorKind]:
        return [s.accel for s in self.stages if s.kind == StageKind.ACCEL_FN]


class UcfRegistry:
    """Append-only name -> callback table.

    ``kind`` is ``"stage"`` for pipeline callbacks or ``"reducer"`` for
    state-engine COMPUTE reductions.
    """

    def __init__(self, parent: Optional["UcfRegistry"] = None):
        self._fns: Dict[str, Tuple[Callable, str]] = {}
        self._parent = parent
        self._frozen = False

    def register(self, name: str, fn: Callable, kind: str = "stage") -> Callable:
        if self._frozen:
            raise RuntimeError("registry is frozen for the current run")
        if name in self:
            raise DuplicateRegistration(f"UCF {name!r} already registered")
        self._fns[name] = (fn, kind)
        return fn

    def freeze(self) -> None:
        self._frozen = True

    def __contains__(self, name: str) -> bool:
        return name in self._fns or (self._parent is not None and name in self._parent)

    def lookup(self, name: str, kind: Optional[str] = None) -> Callable:
        entry = self._fns.get(name)
        if entry is None and self._parent is not None:
            return self._parent.lookup(name, kind)
        if entry is None:
            raise UnknownUcf(f"UCF {name!r} is not registered")
        fn, k = entry
        if kind is not None and k != kind:
            raise UnknownUcf(f"UCF {name!r} is a {k}, not a {kind}")
        return fn

    def kind_of(self, name: str) -> str:
        entry = self._fns.get(name)
        if entry is None and self._parent is not None:
            return self._parent.kind_of(name)
        if entry is None:
            raise UnknownUcf(f"UCF {name!r} is not registered")
        return entry[1]

    def names(self) -> List[str]:
        out = set(self._fns)
        if self._parent is not None:
            out |= set(self._parent.names())
        return sorted(out)


_app_ids = itertools.count(1)


def build_app(stages: Sequence[StageSpec], abstraction=Abstraction.PACKET, stateful: bool = False,
              access_pattern=AccessPattern.NON_EXTERNAL_WRITE, *, registry: Optional[UcfRegistry] = None,
              app_id: Optional[str] = None, vocabulary: Optional[Iterable] = None) -> AppSpec:
    """Validate a stage chain and return an immutable :class:`AppSpec`."""
    stages = tuple(stages)
    if not stages:
        raise EmptyPipeline("an application needs at least one stage")
    abstraction = Abstraction(abstraction)
    access_pattern = AccessPattern(access_pattern)
    registry = registry if registry is not None else default_registry()
    vocab = set(AcceleratorKind.parse(k) for k in vocabulary) if vocabulary is not None else set(AcceleratorKind)
    has_socket = False
    for st in stages:
        if not isinstance(st, StageSpec):
            raise TypeError("stages must be StageSpec instances (linear chains only)")
        if st.kind == StageKind.SOCKET_EPOLL:
            has_socket = True
        if st.accel is not None and st.accel not in vocab:
            raise UnknownAccelerator(f"stage {st.name}: {st.accel.value} not in cluster vocabulary")
        if st.ucf is not None:
            registry.lookup(st.ucf, "stage")
        elif st.kind != StageKind.ACCEL_FN and st.kind != StageKind.FLOW_EXT:
            raise UnknownUcf(f"stage {st.name}: {st.kind.value} stages need a UCF")
    if abstraction == Abstraction.PACKET and has_socket:
        raise AbstractionMismatch("SocketEpoll stage in a PacketLevel app")
    if abstraction == Abstraction.SOCKET and not has_socket:
        raise AbstractionMismatch("SocketLevel app has no SocketEpoll stage")
    return AppSpec(
        app_id=app_id or f"app{next(_app_ids)}",
        stages=stages,
        abstraction=abstraction,
        stateful=bool(stateful),
        access_pattern=access_pattern,
        registry=registry,
    )


# ---------------------------------------------------------------------------
# accelerator reference behaviour


def _aes_key(params: Mapping) -> bytes:
    return hashlib.sha256(str(params.get("key", "nicpool-default-key")).encode()).digest()[:16]


def _aes_blocks(payload: bytes, params: Mapping) -> bytes:
    from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

    block = int(params.get("block_size", 16))
    if block <= 0:
        raise BadParams("block_size must be positive")
    key = _aes_key(params)
    out = bytearray()
    for idx in range(0, len(payload), block):
        nonce = idx.to_bytes(16, "big")
        enc = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
        out += enc.update(payload[idx:idx + block]) + enc.finalize()
    return bytes(out)


def _regex_rules(params: Mapping) -> List[re.Pattern]:
    rules = params.get("rules", ())
    if isinstance(rules, (str, bytes)):
        rules = [rules]
    return [re.compile(r.encode() if isinstance(r, str) else r) for r in rules]


def accel_reference(kind, params: Mapping, payload: bytes) -> Tuple[bytes, Dict[str, Any]]:
    """Software stand-in for an accelerator invocation.

    Returns ``(payload', match_info)``. Timing is not charged here.
    """
    try:
        kind = AcceleratorKind.parse(kind)
    except Exception:
        raise UnknownAccelerator(f"unknown accelerator {kind!r}") from None
    params = params or {}
    payload = bytes(payload or b"")
    if kind == AcceleratorKind.REGEX:
        count = sum(len(p.findall(payload)) for p in _regex_rules(params))
        return payload, {"count": count}
    if kind == AcceleratorKind.COMPRESSION:
        level = int(params.get("level", 6))
        if not 0 <= level <= 9:
            raise BadParams("compression level must be 0..9")
        out = zlib.compress(payload, level)
        return out, {"in_len": len(payload), "out_len": len(out)}
    if kind == AcceleratorKind.AES:
        return _aes_blocks(payload, params), {"block_size": int(params.get("block_size", 16))}
    if kind == AcceleratorKind.SHA:
        tag_len = int(params.get("tag_len", 32))
        if not 1 <= tag_len <= 32:
            raise BadParams("tag_len must be 1..32")
        key = params.get("key")
        if key is not None:
            digest = _hmac.new(str(key).encode(), payload, hashlib.sha256).digest()
        else:
            digest = hashlib.sha256(payload).digest()
        return payload + digest[:tag_len], {"tag": digest[:tag_len]}
    raise UnknownAccelerator(kind)


def accel_inverse(kind, params: Mapping, payload: bytes) -> bytes:
    """Inverse transform for the reversible reference accelerators."""
    kind = AcceleratorKind.parse(kind)
    if kind == AcceleratorKind.COMPRESSION:
        return zlib.decompress(payload)
    if kind == AcceleratorKind.AES:
        # CTR mode is its own inverse per block
        return _aes_blocks(payload, params)
    if kind == AcceleratorKind.SHA:
        return payload[: len(payload) - int(params.get("tag_len", 32))]
    return payload


# ---------------------------------------------------------------------------
# stage execution


class StageContext:
    """What a UCF sees besides its input: parameters, clock, state handle."""

    __slots__ = ("params", "state", "now", "nic_id", "app_id", "counters")

    def __init__(self, params: Optional[Mapping] = None, state=None, now: float = 0.0,
                 nic_id: Optional[str] = None, app_id: Optional[str] = None):
        self.params = params if params is not None else {}
        self.state = state
        self.now = now
        self.nic_id = nic_id
        self.app_id = app_id
        self.counters: Dict[str, int] = {}

    def accel(self, kind, payload: bytes, **params):
        merged = dict(self.params)
        merged.update(params)
        return accel_reference(kind, merged, payload)

    def bump(self, name: str, n: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + n


class FlowExtractor:
    """Per-flow sliding windows: first emit after ``window`` packets, then every ``slide``."""

    def __init__(self, window: int, slide: int):
        self.window = window
        self.slide = slide
        self._seen: Dict[FiveTuple, int] = {}
        self._buf: Dict[FiveTuple, List[Packet]] = {}

    def feed(self, pkt: Packet) -> Optional[List[Packet]]:
        n = self._seen.get(pkt.flow, 0) + 1
        self._seen[pkt.flow] = n
        buf = self._buf.setdefault(pkt.flow, [])
        buf.append(pkt)
        if len(buf) > self.window:
            del buf[0]
        if n >= self.window and (n - self.window) % self.slide == 0:
            return list(buf)
        return None


class StageRunner:
    """Executes one stage for one application instance.

    Holds what must persist across packets: flow windows, flow records and
    the socket table. ``run`` returns True when the packet passes.
    """

    def __init__(self, stage: StageSpec, registry: UcfRegistry, flows: Optional[Dict[FiveTuple, FlowRecord]] = None,
                 sockets: Optional["SocketTable"] = None):
        self.stage = stage
        self.fn = registry.lookup(stage.ucf, "stage") if stage.ucf else None
        self.flows = flows if flows is not None else {}
        self.sockets = sockets
        self.extractor = FlowExtractor(stage.window_size, stage.slide_interval) if stage.kind == StageKind.FLOW_EXT else None
        self.emitted = 0
        self.panics = 0
        kind = stage.kind
        if kind == StageKind.PKT_FLT:
            self.run = self._run_flt
        elif kind == StageKind.PKT_TRANS:
            self.run = self._run_trans
        elif kind == StageKind.FLOW_EXT:
            self.run = self._run_ext
        elif kind == StageKind.FLOW_TRANS:
            self.run = self._run_flow_trans
        elif kind == StageKind.SOCKET_EPOLL:
            self.run = self._run_socket
        else:
            self.run = self._run_accel

    def _call(self, *args):
        try:
            return self.fn(*args)
        except Exception as exc:  # UCF failure: drop and keep the pipeline alive
            self.panics += 1
            raise UcfPanic(f"{self.stage.name}: {exc!r}") from exc

    def _run_flt(self, pkt: Packet, ctx: StageContext) -> bool:
        return bool(self._call(pkt, ctx))

    def _run_trans(self, pkt: Packet, ctx: StageContext) -> bool:
        self._call(pkt, ctx)
        return True

    def record(self, flow: FiveTuple) -> FlowRecord:
        rec = self.flows.get(flow)
        if rec is None:
            rec = self.flows[flow] = FlowRecord(flow)
        return rec

    def _run_ext(self, pkt: Packet, ctx: StageContext) -> bool:
        window = self.extractor.feed(pkt)
        if window is not None:
            rec = self.record(pkt.flow)
            rec.flow_meta["windows"] = rec.flow_meta.get("windows", 0) + 1
            if self.fn is not None:
                meta = self._call(window, ctx)
                if meta:
                    rec.flow_meta.update(meta)
            else:
                rec.flow_meta["window_bytes"] = sum(p.payload_len for p in window)
            self.emitted += 1
            pkt.meta["emitted"] = rec
        return True

    def _run_flow_trans(self, pkt: Packet, ctx: StageContext) -> bool:
        self._call(self.record(pkt.flow), ctx)
        return True

    def _run_socket(self, pkt: Packet, ctx: StageContext) -> bool:
        table = self.sockets
        sid = table.socket_for(pkt.flow) if table is not None else None
        if sid is None:
            # unregistered connection: bypass
            return True
        event = SocketEvent(sid, EpollEvent(pkt.meta.get("epoll", EpollEvent.EPOLL_IN)), pkt.payload or b"", pkt.meta)
        return bool(self._call(event, ctx))

    def _run_accel(self, pkt: Packet, ctx: StageContext) -> bool:
        info: Dict[str, Any] = {}
        if pkt.payload is not None:
            pkt.payload, info = accel_reference(self.stage.accel, self.stage.params, pkt.payload)
            if len(pkt.payload) > MAX_PAYLOAD:
                pkt.payload = pkt.payload[:MAX_PAYLOAD]
            pkt.payload_len = len(pkt.payload)
        if self.fn is None:
            return True
        return bool(self._call(pkt, info, ctx))


def execute_stage(stage: StageSpec, inp, state_ctx=None, *, registry: Optional[UcfRegistry] = None,
                  runner: Optional[StageRunner] = None, now: float = 0.0) -> StageResult:
    """Reference semantics of one stage on one input.

    ``inp`` is a Packet for PktTrans/PktFlt/AccelFn, a list of Packets for
    FlowExt, a FlowRecord for FlowTrans, and a SocketEvent for SocketEpoll.
    A panicking UCF yields a Drop carrying the error.
    """
    registry = registry if registry is not None else default_registry()
    ctx = state_ctx if isinstance(state_ctx, StageContext) else StageContext(stage.params, state_ctx, now)
    if ctx.params is None or not ctx.params:
        ctx.params = stage.params
    runner = runner or StageRunner(stage, registry)
    kind = stage.kind
    try:
        if kind in (StageKind.PKT_TRANS, StageKind.PKT_FLT, StageKind.ACCEL_FN):
            if not isinstance(inp, Packet):
                raise TypeMismatch(f"{kind.value} expects a Packet")
            cost = stage.service_us(inp.payload_len)
            ok = runner.run(inp, ctx)
            return StageResult(Action.PASS if ok else Action.DROP, inp if ok else None, service_us=cost)
        if kind == StageKind.FLOW_EXT:
            if isinstance(inp, Packet):
                inp = [inp]
            if not isinstance(inp, (list, tuple)) or not all(isinstance(p, Packet) for p in inp):
                raise TypeMismatch("FlowExt expects a window of Packets")
            emitted: List[FlowRecord] = []
            cost = 0.0
            for p in inp:
                cost += stage.service_us(p.payload_len)
                runner.run(p, ctx)
                rec = p.meta.pop("emitted", None)
                if rec is not None:
                    emitted.append(FlowRecord(rec.flow, dict(rec.flow_meta)))
            action = Action.EMIT if emitted else Action.PASS
            return StageResult(action, list(inp), emitted=emitted, service_us=cost)
        if kind == StageKind.FLOW_TRANS:
            if not isinstance(inp, FlowRecord):
                raise TypeMismatch("FlowTrans expects a FlowRecord")
            runner._call(inp, ctx)
            return StageResult(Action.PASS, inp, service_us=stage.service_us(0))
        if kind == StageKind.SOCKET_EPOLL:
            if not isinstance(inp, SocketEvent):
                raise TypeMismatch("SocketEpoll expects a SocketEvent")
            ok = bool(runner._call(inp, ctx))
            return StageResult(Action.PASS if ok else Action.DROP, inp if ok else None,
                               service_us=stage.service_us(len(inp.message)))
    except UcfPanic as exc:
        return StageResult(Action.DROP, None, error=exc)
    raise TypeMismatch(f"unsupported stage kind {kind}")


# ---------------------------------------------------------------------------
# socket processing


class SocketTable:
    """Registered connections of one application; unregistered ones bypass it."""

    def __init__(self):
        self._by_flow: Dict[FiveTuple, int] = {}
        self._by_id: Dict[int, FiveTuple] = {}
        self._ids = itertools.count(1)

    def register_socket(self, conn: FiveTuple) -> int:
        if conn in self._by_flow:
            raise DuplicateRegistration(f"connection {conn} already registered")
        sid = next(self._ids)
        self._by_flow[conn] = sid
        self._by_id[sid] = conn
        return sid

    def socket_for(self, conn: FiveTuple) -> Optional[int]:
        return self._by_flow.get(conn)

    def conn(self, sid: int) -> FiveTuple:
        try:
            return self._by_id[sid]
        except KeyError:
            raise UnknownSocket(f"socket {sid} is not registered") from None

    def deliver_epoll(self, sid: int, event, message: bytes, stages: Sequence[StageSpec],
                      registry: Optional[UcfRegistry] = None, ctx: Optional[StageContext] = None) -> StageResult:
        """Run a message through the app's SocketEpoll stages."""
        self.conn(sid)
        ev = SocketEvent(sid, EpollEvent(event), bytes(message))
        result = StageResult(Action.PASS, ev)
        for st in stages:
            if st.kind != StageKind.SOCKET_EPOLL:
                continue
            c = ctx or StageContext(st.params)
            c.params = st.params
            result = execute_stage(st, ev, c, registry=registry)
            if result.action == Action.DROP:
                return result
        return result

    def __len__(self) -> int:
        return len(self._by_flow)


# ---------------------------------------------------------------------------
# built-in UCFs used by the bundled applications

_DEFAULT: Optional[UcfRegistry] = None


def _identity(pkt, ctx):
    return True


def _drop_all(pkt, ctx):
    return False


def _pass_all(pkt, ctx):
    return True


def _no_zero_byte(pkt, ctx):
    """Drop packets whose payload contains 0x00."""
    return b"\x00" not in (pkt.payload or b"")


def _ddos_check(pkt, ctx):
    # entropy gap of payload bytes; flags but never drops unless asked to
    data = pkt.payload or b""
    if data:
        distinct = len(set(data))
        gap = 8.0 - (distinct.bit_length())
        if gap > float(ctx.params.get("threshold", 7.5)):
            pkt.meta["ddos_flag"] = 1
            if ctx.params.get("drop_flagged", False):
                return False
    return True


def _url_check(pkt, ctx):
    # PktFlt variant doing the regex inside the UCF
    if pkt.payload is None:
        return True
    _, info = ctx.accel(AcceleratorKind.REGEX, pkt.payload)
    pkt.meta["match_num"] = info["count"]
    return info["count"] == 0 or not ctx.params.get("drop_on_match", True)


def _regex_verdict(pkt, info, ctx):
    # AccelFn(Regex) callback: drop on any rule match
    count = info.get("count", 0)
    pkt.meta["match_num"] = count
    return count == 0 or not ctx.params.get("drop_on_match", True)


def _accel_pass(pkt, info, ctx):
    return True


def _ipsec(pkt, ctx):
    pkt.meta["esp"] = True
    if pkt.payload is not None:
        spi = int(ctx.params.get("spi", 0x1001)).to_bytes(4, "big")
        body = spi + pkt.flow_seq.to_bytes(4, "big") + pkt.payload
        body, _ = accel_reference(AcceleratorKind.SHA, {"tag_len": 12}, body)
        pkt.payload = body[:MAX_PAYLOAD]
        pkt.payload_len = len(pkt.payload)


def _ipcomp_encap(pkt, ctx):
    pkt.meta["ipcomp"] = True


def _flow_monitor_update(pkt, ctx):
    """Count packets and bytes per flow in local state."""
    st = ctx.state
    if st is not None:
        key = "pk:" + pkt.flow.key()
        st.incr(key, 1)
    return True


def _five_tuple_window(window, ctx):
    return {"window_pkts": len(window), "window_bytes": sum(p.payload_len for p in window)}


def _flow_stats(rec, ctx):
    rec.flow_meta["updates"] = rec.flow_meta.get("updates", 0) + 1


def _firewall(pkt, ctx):
    blocked = ctx.params.get("blocked_ports", ())
    return pkt.flow.dst_port not in blocked


def _stateful_firewall(pkt, ctx):
    st = ctx.state
    if st is not None:
        key = "fw:" + pkt.flow.key()
        try:
            st.get(key)
        except Exception:
            st.add(key, 1)
    return _firewall(pkt, ctx)


def _ids_match(pkt, info, ctx):
    count = info.get("count", 0)
    if count and ctx.state is not None:
        ctx.state.incr("ids:" + pkt.flow.key(), count)
    return count == 0 or not ctx.params.get("drop_on_match", False)


def _ids_track(pkt, ctx):
    st = ctx.state
    if st is not None:
        key = "idsf:" + pkt.flow.key()
        try:
            st.set(key, pkt.flow_seq)
        except Exception:
            st.add(key, pkt.flow_seq)
    return True


def api_gateway_message(body: bytes, key: str = "gw-key") -> bytes:
    """Build an authentic message: body followed by its HMAC-SHA256 tag."""
    return body + _hmac.new(key.encode(), body, hashlib.sha256).digest()


def _api_gateway_epoll_in(ev: SocketEvent, ctx):
    """Authenticate, rate-limit, and redirect an API call to a backend."""
    if ev.event != EpollEvent.EPOLL_IN:
        return False
    msg = ev.message
    if not msg:
        # synthetic traffic carries no bytes: treat as authenticated
        ev.meta["backend"] = _pick_backend(ev, ctx)
        return True
    if len(msg) < 32:
        return False
    body, hmac_recv = msg[:-32], msg[-32:]
    key = str(ctx.params.get("key", "gw-key"))
    if not _hmac.compare_digest(hmac_recv, _hmac.new(key.encode(), body, hashlib.sha256).digest()):
        return False
    limit = ctx.params.get("rate_limit")
    if limit is not None:
        n = ctx.counters.get(f"sock{ev.socket_id}", 0)
        if n >= int(limit):
            return False
        ctx.bump(f"sock{ev.socket_id}")
    ev.meta["backend"] = _pick_backend(ev, ctx)
    return True


def _pick_backend(ev: SocketEvent, ctx) -> str:
    backends = ctx.params.get("backends", ("backend0",))
    return backends[ev.socket_id % len(backends)]


def _l7_lb(ev: SocketEvent, ctx):
    st = ctx.state
    backend = _pick_backend(ev, ctx)
    if st is not None:
        key = f"lb:{ev.socket_id}"
        try:
            backend = st.get(key)
        except Exception:
            st.add(key, backend)
    ev.meta["backend"] = backend
    return True


def _sum_reducer():
    return Reducer(lambda items: sum(v for _, v in items), lambda parts: sum(parts))


def _count_reducer():
    return Reducer(lambda items: sum(1 for _ in items), lambda parts: sum(parts))


def _min_reducer():
    return Reducer(lambda items: min((v for _, v in items), default=None),
                   lambda parts: min((p for p in parts if p is not None), default=None))


def _max_reducer():
    return Reducer(lambda items: max((v for _, v in items), default=None),
                   lambda parts: max((p for p in parts if p is not None), default=None))


def _product_reducer():
    def prod(vals):
        out = 1
        for v in vals:
            out *= v
        return out

    return Reducer(lambda items: prod(v for _, v in items), prod)


def top_n_reducer(n: int):
    """Largest ``n`` (name, value) pairs; ties broken by name."""

    def key(item):
        return (-item[1], item[0])

    def local(items):
        return sorted(items, key=key)[:n]

    def combine(parts):
        merged = [it for p in parts for it in p]
        return sorted(merged, key=key)[:n]

    return Reducer(local, combine)


@dataclass(frozen=True)
class Reducer:
    """Associative, commutative reduction: ``combine(map(local, shards))``."""

    local: Callable[[Iterable[Tuple[str, Any]]], Any]
    combine: Callable[[List[Any]], Any]

    def __call__(self, items):
        return self.combine([self.local(list(items))])


def default_registry() -> UcfRegistry:
    """Shared registry with the built-in UCFs. Extend via a child registry."""
    global _DEFAULT
    if _DEFAULT is None:
        reg = UcfRegistry()
        for name, fn in [
            ("identity", _identity),
            ("drop_all", _drop_all),
            ("pass_all", _pass_all),
            ("no_zero_byte", _no_zero_byte),
            ("ddos_check", _ddos_check),
            ("url_check", _url_check),
            ("regex_verdict", _regex_verdict),
            ("accel_pass", _accel_pass),
            ("ipsec", _ipsec),
            ("ipcomp_encap", _ipcomp_encap),
            ("flow_monitor_update", _flow_monitor_update),
            ("five_tuple_window", _five_tuple_window),
            ("flow_stats", _flow_stats),
            ("firewall", _firewall),
            ("stateful_firewall", _stateful_firewall),
            ("ids_match", _ids_match),
            ("ids_track", _ids_track),
            ("api_gateway_epoll_in", _api_gateway_epoll_in),
            ("l7_lb", _l7_lb),
            ("zlib_bomb_check", _pass_all),
            ("l7_classify", _pass_all),
        ]:
            reg.register(name, fn)
        reg.register("SUM", _sum_reducer(), kind="reducer")
        reg.register("ADD", _sum_reducer(), kind="reducer")
        reg.register("COUNT", _count_reducer(), kind="reducer")
        reg.register("MIN", _min_reducer(), kind="reducer")
        reg.register("MAX", _max_reducer(), kind="reducer")
        reg.register("MULTIPLY", _product_reducer(), kind="reducer")
        reg.register("TOP-N", top_n_reducer(10), kind="reducer")
        reg.register("SUBTRACT", lambda a, b: a - b, kind="binary")
        reg.register("DIVIDE", lambda a, b: a / b, kind="binary")
        reg.freeze()
        _DEFAULT = reg
    return _DEFAULT


def app_registry() -> UcfRegistry:
    """Fresh append-only registry layered over the built-ins."""
    return UcfRegistry(parent=default_registry())
