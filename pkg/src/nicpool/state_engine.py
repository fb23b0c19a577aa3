"""Per-NIC state engine: linked hash tables of 64-byte entries plus a modeled
one-sided read/write transport between NICs."""

from __future__ import annotations

import functools
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .app_model import AccessPattern, Reducer, UcfRegistry, default_registry
from .cluster import RackNetwork
from .errors import DuplicateAdd, NonReducibleUcf, NotFound, UnknownApp, UnknownUcf, ValueTooLarge

N_BUCKETS = 4096
ENTRY_SIZE = 64
NAME_BYTES = 24
DEFAULT_MAX_VALUE = 4096
DEFAULT_LIFESPAN_US = 500 * 1_000_000.0

# s_name, h_key, s_addr, s_len, lu_time, pad
_ENTRY = struct.Struct("<24sQQQdQ")
assert _ENTRY.size == ENTRY_SIZE


@functools.lru_cache(maxsize=1 << 17)
def hash_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def encode_value(value: Any) -> bytes:
    if isinstance(value, bool):
        return b"\x01" if value else b"\x00"
    if isinstance(value, int):
        return value.to_bytes(8, "little", signed=True)
    if isinstance(value, float):
        return struct.pack("<d", value)
    if isinstance(value, str):
        return value.encode()
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    raise TypeError(f"unsupported state value type {type(value).__name__}")


class StateEntry:
    __slots__ = ("s_name", "h_key", "s_addr", "s_len", "lu_time", "pad", "next", "writer")

    def __init__(self, s_name: str, h_key: int, s_addr: int, s_len: int, lu_time: float, writer: int = 0):
        self.s_name = s_name
        self.h_key = h_key
        self.s_addr = s_addr
        self.s_len = s_len
        self.lu_time = lu_time
        self.pad = 0
        self.next: Optional[StateEntry] = None
        self.writer = writer

    def pack(self) -> bytes:
        name = self.s_name.encode()
        if len(name) > NAME_BYTES:
            name = name[:NAME_BYTES]
        return _ENTRY.pack(name, self.h_key, self.s_addr, self.s_len, self.lu_time, self.pad)

    @classmethod
    def unpack(cls, raw: bytes) -> "StateEntry":
        name, h, addr, ln, lu, pad = _ENTRY.unpack(raw)
        e = cls(name.rstrip(b"\x00").decode(), h, addr, ln, lu)
        e.pad = pad
        return e


class StateTable:
    """4096 singly-linked chains; an entry lives in bucket ``h_key % 4096``."""

    def __init__(self, nic_id: str, app_id: str, access_pattern=AccessPattern.NON_EXTERNAL_WRITE,
                 max_value_len: int = DEFAULT_MAX_VALUE):
        self.nic_id = nic_id
        self.app_id = app_id
        self.access_pattern = AccessPattern(access_pattern)
        self.max_value_len = max_value_len
        self._heads: List[Optional[StateEntry]] = [None] * N_BUCKETS
        self._tails: List[Optional[StateEntry]] = [None] * N_BUCKETS
        self.memory: Dict[int, Any] = {}
        self._next_addr = 0x1000
        self._count = 0
        self.modified_since_sync = False

    def __len__(self) -> int:
        return self._count

    def _alloc(self, nbytes: int) -> int:
        addr = self._next_addr
        self._next_addr += max(8, (nbytes + 7) // 8 * 8)
        return addr

    def find(self, name: str) -> Optional[StateEntry]:
        h = hash_key(name)
        e = self._heads[h % N_BUCKETS]
        while e is not None:
            if e.h_key == h and e.s_name == name:
                return e
            e = e.next
        return None

    def _check_len(self, value) -> int:
        n = len(encode_value(value))
        if n > self.max_value_len:
            raise ValueTooLarge(f"value of {n} bytes exceeds {self.max_value_len}")
        return n

    def add(self, name: str, value, now: float, writer: int = 0) -> StateEntry:
        if len(name.encode()) > NAME_BYTES:
            raise ValueError(f"state name longer than {NAME_BYTES} bytes: {name!r}")
        n = self._check_len(value)
        if self.find(name) is not None:
            raise DuplicateAdd(f"state {name!r} already exists on {self.nic_id}")
        h = hash_key(name)
        e = StateEntry(name, h, self._alloc(n), n, now, writer)
        self.memory[e.s_addr] = value
        b = h % N_BUCKETS
        if self._tails[b] is None:
            self._heads[b] = self._tails[b] = e
        else:
            self._tails[b].next = e
            self._tails[b] = e
        self._count += 1
        self.modified_since_sync = True
        return e

    def set(self, name: str, value, now: float, writer: int = 0) -> StateEntry:
        e = self.find(name)
        if e is None:
            raise NotFound(f"state {name!r} not found on {self.nic_id}")
        n = self._check_len(value)
        if n > e.s_len:
            del self.memory[e.s_addr]
            e.s_addr = self._alloc(n)
        e.s_len = n
        self.memory[e.s_addr] = value
        e.lu_time = now
        e.writer = writer
        self.modified_since_sync = True
        return e

    def upsert(self, name: str, value, now: float, writer: int = 0) -> StateEntry:
        if self.find(name) is None:
            return self.add(name, value, now, writer)
        return self.set(name, value, now, writer)

    def get(self, name: str, now: Optional[float] = None):
        e = self.find(name)
        if e is None:
            raise NotFound(f"state {name!r} not found on {self.nic_id}")
        if now is not None:
            e.lu_time = now
        return self.memory[e.s_addr]

    def remove(self, name: str) -> None:
        h = hash_key(name)
        b = h % N_BUCKETS
        prev = None
        e = self._heads[b]
        while e is not None:
            if e.h_key == h and e.s_name == name:
                break
            prev, e = e, e.next
        if e is None:
            raise NotFound(f"state {name!r} not found on {self.nic_id}")
        if prev is None:
            self._heads[b] = e.next
        else:
            prev.next = e.next
        if self._tails[b] is e:
            self._tails[b] = prev
        del self.memory[e.s_addr]
        self._count -= 1
        self.modified_since_sync = True

    def entries(self) -> Iterator[StateEntry]:
        for head in self._heads:
            e = head
            while e is not None:
                yield e
                e = e.next

    def bucket_of(self, name: str) -> Optional[int]:
        for b, head in enumerate(self._heads):
            e = head
            while e is not None:
                if e.s_name == name:
                    return b
                e = e.next
        return None

    def items(self) -> List[Tuple[str, Any]]:
        return [(e.s_name, self.memory[e.s_addr]) for e in self.entries()]

    def nbytes(self) -> int:
        return sum(ENTRY_SIZE + e.s_len for e in self.entries())

    def to_bytes(self) -> bytes:
        out = bytearray()
        for e in self.entries():
            out += e.pack()
            out += encode_value(self.memory[e.s_addr])
        return bytes(out)

    def content_bytes(self) -> bytes:
        """Entries and values without address handles (which are NIC-local)."""
        out = bytearray()
        for e in self.entries():
            saved = e.s_addr
            e.s_addr = 0
            out += e.pack()
            e.s_addr = saved
            out += encode_value(self.memory[e.s_addr])
        return bytes(out)

    def dump(self) -> List[dict]:
        return [{"name": e.s_name, "len": e.s_len, "lu_time": e.lu_time} for e in self.entries()]

    def evict_expired(self, now: float, threshold_us: float = DEFAULT_LIFESPAN_US) -> int:
        doomed = [e.s_name for e in self.entries() if now - e.lu_time > threshold_us]
        for name in doomed:
            self.remove(name)
        return len(doomed)

    def clear(self) -> None:
        self.__init__(self.nic_id, self.app_id, self.access_pattern, self.max_value_len)


@dataclass
class OpReceipt:
    """Modeled cost of one state operation."""

    latency_us: float = 0.0
    messages: List[Tuple[str, str, str, int]] = field(default_factory=list)

    @property
    def n_messages(self) -> int:
        return len(self.messages)

    @property
    def bytes(self) -> int:
        return sum(m[3] for m in self.messages)

    def count(self, kind: str) -> int:
        return sum(1 for m in self.messages if m[0] == kind)


class StateFabric:
    """All NICs' state engines plus the transport model between them.

    Remote messages cost one RTT plus serialization at ``bw_gbps``. Writes
    to replicas go out in parallel, so a propagated write waits for the
    slowest replica.
    """

    def __init__(self, network: Optional[RackNetwork] = None, nic_order: Optional[Sequence[str]] = None,
                 bw_gbps: float = 100.0, max_value_len: int = DEFAULT_MAX_VALUE,
                 lifespan_us: float = DEFAULT_LIFESPAN_US, registry: Optional[UcfRegistry] = None):
        self.network = network or RackNetwork()
        self.nic_order = list(nic_order or [])
        self.bw_gbps = bw_gbps
        self.max_value_len = max_value_len
        self.lifespan_us = lifespan_us
        self.registry = registry or default_registry()
        self._tables: Dict[Tuple[str, str], StateTable] = {}
        self._backups: Dict[Tuple[str, str, str], StateTable] = {}
        self.apps: Dict[str, Tuple[AccessPattern, List[str]]] = {}
        self.totals = OpReceipt()

    # membership ---------------------------------------------------------
    def _rank(self, nic_id: str) -> Tuple[int, str]:
        try:
            return (self.nic_order.index(nic_id), nic_id)
        except ValueError:
            return (len(self.nic_order), nic_id)

    def register_app(self, app_id: str, access_pattern, nics: Iterable[str] = ()) -> None:
        self.apps[app_id] = (AccessPattern(access_pattern), [])
        for n in nics:
            self.add_member(app_id, n)

    def add_member(self, app_id: str, nic_id: str) -> StateTable:
        pattern, members = self._app(app_id)
        if nic_id not in members:
            members.append(nic_id)
            members.sort(key=self._rank)
        key = (app_id, nic_id)
        if key not in self._tables:
            self._tables[key] = StateTable(nic_id, app_id, pattern, self.max_value_len)
            if pattern == AccessPattern.FULL_ACCESS:
                # a new replica starts from a copy of an existing one
                for other in members:
                    if other != nic_id and (app_id, other) in self._tables:
                        src = self._tables[(app_id, other)]
                        for e in src.entries():
                            self._tables[key].add(e.s_name, src.memory[e.s_addr], e.lu_time, e.writer)
                        break
        return self._tables[key]

    def remove_member(self, app_id: str, nic_id: str, drop_table: bool = False) -> None:
        _, members = self._app(app_id)
        if nic_id in members:
            members.remove(nic_id)
        if drop_table:
            self._tables.pop((app_id, nic_id), None)

    def members(self, app_id: str) -> List[str]:
        return list(self._app(app_id)[1])

    def _app(self, app_id: str):
        try:
            return self.apps[app_id]
        except KeyError:
            raise UnknownApp(f"app {app_id!r} not registered with the state engine") from None

    def table(self, app_id: str, nic_id: str) -> StateTable:
        self._app(app_id)
        t = self._tables.get((app_id, nic_id))
        if t is None:
            t = self.add_member(app_id, nic_id)
        return t

    # transport ----------------------------------------------------------
    def _msg_cost(self, src: str, dst: str, nbytes: int) -> float:
        return self.network.rtt(src, dst) + nbytes * 8 / (self.bw_gbps * 1000.0)

    def _record(self, receipt: OpReceipt, kind: str, src: str, dst: str, nbytes: int) -> float:
        receipt.messages.append((kind, src, dst, nbytes))
        self.totals.messages.append((kind, src, dst, nbytes))
        return self._msg_cost(src, dst, nbytes)

    def _writer_rank(self, nic_id: str) -> int:
        return self._rank(nic_id)[0]

    # operators ----------------------------------------------------------
    def _mutate(self, op: str, app_id: str, nic_id: str, name: str, value, now: float) -> OpReceipt:
        pattern, members = self._app(app_id)
        local = self.table(app_id, nic_id)
        writer = self._writer_rank(nic_id)
        receipt = OpReceipt()
        if op == "add":
            local.add(name, value, now, writer)
        elif op == "set":
            local.set(name, value, now, writer)
        else:
            local.remove(name)
        if pattern == AccessPattern.FULL_ACCESS:
            nbytes = ENTRY_SIZE + (len(encode_value(value)) if op != "remove" else 0)
            worst = 0.0
            for peer in members:
                if peer == nic_id:
                    continue
                self.apply_remote(op, app_id, peer, name, value, now, writer)
                worst = max(worst, self._record(receipt, "WRITE", nic_id, peer, nbytes))
            receipt.latency_us = worst
        return receipt

    def apply_remote(self, op: str, app_id: str, nic_id: str, name: str, value, ts: float, writer: int) -> bool:
        """Apply a replicated write; last writer wins by (timestamp, nic rank)."""
        t = self.table(app_id, nic_id)
        e = t.find(name)
        if op == "remove":
            if e is not None and (e.lu_time, e.writer) <= (ts, writer):
                t.remove(name)
                return True
            return False
        if e is None:
            t.add(name, value, ts, writer)
            return True
        if (e.lu_time, e.writer) > (ts, writer):
            return False
        t.set(name, value, ts, writer)
        return True

    def add(self, app_id: str, nic_id: str, name: str, value, now: float = 0.0) -> OpReceipt:
        return self._mutate("add", app_id, nic_id, name, value, now)

    def set(self, app_id: str, nic_id: str, name: str, value, now: float = 0.0) -> OpReceipt:
        return self._mutate("set", app_id, nic_id, name, value, now)

    def remove(self, app_id: str, nic_id: str, name: str, now: float = 0.0) -> OpReceipt:
        return self._mutate("remove", app_id, nic_id, name, None, now)

    def get(self, app_id: str, nic_id: str, name: str, now: float = 0.0) -> Tuple[Any, OpReceipt]:
        _, members = self._app(app_id)
        receipt = OpReceipt()
        local = self._tables.get((app_id, nic_id))
        if local is not None:
            e = local.find(name)
            if e is not None:
                e.lu_time = now
                return local.memory[e.s_addr], receipt
        for peer in members:
            if peer == nic_id:
                continue
            t = self._tables.get((app_id, peer))
            e = t.find(name) if t is not None else None
            nbytes = ENTRY_SIZE + (e.s_len if e is not None else 0)
            receipt.latency_us += self._record(receipt, "READ", nic_id, peer, nbytes)
            if e is not None:
                e.lu_time = now
                return t.memory[e.s_addr], receipt
        raise NotFound(f"state {name!r} not found for app {app_id}")

    def traverse(self, app_id: str, nic_id: str, now: float = 0.0) -> Tuple[List[Tuple[str, Any]], OpReceipt]:
        pattern, members = self._app(app_id)
        receipt = OpReceipt()
        out: List[Tuple[str, Any]] = []
        newest: Dict[str, Tuple[float, int, Any]] = {}
        worst = 0.0
        order = [nic_id] + [m for m in members if m != nic_id] if nic_id in members else list(members)
        for peer in order:
            t = self._tables.get((app_id, peer))
            if t is None:
                continue
            if peer != nic_id:
                worst = max(worst, self._record(receipt, "READ", nic_id, peer, t.nbytes()))
            for e in t.entries():
                val = t.memory[e.s_addr]
                if pattern == AccessPattern.FULL_ACCESS:
                    cur = newest.get(e.s_name)
                    if cur is None or e.lu_time > cur[0]:
                        newest[e.s_name] = (e.lu_time, len(newest) if cur is None else cur[1], val)
                else:
                    out.append((e.s_name, val))
        if pattern == AccessPattern.FULL_ACCESS:
            out = [(name, v[2]) for name, v in sorted(newest.items(), key=lambda kv: kv[1][1])]
        receipt.latency_us = worst
        return out, receipt

    def _reducer(self, reducer) -> Reducer:
        if isinstance(reducer, Reducer):
            return reducer
        if isinstance(reducer, str):
            try:
                fn = self.registry.lookup(reducer)
            except UnknownUcf:
                raise NonReducibleUcf(f"UCF {reducer!r} is not registered") from None
            if self.registry.kind_of(reducer) != "reducer" or not isinstance(fn, Reducer):
                raise NonReducibleUcf(f"UCF {reducer!r} is not a registered reducer")
            return fn
        raise NonReducibleUcf(f"{reducer!r} is not a reducer")

    def compute(self, app_id: str, nic_id: str, reducer, now: float = 0.0) -> Tuple[Any, OpReceipt]:
        """Distributed reduction: each NIC reduces locally, the caller combines."""
        red = self._reducer(reducer)
        pattern, members = self._app(app_id)
        receipt = OpReceipt()
        if pattern == AccessPattern.FULL_ACCESS:
            # replicas agree, so one table holds the whole state
            src = nic_id if (app_id, nic_id) in self._tables else (members[0] if members else nic_id)
            t = self._tables.get((app_id, src))
            items = t.items() if t is not None else []
            if src != nic_id:
                receipt.latency_us = self._record(receipt, "WRITE", nic_id, src, 16)
                self._record(receipt, "RESULT", src, nic_id, 16)
            return red.combine([red.local(items)]), receipt
        parts = []
        worst = 0.0
        for peer in members:
            t = self._tables.get((app_id, peer))
            if t is None:
                continue
            parts.append(red.local(t.items()))
            if peer != nic_id:
                cost = self._record(receipt, "WRITE", nic_id, peer, 16)
                cost += self._record(receipt, "RESULT", peer, nic_id, 16)
                worst = max(worst, cost)
        receipt.latency_us = worst
        return red.combine(parts), receipt

    def evict_expired(self, now: float, threshold_us: Optional[float] = None) -> int:
        threshold = self.lifespan_us if threshold_us is None else threshold_us
        return sum(t.evict_expired(now, threshold) for t in self._tables.values())

    # replication for failover and migration ------------------------------
    def sync_backup(self, app_id: str, src_nic: str, backup_nic: str) -> int:
        """Bring the backup copy of ``src_nic``'s table in line with the primary.

        Returns the number of entries written or removed.
        """
        src = self._tables.get((app_id, src_nic))
        key = (app_id, src_nic, backup_nic)
        dst = self._backups.get(key)
        if dst is None:
            dst = self._backups[key] = StateTable(backup_nic, app_id, self._app(app_id)[0], self.max_value_len)
        if src is None:
            n = len(dst)
            dst.clear()
            return n
        changes = 0
        src_names = set()
        for e in src.entries():
            src_names.add(e.s_name)
            val = src.memory[e.s_addr]
            d = dst.find(e.s_name)
            if d is None:
                dst.add(e.s_name, val, e.lu_time, e.writer)
                changes += 1
            elif dst.memory[d.s_addr] != val or d.lu_time != e.lu_time:
                dst.set(e.s_name, val, e.lu_time, e.writer)
                changes += 1
        for d in list(dst.entries()):
            if d.s_name not in src_names:
                dst.remove(d.s_name)
                changes += 1
        src.modified_since_sync = False
        return changes

    def backup_table(self, app_id: str, src_nic: str, backup_nic: str) -> Optional[StateTable]:
        return self._backups.get((app_id, src_nic, backup_nic))

    def restore_from_backup(self, app_id: str, failed_nic: str, backup_nic: str, now: float,
                            target_nic: Optional[str] = None) -> int:
        """Merge the last synchronized copy of ``failed_nic`` into a live table.

        The copy kept on ``backup_nic`` lands in ``target_nic``'s table
        (``backup_nic`` itself by default). Returns the entries restored.
        """
        snap = self._backups.get((app_id, failed_nic, backup_nic))
        self._tables.pop((app_id, failed_nic), None)
        self.remove_member(app_id, failed_nic)
        live = self.table(app_id, target_nic or backup_nic)
        if snap is None:
            return 0
        n = 0
        for e in snap.entries():
            live.upsert(e.s_name, snap.memory[e.s_addr], e.lu_time, e.writer)
            n += 1
        return n

    def copy_entries(self, app_id: str, src_nic: str, dst_nic: str, names: Iterable[str], now: float) -> OpReceipt:
        """Replicate selected entries (e.g. one flow's state) to another NIC."""
        receipt = OpReceipt()
        if src_nic == dst_nic:
            return receipt
        src = self._tables.get((app_id, src_nic))
        if src is None:
            return receipt
        dst = self.table(app_id, dst_nic)
        nbytes = 0
        for name in names:
            e = src.find(name)
            if e is None:
                continue
            dst.upsert(name, src.memory[e.s_addr], e.lu_time, e.writer)
            nbytes += ENTRY_SIZE + e.s_len
        if nbytes:
            receipt.latency_us = self._record(receipt, "WRITE", src_nic, dst_nic, nbytes)
        return receipt

    def handle(self, app_id: str, nic_id: str, clock: Callable[[], float]) -> "StateHandle":
        return StateHandle(self, app_id, nic_id, clock)


class StateHandle:
    """State API bound to one (app, NIC) as seen from inside a UCF."""

    __slots__ = ("fabric", "app_id", "nic_id", "clock", "_local", "_full")

    def __init__(self, fabric: StateFabric, app_id: str, nic_id: str, clock: Callable[[], float]):
        self.fabric = fabric
        self.app_id = app_id
        self.nic_id = nic_id
        self.clock = clock
        self._local = fabric.table(app_id, nic_id)
        self._full = fabric.apps[app_id][0] == AccessPattern.FULL_ACCESS

    def add(self, name: str, value) -> None:
        self.fabric.add(self.app_id, self.nic_id, name, value, self.clock())

    def set(self, name: str, value) -> None:
        self.fabric.set(self.app_id, self.nic_id, name, value, self.clock())

    def remove(self, name: str) -> None:
        self.fabric.remove(self.app_id, self.nic_id, name, self.clock())

    def get(self, name: str):
        return self.fabric.get(self.app_id, self.nic_id, name, self.clock())[0]

    def incr(self, name: str, delta: int = 1) -> int:
        now = self.clock()
        if not self._full:
            t = self._local
            e = t.find(name)
            if e is None:
                t.add(name, delta, now)
                return delta
            v = t.memory[e.s_addr] + delta
            t.memory[e.s_addr] = v
            e.lu_time = now
            t.modified_since_sync = True
            return v
        try:
            v = self.get(name) + delta
            self.set(name, v)
        except NotFound:
            v = delta
            self.add(name, v)
        return v
