"""Hierarchical monitoring: events, the radio, the central store, heartbeat detection."""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import struct
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

log = logging.getLogger(__name__)

RESOURCE = "resource"
HEARTBEAT = "heartbeat"
TRANSITION = "transition"
LOG = "log"
FAILURE = "failure"
KINDS = (RESOURCE, HEARTBEAT, TRANSITION, LOG, FAILURE)

RADIO_ADDR_ENV = "WRATH_RADIO_ADDR"


@dataclass(frozen=True)
class MonitoringEvent:
    run_id: str
    kind: str
    source: str
    ts: int
    seq: int
    body: dict = field(default_factory=dict)
    wall: float = 0.0

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.run_id, self.source, self.seq)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "kind": self.kind,
            "source": self.source,
            "ts": self.ts,
            "seq": self.seq,
            "body": self.body,
            "wall": self.wall,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MonitoringEvent":
        return cls(d["run_id"], d["kind"], d["source"], int(d["ts"]), int(d.get("seq", 0)),
                   d.get("body", {}), float(d.get("wall", 0.0)))


# component ids: "<node>", "<node>.manager", "<node>.w<k>"
def component_kind(component_id: str) -> str:
    if component_id.endswith(".manager"):
        return "manager"
    tail = component_id.rsplit(".", 1)
    if len(tail) == 2 and tail[1].startswith("w") and tail[1][1:].isdigit():
        return "worker"
    if component_id.startswith("pool:"):
        return "pool"
    return "node"


def component_node(component_id: str) -> str:
    if component_kind(component_id) in ("manager", "worker"):
        return component_id.rsplit(".", 1)[0]
    return component_id


class StoreError(RuntimeError):
    pass


class MonitoringStore:
    """Append-only event log with in-memory indexes.

    Every index is derivable from the log; :meth:`rebuild` recomputes them and
    :meth:`check_consistency` compares a fresh rescan against the live copy.
    Writes are serialized by a lock so socket and in-process appends can mix.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._lock = threading.Lock()
        self._fh = open(path, "a") if path else None
        self._reset()

    def _reset(self):
        self.events: list[MonitoringEvent] = []
        self._keys: set[tuple] = set()
        self.by_source: dict[str, list[int]] = defaultdict(list)
        self.by_task: dict[str, list[int]] = defaultdict(list)
        self.by_kind: dict[str, list[int]] = defaultdict(list)
        self.last_heartbeat: dict[str, int] = {}
        self.counters: dict[str, dict[tuple[str, str], list[int]]] = defaultdict(dict)
        self._last_ts: dict[str, int] = {}

    def __len__(self):
        return len(self.events)

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def append(self, event: MonitoringEvent) -> bool:
        """Append once per (run_id, source, seq); returns False on a duplicate."""
        with self._lock:
            if event.key in self._keys:
                return False
            if event.ts < self._last_ts.get(event.source, event.ts):
                raise StoreError(f"non-monotonic ts from {event.source}: {event.ts}")
            self._index(event)
            if self._fh:
                self._fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
            return True

    def _index(self, ev: MonitoringEvent):
        i = len(self.events)
        self.events.append(ev)
        self._keys.add(ev.key)
        self._last_ts[ev.source] = ev.ts
        self.by_source[ev.source].append(i)
        self.by_kind[ev.kind].append(i)
        task = ev.body.get("task_id")
        if task is not None:
            self.by_task[task].append(i)
        if ev.kind == HEARTBEAT:
            self.last_heartbeat[ev.source] = ev.ts
        elif ev.kind == TRANSITION and ev.body.get("from") == "Running":
            to = ev.body.get("to")
            if to in ("Succeeded", "Failed"):
                kind_ctr = self.counters[ev.body["kind"]]
                loc = (ev.body["pool_id"], ev.body["node_id"])
                c = kind_ctr.setdefault(loc, [0, 0])
                c[0 if to == "Succeeded" else 1] += 1

    def flush(self):
        if self._fh:
            self._fh.flush()

    def rebuild(self):
        with self._lock:
            events = self.events
            self._reset()
            for ev in events:
                self._index(ev)

    def check_consistency(self) -> bool:
        fresh = MonitoringStore()
        for ev in self.events:
            fresh._index(ev)
        return (
            dict(fresh.by_source) == dict(self.by_source)
            and dict(fresh.by_task) == dict(self.by_task)
            and dict(fresh.by_kind) == dict(self.by_kind)
            and fresh.last_heartbeat == self.last_heartbeat
            and dict(fresh.counters) == dict(self.counters)
        )

    @classmethod
    def load(cls, path: str) -> "MonitoringStore":
        store = cls()
        with open(path) as f:
            for line in f:
                if line.strip():
                    store.append(MonitoringEvent.from_dict(json.loads(line)))
        return store

    # query helpers -- callers get copies, never the live lists
    def snapshot(self) -> list[MonitoringEvent]:
        with self._lock:
            return list(self.events)

    def query(self, source: Optional[str] = None, kind: Optional[str] = None,
              task_id: Optional[str] = None, since: Optional[int] = None,
              until: Optional[int] = None) -> list[MonitoringEvent]:
        if source is not None:
            idx = self.by_source.get(source, [])
        elif task_id is not None:
            idx = self.by_task.get(task_id, [])
        elif kind is not None:
            idx = self.by_kind.get(kind, [])
        else:
            idx = range(len(self.events))
        out = []
        for i in idx:
            ev = self.events[i]
            if kind is not None and ev.kind != kind:
                continue
            if task_id is not None and ev.body.get("task_id") != task_id:
                continue
            if since is not None and ev.ts < since:
                continue
            if until is not None and ev.ts > until:
                continue
            out.append(ev)
        return out


# --- radio ---------------------------------------------------------------

class Unreachable(ConnectionError):
    pass


def encode_frame(event: MonitoringEvent) -> bytes:
    payload = json.dumps(event.to_dict(), sort_keys=True).encode()
    return struct.pack(">I", len(payload)) + payload


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> dict:
    (n,) = struct.unpack(">I", _read_exact(sock, 4))
    return json.loads(_read_exact(sock, n))


def decode_frame(data: bytes) -> MonitoringEvent:
    (n,) = struct.unpack(">I", data[:4])
    if len(data) - 4 != n:
        raise ValueError(f"frame length {n} does not match payload {len(data) - 4}")
    return MonitoringEvent.from_dict(json.loads(data[4:]))


class LocalTransport:
    """In-process channel straight into a store; ``down`` simulates an outage."""

    def __init__(self, store: MonitoringStore):
        self.store = store
        self.down = False

    def deliver(self, event: MonitoringEvent) -> bool:
        if self.down:
            raise Unreachable("store unreachable")
        return self.store.append(event)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                d = read_frame(self.request)
            except (ConnectionError, struct.error):
                return
            stored = self.server.store.append(MonitoringEvent.from_dict(d))
            ack = json.dumps({"ack": d.get("seq"), "stored": stored}).encode()
            self.request.sendall(struct.pack(">I", len(ack)) + ack)


class _ThreadedServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True


class RadioServer:
    """TCP endpoint appending received frames to a store, acking each one."""

    def __init__(self, store: MonitoringStore, host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self._server = _ThreadedServer((host, port), _FrameHandler)
        self._server.store = store
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "RadioServer":
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class SocketTransport:
    """Client side of the TCP radio; blocks for the ack so ordering is preserved."""

    def __init__(self, addr: Optional[str] = None, timeout: float = 2.0):
        addr = addr or os.environ.get(RADIO_ADDR_ENV)
        if not addr:
            raise ValueError(f"no radio address (set {RADIO_ADDR_ENV})")
        self.addr = parse_addr(addr)
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None

    def _connect(self):
        try:
            self._sock = socket.create_connection(self.addr, timeout=self.timeout)
        except OSError as e:
            raise Unreachable(str(e)) from e

    def deliver(self, event: MonitoringEvent) -> bool:
        if self._sock is None:
            self._connect()
        try:
            self._sock.sendall(encode_frame(event))
            ack = read_frame(self._sock)
        except (OSError, ConnectionError) as e:
            self.close()
            raise Unreachable(str(e)) from e
        return bool(ack.get("stored"))

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None


# never dropped on overflow
_PROTECTED = (HEARTBEAT, FAILURE)


class Radio:
    """Agent-side sender with a bounded outage buffer.

    Events that cannot be delivered are queued; the queue is drained in order
    before any new event.  When full, the oldest LogRecord is dropped first,
    then other unprotected kinds; heartbeats and failure reports never are.
    """

    def __init__(self, transport, capacity: int = 1000):
        self.transport = transport
        self.capacity = capacity
        self.buffer: deque[MonitoringEvent] = deque()
        self.dropped: list[MonitoringEvent] = []

    def send(self, event: MonitoringEvent) -> bool:
        """Returns True when the event (and any backlog) reached the store."""
        self.buffer.append(event)
        self._enforce_capacity()
        return self.flush()

    def flush(self) -> bool:
        while self.buffer:
            try:
                self.transport.deliver(self.buffer[0])
            except Unreachable:
                return False
            self.buffer.popleft()
        return True

    def _enforce_capacity(self):
        while len(self.buffer) > self.capacity:
            victim = self._pick_victim()
            if victim is None:
                log.warning("radio buffer over capacity with only protected events")
                return
            del self.buffer[victim]

    def _pick_victim(self) -> Optional[int]:
        for preferred in (LOG, None):
            for i, ev in enumerate(self.buffer):
                if ev.kind in _PROTECTED:
                    continue
                if preferred is None or ev.kind == preferred:
                    self.dropped.append(ev)
                    return i
        return None


def radio_send(radio: Radio, event: MonitoringEvent) -> bool:
    return radio.send(event)


class Emitter:
    """Stamps events for one run: per-source sequence numbers, clock timestamps."""

    def __init__(self, run_id: str, radio: Radio, clock, wall_clock=None):
        self.run_id = run_id
        self.radio = radio
        self.clock = clock
        self.wall_clock = wall_clock
        self._seq: dict[str, int] = defaultdict(int)

    def emit(self, kind: str, source: str, body: dict) -> MonitoringEvent:
        self._seq[source] += 1
        wall = self.wall_clock() if self.wall_clock else 0.0
        ev = MonitoringEvent(self.run_id, kind, source, int(self.clock()), self._seq[source], body, wall)
        self.radio.send(ev)
        return ev

    def heartbeat(self, component_id: str) -> MonitoringEvent:
        seq = self._seq[component_id] + 1
        return self.emit(HEARTBEAT, component_id, {"component_id": component_id, "hb_seq": seq})

    def log(self, source: str, event: str, **body: Any) -> MonitoringEvent:
        return self.emit(LOG, source, {"event": event, **body})


# --- resource sampling -----------------------------------------------------

def sample_node(node) -> dict:
    """Snapshot of a node's accounting counters as a ResourceSample body."""
    if not node.alive:
        raise RuntimeError(f"node {node.node_id} is not alive")
    busy = len(node.running)
    cpu = 0.0 if node.worker_count == 0 else min(100.0, 100.0 * busy / node.worker_count)
    return {
        "node_id": node.node_id,
        "cpu_pct": cpu,
        "memory_in_use_units": node.memory_in_use_units,
        "memory_capacity_units": node.config.memory_capacity_units,
        "open_files": node.open_files,
        "tasks": sorted(t for t, _ in node.running),
    }


# --- heartbeat detection ----------------------------------------------------

@dataclass(frozen=True)
class SuspectedFailure:
    component_id: str
    last_seen: int
    detected_at: int


@dataclass(frozen=True)
class Recovered:
    component_id: str
    seen_at: int
    detected_at: int


def detect_heartbeat_loss(store: MonitoringStore, now: int, interval_ms: int,
                          miss_threshold: int) -> list[SuspectedFailure]:
    """Components whose last heartbeat is older than ``miss_threshold * interval_ms``."""
    if interval_ms <= 0:
        raise ValueError("interval_ms must be > 0")
    if miss_threshold < 1:
        raise ValueError("miss_threshold must be >= 1")
    limit = miss_threshold * interval_ms
    return [SuspectedFailure(c, ts, now)
            for c, ts in sorted(store.last_heartbeat.items()) if now - ts > limit]


class HeartbeatDetector:
    """Stateful wrapper emitting each suspicion once and a Recovered on fresh heartbeats."""

    def __init__(self, interval_ms: int = 500, miss_threshold: int = 3):
        self.interval_ms = interval_ms
        self.miss_threshold = miss_threshold
        self.suspected: dict[str, int] = {}

    def poll(self, store: MonitoringStore, now: int) -> list:
        out: list = []
        silent = {s.component_id: s for s in
                  detect_heartbeat_loss(store, now, self.interval_ms, self.miss_threshold)}
        for cid in sorted(self.suspected):
            if cid not in silent:
                last = store.last_heartbeat.get(cid, now)
                out.append(Recovered(cid, last, now))
                del self.suspected[cid]
        for cid, s in silent.items():
            if cid not in self.suspected:
                self.suspected[cid] = now
                out.append(s)
        return out

    def forget(self, component_id: str):
        self.suspected.pop(component_id, None)


# --- history ------------------------------------------------------------------

def task_history(store: MonitoringStore, task_kind: str,
                 prior: Optional[dict] = None) -> dict[tuple[str, str], dict[str, int]]:
    out: dict[tuple[str, str], dict[str, int]] = {}
    for loc, (ok, bad) in store.counters.get(task_kind, {}).items():
        out[loc] = {"successes": ok, "failures": bad}
    if prior:
        for loc, c in prior.get(task_kind, {}).items():
            cur = out.setdefault(tuple(loc), {"successes": 0, "failures": 0})
            cur["successes"] += c["successes"]
            cur["failures"] += c["failures"]
    return out


def recount_history(events: Iterable[MonitoringEvent], task_kind: str) -> dict:
    """Independent replay of the success/failure counters from raw events."""
    out: dict[tuple[str, str], dict[str, int]] = {}
    for ev in events:
        b = ev.body
        if ev.kind != TRANSITION or b.get("kind") != task_kind or b.get("from") != "Running":
            continue
        if b.get("to") not in ("Succeeded", "Failed"):
            continue
        c = out.setdefault((b["pool_id"], b["node_id"]), {"successes": 0, "failures": 0})
        c["successes" if b["to"] == "Succeeded" else "failures"] += 1
    return out


def save_history(store: MonitoringStore, path: str):
    data = {k: [{"pool_id": p, "node_id": n, "successes": c[0], "failures": c[1]}
                for (p, n), c in v.items()] for k, v in store.counters.items()}
    with open(path, "w") as f:
        json.dump(data, f, indent=1, sort_keys=True)


def load_history(path: str) -> dict:
    with open(path) as f:
        raw = json.load(f)
    return {k: {(r["pool_id"], r["node_id"]): {"successes": r["successes"], "failures": r["failures"]}
                for r in rows} for k, rows in raw.items()}
