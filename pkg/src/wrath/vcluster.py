"""Virtual cluster: resource pools of nodes, node managers, worker slots.

Memory and file handles are accounted against declared capacities rather
than consumed.  Task bodies are real Python callables executed in-process;
their simulated duration is charged to the virtual clock by the manager.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

import numpy as np

from .monitoring import FAILURE, LOG, Emitter, component_kind, component_node
from .taskgraph import TaskSpec

log = logging.getLogger(__name__)


class InitFailure(RuntimeError):
    def __init__(self, pool_id: str, node_ids: list[str]):
        self.pool_id = pool_id
        self.node_ids = node_ids
        super().__init__(f"pilot job failed to initialize on {', '.join(node_ids)} (pool {pool_id})")


class UnknownNode(KeyError):
    pass


class RestartFailed(RuntimeError):
    pass


class NoCapacity(RuntimeError):
    pass


class NodeLost(RuntimeError):
    pass


class WorkerExit(BaseException):
    """Raised inside a task body to end its worker abnormally."""


# --- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    memory_capacity_units: int = 4
    installed_packages: frozenset[str] = frozenset()
    file_handle_limit: int = 1024
    init_failure: bool = False

    def __post_init__(self):
        if self.memory_capacity_units <= 0 or self.file_handle_limit <= 0:
            raise ValueError(f"node {self.node_id}: capacities must be > 0")
        object.__setattr__(self, "installed_packages", frozenset(self.installed_packages))

    @classmethod
    def from_dict(cls, d: dict) -> "NodeConfig":
        return cls(
            node_id=d["node_id"],
            memory_capacity_units=int(d.get("memory_capacity_units", 4)),
            installed_packages=frozenset(d.get("installed_packages", ())),
            file_handle_limit=int(d.get("file_handle_limit", 1024)),
            init_failure=bool(d.get("init_failure", False)),
        )

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "memory_capacity_units": self.memory_capacity_units,
            "installed_packages": sorted(self.installed_packages),
            "file_handle_limit": self.file_handle_limit,
            "init_failure": self.init_failure,
        }


@dataclass(frozen=True)
class PoolConfig:
    pool_id: str
    nodes: tuple[NodeConfig, ...]
    workers_per_node: int = 4

    def __post_init__(self):
        if not self.nodes:
            raise ValueError(f"pool {self.pool_id}: needs at least one node")
        if self.workers_per_node <= 0:
            raise ValueError(f"pool {self.pool_id}: workers_per_node must be > 0")
        object.__setattr__(self, "nodes", tuple(self.nodes))

    @classmethod
    def from_dict(cls, d: dict) -> "PoolConfig":
        return cls(d["pool_id"], tuple(NodeConfig.from_dict(n) for n in d["nodes"]),
                   int(d.get("workers_per_node", 4)))

    def to_dict(self) -> dict:
        return {"pool_id": self.pool_id, "workers_per_node": self.workers_per_node,
                "nodes": [n.to_dict() for n in self.nodes]}


@dataclass(frozen=True)
class ClusterConfig:
    """Topology.  ``submit_pools`` restricts first (requirement-blind) placement,
    like an application bound to its default executors; empty means all pools."""

    pools: tuple[PoolConfig, ...]
    submit_pools: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [p.pool_id for p in self.pools]
        if len(ids) != len(set(ids)):
            raise ValueError("pool ids must be unique")
        nids = [n.node_id for p in self.pools for n in p.nodes]
        if len(nids) != len(set(nids)):
            raise ValueError("node ids must be unique")
        for s in self.submit_pools:
            if s not in ids:
                raise ValueError(f"submit pool {s!r} is not defined")

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterConfig":
        return cls(tuple(PoolConfig.from_dict(p) for p in d["pools"]), tuple(d.get("submit_pools", ())))

    @classmethod
    def load(cls, path) -> "ClusterConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d: dict = {"pools": [p.to_dict() for p in self.pools]}
        if self.submit_pools:
            d["submit_pools"] = list(self.submit_pools)
        return d


def make_cluster_config(*pools: dict, submit_pools: Iterable[str] = ()) -> ClusterConfig:
    """Shorthand: ``make_cluster_config({"pool_id": "A", "count": 4, "memory": 4, ...})``."""
    out = []
    for p in pools:
        prefix = p.get("prefix", p["pool_id"].lower())
        nodes = []
        for i in range(p.get("count", 1)):
            nodes.append(NodeConfig(
                node_id=f"{prefix}{i + 1}",
                memory_capacity_units=p.get("memory", 4),
                installed_packages=frozenset(p.get("packages", ())),
                file_handle_limit=p.get("file_limit", 1024),
                init_failure=(i + 1) in p.get("init_failures", ()),
            ))
        out.append(PoolConfig(p["pool_id"], tuple(nodes), p.get("workers", 4)))
    return ClusterConfig(tuple(out), tuple(submit_pools))


# --- runtime state ---------------------------------------------------------------

@dataclass
class NodeState:
    config: NodeConfig
    pool_id: str
    worker_count: int
    alive: bool = False
    provisioned: bool = False
    manager_ok: bool = True
    memory_in_use_units: int = 0
    open_files: int = 0
    running: set = field(default_factory=set)  # {(task_id, worker_id)}
    denylisted: bool = False
    generation: int = 0
    crashed_workers: set = field(default_factory=set)

    @property
    def node_id(self) -> str:
        return self.config.node_id

    @property
    def live(self) -> bool:
        """Accepting work: powered on, provisioned, manager responsive."""
        return self.alive and self.provisioned and self.manager_ok

    @property
    def free_memory(self) -> int:
        return self.config.memory_capacity_units - self.memory_in_use_units

    def worker_ids(self) -> list[str]:
        return [f"{self.node_id}.w{i}" for i in range(self.worker_count)]

    def busy_workers(self) -> set[str]:
        return {w for _, w in self.running}

    def free_workers(self) -> list[str]:
        busy = self.busy_workers() | self.crashed_workers
        return [w for w in self.worker_ids() if w not in busy]


@dataclass(frozen=True)
class NodeView:
    node_id: str
    pool_id: str
    live: bool
    denylisted: bool
    memory_capacity_units: int
    free_memory: int
    free_slots: int
    packages: frozenset[str]
    file_handle_limit: int
    open_files: int


@dataclass(frozen=True)
class Placement:
    ladder_step: int
    pool_id: str
    node_id: str
    checked: bool = True  # admission-checked against requirements


@dataclass
class PoolHandle:
    pool_id: str
    live_nodes: list[str]
    failed_nodes: list[str]


class Cluster:
    def __init__(self, config: ClusterConfig, emitter: Optional[Emitter] = None):
        self.config = config
        self.emitter = emitter
        self.pools: dict[str, PoolConfig] = {}
        self.nodes: dict[str, NodeState] = {}
        self.on_restart: list[Callable[[str], None]] = []

    # -- events
    def _emit(self, kind: str, source: str, body: dict):
        if self.emitter is not None:
            self.emitter.emit(kind, source, body)

    def _announce(self, node: NodeState):
        if self.emitter is None:
            return
        self.emitter.heartbeat(node.node_id)
        if node.manager_ok:
            self.emitter.heartbeat(f"{node.node_id}.manager")

    def node(self, node_id: str) -> NodeState:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    # -- provisioning
    def provision_all(self) -> list[InitFailure]:
        failures = []
        for p in self.config.pools:
            try:
                self.provision_pool(p)
            except InitFailure as e:
                failures.append(e)
        return failures

    def provision_pool(self, config: PoolConfig) -> PoolHandle:
        """Start node managers and workers; raises InitFailure only if no node came up.

        Nodes whose pilot job fails stay unprovisioned and a PilotInitFailure
        report is appended to the monitoring store.
        """
        self.pools[config.pool_id] = config
        live, failed = [], []
        for nc in config.nodes:
            st = NodeState(config=nc, pool_id=config.pool_id, worker_count=config.workers_per_node)
            self.nodes[nc.node_id] = st
            if nc.init_failure:
                failed.append(nc.node_id)
                self._emit(FAILURE, nc.node_id, {
                    "node_id": nc.node_id, "pool_id": config.pool_id,
                    "manifestation": "ExceptionText",
                    "text": f"PilotInitError: pilot job failed to initialize on {nc.node_id}",
                })
                continue
            st.alive = st.provisioned = True
            live.append(nc.node_id)
            self._emit(LOG, nc.node_id, {"event": "registered", "pool_id": config.pool_id,
                                         "workers": st.worker_ids()})
            self._announce(st)
        handle = PoolHandle(config.pool_id, live, failed)
        if not live:
            raise InitFailure(config.pool_id, failed)
        if failed:
            log.warning("pool %s: pilot init failed on %s", config.pool_id, failed)
        return handle

    # -- faults and recovery
    def kill_node(self, node_id: str) -> list[str]:
        """Power off: running attempts vanish silently.  Returns the lost task ids."""
        st = self.node(node_id)
        lost = sorted(t for t, _ in st.running)
        st.alive = False
        st.generation += 1
        st.running.clear()
        st.memory_in_use_units = 0
        st.open_files = 0
        return lost

    def revive_node(self, node_id: str):
        st = self.node(node_id)
        st.alive = True
        st.provisioned = True
        st.manager_ok = True
        st.generation += 1
        st.running.clear()
        st.crashed_workers.clear()
        st.memory_in_use_units = 0
        st.open_files = 0
        self._emit(LOG, node_id, {"event": "revived", "pool_id": st.pool_id})
        self._announce(st)

    def hang_manager(self, node_id: str):
        """Node manager stops responding; the node itself stays powered."""
        st = self.node(node_id)
        st.manager_ok = False

    def restart_component(self, component_id: str) -> list[str]:
        """Relaunch a failed node manager or worker; returns orphaned task ids."""
        kind = component_kind(component_id)
        if kind == "pool":
            pool = component_id.split(":", 1)[1]
            orphans = []
            for st in self.nodes.values():
                if st.pool_id == pool and st.alive and not st.manager_ok:
                    orphans += self.restart_component(f"{st.node_id}.manager")
            return orphans
        st = self.node(component_node(component_id))
        if not st.alive or not st.provisioned:
            raise RestartFailed(f"{component_id}: node {st.node_id} is down")
        if kind == "worker":
            if component_id not in st.crashed_workers:
                log.warning("restart of healthy worker %s ignored", component_id)
                return []
            st.crashed_workers.discard(component_id)
            self._emit(LOG, st.node_id, {"event": "restarted", "component": component_id})
            return []
        if kind == "node":
            log.warning("restart of live node %s ignored", component_id)
            return []
        if st.manager_ok:
            log.warning("restart of healthy manager %s ignored", component_id)
            return []
        orphans = sorted(t for t, _ in st.running)
        st.manager_ok = True
        st.generation += 1
        st.running.clear()
        st.memory_in_use_units = 0
        st.open_files = 0
        self._emit(LOG, st.node_id, {"event": "restarted", "component": component_id,
                                     "orphans": orphans})
        self._announce(st)
        for cb in self.on_restart:
            cb(component_id)
        return orphans

    # -- views
    def view(self, denylist=None) -> dict[str, NodeView]:
        out = {}
        for nid, st in self.nodes.items():
            out[nid] = NodeView(
                node_id=nid, pool_id=st.pool_id, live=st.live,
                denylisted=is_excluded(nid, denylist),
                memory_capacity_units=st.config.memory_capacity_units,
                free_memory=st.free_memory, free_slots=len(st.free_workers()) if st.live else 0,
                packages=st.config.installed_packages,
                file_handle_limit=st.config.file_handle_limit, open_files=st.open_files,
            )
        return out

    def leases(self) -> dict[str, tuple[str, str, str]]:
        out = {}
        for st in self.nodes.values():
            for t, w in st.running:
                out[t] = (st.pool_id, st.node_id, w)
        return out


def is_excluded(node_id: str, denylist) -> bool:
    if not denylist:
        return False
    return node_id in denylist or f"{node_id}.manager" in denylist


# --- placement -------------------------------------------------------------------

def admits(spec: TaskSpec, node: NodeView) -> bool:
    req = spec.requirements
    if req.memory_units > node.free_memory:
        return False
    if not req.packages <= node.packages:
        return False
    if req.max_open_files is not None and req.max_open_files > node.file_handle_limit - node.open_files:
        return False
    return True


def schedule(cluster: Cluster, ready: Iterable[TaskSpec], hints: Optional[dict[str, Placement]] = None,
             denylist=None) -> list[tuple[str, str, str]]:
    """Assign ready tasks to nodes; unplaceable tasks are simply left out (queued).

    Unhinted tasks go to the live, non-denylisted node (within the submit
    pools) with the most free worker slots, ties to the lowest node id, with
    no requirement checks.  Hinted tasks go to their hinted node, and when
    the hint is admission-checked only if memory, packages and file handles fit.
    """
    hints = hints or {}
    view = cluster.view(denylist)
    slots = {n: v.free_slots for n, v in view.items()}
    mem = {n: v.free_memory for n, v in view.items()}
    submit = set(cluster.config.submit_pools) or set(cluster.pools)
    out = []
    for spec in ready:
        hint = hints.get(spec.id)
        if hint is not None:
            v = view.get(hint.node_id)
            if v is None or not v.live or v.denylisted or slots[hint.node_id] <= 0:
                continue
            if hint.checked:
                cur = NodeView(**{**v.__dict__, "free_memory": mem[hint.node_id]})
                if not admits(spec, cur):
                    continue
            node_id = hint.node_id
        else:
            cands = [n for n, v in view.items()
                     if v.live and not v.denylisted and v.pool_id in submit and slots[n] > 0]
            if not cands:
                continue
            node_id = min(cands, key=lambda n: (-slots[n], n))
        slots[node_id] -= 1
        mem[node_id] -= spec.requirements.memory_units
        out.append((spec.id, view[node_id].pool_id, node_id))
    return out


# --- execution -------------------------------------------------------------------

TASK_FUNCTIONS: dict[str, Callable] = {}


def task_function(name: str):
    def deco(fn):
        TASK_FUNCTIONS[name] = fn
        return fn
    return deco


def digest(value: Any) -> str:
    h = hashlib.sha256()
    _feed(h, value)
    return h.hexdigest()[:32]


def _feed(h, value):
    if isinstance(value, np.ndarray):
        h.update(f"nd:{value.dtype.str}:{value.shape}:".encode())
        h.update(np.ascontiguousarray(value).tobytes())
    elif isinstance(value, dict):
        h.update(b"{")
        for k in sorted(value, key=str):
            h.update(json.dumps(str(k)).encode() + b":")
            _feed(h, value[k])
        h.update(b"}")
    elif isinstance(value, (list, tuple)):
        h.update(b"[")
        for v in value:
            _feed(h, v)
            h.update(b",")
        h.update(b"]")
    else:
        h.update(json.dumps(value, sort_keys=True, default=str).encode())


def resolve_refs(args: Any, values: dict[str, Any]) -> Any:
    if isinstance(args, dict):
        if set(args) == {"$ref"}:
            return values[args["$ref"]]
        return {k: resolve_refs(v, values) for k, v in args.items()}
    if isinstance(args, list):
        return [resolve_refs(v, values) for v in args]
    return args


class TaskContext:
    """What a running body can see of its worker and node."""

    def __init__(self, node: NodeState, worker_id: str, attempt_index: int = 0):
        self.node = node
        self.worker_id = worker_id
        self.attempt_index = attempt_index
        self.files_opened = 0

    @property
    def node_id(self) -> str:
        return self.node.node_id

    @property
    def pool_id(self) -> str:
        return self.node.pool_id

    def require(self, package: str):
        if package not in self.node.config.installed_packages:
            raise ModuleNotFoundError(f"No module named '{package}'")

    def open_files(self, count: int):
        limit = self.node.config.file_handle_limit
        if self.node.open_files + count > limit:
            raise OSError(24, "Too many open files")
        self.node.open_files += count
        self.files_opened += count

    def kill_worker(self):
        raise WorkerExit(self.worker_id)


def call_body(spec: TaskSpec, ctx: TaskContext, values: dict[str, Any]) -> Any:
    fn = TASK_FUNCTIONS.get(spec.fn)
    if fn is None:
        raise LookupError(f"unknown task function {spec.fn!r}")
    return fn(ctx, **resolve_refs(spec.args, values))


def exception_text(exc: BaseException) -> str:
    msg = str(exc)
    return f"{type(exc).__name__}: {msg}" if msg else type(exc).__name__


@dataclass
class AttemptOutcome:
    success: bool
    value: Any = None
    digest: Optional[str] = None
    error: Optional[str] = None
    failure: Optional[str] = None  # "exception" | "oom" | "worker_lost"
    requested_units: int = 0
    worker_id: Optional[str] = None


@dataclass
class RunningAttempt:
    """An attempt holding its worker slot and reservations until finished."""

    task_id: str
    node: NodeState
    worker_id: str
    generation: int
    reserved_units: int
    files: int
    outcome: AttemptOutcome
    done: bool = False

    @property
    def stale(self) -> bool:
        # the node was killed or its manager restarted since this began
        return self.node.generation != self.generation

    def finish(self) -> AttemptOutcome:
        if self.done:
            return self.outcome
        self.done = True
        if self.stale:
            raise NodeLost(self.node.node_id)
        self.node.memory_in_use_units -= self.reserved_units
        self.node.open_files -= self.files
        self.node.running.discard((self.task_id, self.worker_id))
        if self.outcome.failure == "worker_lost":
            self.node.crashed_workers.add(self.worker_id)
        return self.outcome


def begin_attempt(spec: TaskSpec, node: NodeState, worker_id: str, values: dict[str, Any],
                  attempt_index: int = 0) -> RunningAttempt:
    if not node.live:
        raise NodeLost(node.node_id)
    if worker_id not in node.free_workers():
        raise NoCapacity(f"worker {worker_id} is busy")
    node.running.add((spec.id, worker_id))
    need = spec.requirements.memory_units
    if node.memory_in_use_units + need > node.config.memory_capacity_units:
        text = (f"MemoryError: out of memory: cannot reserve {need} units on {node.node_id} "
                f"({node.free_memory} of {node.config.memory_capacity_units} free)")
        out = AttemptOutcome(False, error=text, failure="oom", requested_units=need, worker_id=worker_id)
        return RunningAttempt(spec.id, node, worker_id, node.generation, 0, 0, out)
    node.memory_in_use_units += need
    ctx = TaskContext(node, worker_id, attempt_index)
    try:
        value = call_body(spec, ctx, values)
        out = AttemptOutcome(True, value=value, digest=digest(value), requested_units=need,
                             worker_id=worker_id)
    except WorkerExit:
        out = AttemptOutcome(False, error=f"WorkerLost: worker {worker_id} exited abnormally",
                             failure="worker_lost", requested_units=need, worker_id=worker_id)
    except Exception as exc:
        out = AttemptOutcome(False, error=exception_text(exc), failure="exception",
                             requested_units=need, worker_id=worker_id)
    return RunningAttempt(spec.id, node, worker_id, node.generation, need, ctx.files_opened, out)


def execute_attempt(spec: TaskSpec, node: NodeState, worker_id: str,
                    values: Optional[dict[str, Any]] = None, attempt_index: int = 0) -> AttemptOutcome:
    """Run one attempt to completion.  Failures are returned, not raised."""
    return begin_attempt(spec, node, worker_id, values or {}, attempt_index).finish()
