"""Workloads as DAGs of atomic tasks, plus the per-task state machine."""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional


class CycleError(ValueError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__(f"dependency cycle: {' -> '.join(cycle + cycle[:1])}")


class UnknownDependency(ValueError):
    def __init__(self, task_id: str, missing: str):
        self.task_id = task_id
        self.missing = missing
        super().__init__(f"task {task_id!r} depends on unknown task {missing!r}")


class DuplicateTask(ValueError):
    pass


class UnknownTask(KeyError):
    pass


class IllegalTransition(RuntimeError):
    def __init__(self, state: "TaskState", event: "TaskEvent"):
        self.state = state
        self.event = event
        super().__init__(f"illegal transition: {event.value} in state {state.value}")


@dataclass(frozen=True)
class RequirementManifest:
    memory_units: int = 1
    packages: frozenset[str] = frozenset()
    max_open_files: Optional[int] = None

    def __post_init__(self):
        if self.memory_units < 0:
            raise ValueError("memory_units must be >= 0")
        if any(not isinstance(p, str) or not p for p in self.packages):
            raise ValueError("package names must be non-empty strings")
        if self.max_open_files is not None and self.max_open_files < 0:
            raise ValueError("max_open_files must be >= 0")
        object.__setattr__(self, "packages", frozenset(self.packages))

    def to_dict(self) -> dict:
        return {
            "memory_units": self.memory_units,
            "packages": sorted(self.packages),
            "max_open_files": self.max_open_files,
        }

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RequirementManifest":
        d = d or {}
        return cls(
            memory_units=int(d.get("memory_units", 1)),
            packages=frozenset(d.get("packages", ())),
            max_open_files=d.get("max_open_files"),
        )


@dataclass(frozen=True)
class TaskSpec:
    """A unit of work.

    ``fn`` names a registered task function; ``args`` is JSON-serializable and
    may contain ``{"$ref": task_id}`` placeholders that the runtime replaces
    with the referenced dependency's result.  ``duration_ms`` is the simulated
    execution cost on the virtual cluster.
    """

    id: str
    kind: str
    fn: str
    args: dict = field(default_factory=dict)
    deps: tuple[str, ...] = ()
    requirements: RequirementManifest = field(default_factory=RequirementManifest)
    max_retries: int = 3
    duration_ms: int = 100

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError(f"task {self.id!r}: max_retries must be >= 0")
        if self.duration_ms < 0:
            raise ValueError(f"task {self.id!r}: duration_ms must be >= 0")
        object.__setattr__(self, "deps", tuple(self.deps))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "fn": self.fn,
            "args": self.args,
            "deps": list(self.deps),
            "requirements": self.requirements.to_dict(),
            "max_retries": self.max_retries,
            "duration_ms": self.duration_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            id=d["id"],
            kind=d.get("kind", d["fn"]),
            fn=d["fn"],
            args=d.get("args", {}),
            deps=tuple(d.get("deps", ())),
            requirements=RequirementManifest.from_dict(d.get("requirements")),
            max_retries=int(d.get("max_retries", 3)),
            duration_ms=int(d.get("duration_ms", 100)),
        )


@dataclass
class Workload:
    name: str
    tasks: dict[str, TaskSpec]
    children: dict[str, tuple[str, ...]] = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks.values())

    def topological_order(self) -> list[str]:
        return _toposort(self.tasks)

    def descendants(self, task_id: str) -> set[str]:
        if task_id not in self.tasks:
            raise UnknownTask(task_id)
        seen: set[str] = set()
        queue = deque(self.children.get(task_id, ()))
        while queue:
            t = queue.popleft()
            if t in seen:
                continue
            seen.add(t)
            queue.extend(self.children.get(t, ()))
        return seen

    def to_dict(self) -> dict:
        return {"name": self.name, "tasks": [self.tasks[t].to_dict() for t in self.tasks]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Workload":
        return build_workload([TaskSpec.from_dict(t) for t in d["tasks"]], name=d.get("name", "workload"))

    @classmethod
    def load(cls, path) -> "Workload":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _find_cycle(tasks: dict[str, TaskSpec]) -> list[str]:
    WHITE, GREY, BLACK = 0, 1, 2
    color = {t: WHITE for t in tasks}
    for root in sorted(tasks):
        if color[root] != WHITE:
            continue
        stack: list[tuple[str, Iterable[str]]] = [(root, iter(tasks[root].deps))]
        path = [root]
        color[root] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = BLACK
                stack.pop()
                path.pop()
            elif color[nxt] == GREY:
                cyc = path[path.index(nxt):]
                # deps point child -> parent; report in execution order
                return list(reversed(cyc))
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                stack.append((nxt, iter(tasks[nxt].deps)))
    return []


def _toposort(tasks: dict[str, TaskSpec]) -> list[str]:
    indeg = {t: len(set(s.deps)) for t, s in tasks.items()}
    children: dict[str, list[str]] = {t: [] for t in tasks}
    for t, s in tasks.items():
        for d in set(s.deps):
            children[d].append(t)
    ready = sorted(t for t, n in indeg.items() if n == 0)
    order = []
    queue = deque(ready)
    while queue:
        t = queue.popleft()
        order.append(t)
        for c in sorted(children[t]):
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    if len(order) != len(tasks):
        raise CycleError(_find_cycle(tasks))
    return order


def build_workload(specs: Iterable[TaskSpec], name: str = "workload") -> Workload:
    tasks: dict[str, TaskSpec] = {}
    for s in specs:
        if s.id in tasks:
            raise DuplicateTask(f"duplicate task id {s.id!r}")
        tasks[s.id] = s
    for s in tasks.values():
        for d in s.deps:
            if d not in tasks:
                raise UnknownDependency(s.id, d)
    _toposort(tasks)
    children: dict[str, list[str]] = {t: [] for t in tasks}
    for s in tasks.values():
        for d in dict.fromkeys(s.deps):
            children[d].append(s.id)
    return Workload(name=name, tasks=tasks, children={k: tuple(v) for k, v in children.items()})


class TaskState(enum.Enum):
    PENDING = "Pending"
    READY = "Ready"
    DISPATCHED = "Dispatched"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    DEP_FAILED = "DepFailed"
    TERMINATED = "Terminated"


class TaskEvent(enum.Enum):
    MARK_READY = "MarkReady"
    DISPATCH = "Dispatch"
    START = "Start"
    SUCCEED = "Succeed"
    FAIL = "Fail"
    RETRY_GRANTED = "RetryGranted"
    TERMINATE = "Terminate"
    DEP_FAIL = "DepFail"
    CANCEL = "Cancel"


S, E = TaskState, TaskEvent

TRANSITIONS: dict[tuple[TaskState, TaskEvent], TaskState] = {
    (S.PENDING, E.MARK_READY): S.READY,
    (S.READY, E.DISPATCH): S.DISPATCHED,
    (S.DISPATCHED, E.START): S.RUNNING,
    (S.RUNNING, E.SUCCEED): S.SUCCEEDED,
    (S.RUNNING, E.FAIL): S.FAILED,
    # a dispatch lost with its node never starts but still fails
    (S.DISPATCHED, E.FAIL): S.FAILED,
    (S.FAILED, E.RETRY_GRANTED): S.DISPATCHED,
    (S.FAILED, E.TERMINATE): S.TERMINATED,
    (S.PENDING, E.DEP_FAIL): S.DEP_FAILED,
    # fail-fast cancellation of the rest of the application
    (S.PENDING, E.CANCEL): S.TERMINATED,
    (S.READY, E.CANCEL): S.TERMINATED,
    (S.DISPATCHED, E.CANCEL): S.TERMINATED,
    (S.RUNNING, E.CANCEL): S.TERMINATED,
    (S.FAILED, E.CANCEL): S.TERMINATED,
}

TERMINAL_STATES = frozenset({S.SUCCEEDED, S.DEP_FAILED, S.TERMINATED})


@dataclass
class AttemptRecord:
    attempt_index: int
    pool_id: str
    node_id: str
    worker_id: str
    start: int
    end: Optional[int] = None
    outcome: Optional[str] = None  # "success" | "failure"
    digest: Optional[str] = None
    failure_ref: Optional[int] = None
    ladder_step: Optional[int] = None


@dataclass
class TaskRecord:
    spec: TaskSpec
    state: TaskState = TaskState.PENDING
    attempts: list[AttemptRecord] = field(default_factory=list)
    retries_used: int = 0
    root_cause: Optional[str] = None
    final: bool = False  # Failed with no further retry

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def last_attempt(self) -> Optional[AttemptRecord]:
        return self.attempts[-1] if self.attempts else None

    def is_terminal(self) -> bool:
        return self.state in TERMINAL_STATES or (self.state is TaskState.FAILED and self.final)


def transition(
    record: TaskRecord,
    event: TaskEvent,
    emit: Optional[Callable[[TaskRecord, TaskState, TaskEvent], None]] = None,
) -> TaskRecord:
    """Apply ``event`` to ``record`` in place and return it.

    ``emit`` receives ``(record, previous_state, event)`` after the change so
    the caller can append a StateTransition event to the run log.
    """
    nxt = TRANSITIONS.get((record.state, event))
    if nxt is None:
        raise IllegalTransition(record.state, event)
    if event is TaskEvent.RETRY_GRANTED:
        if record.retries_used >= record.spec.max_retries:
            raise IllegalTransition(record.state, event)
        record.retries_used += 1
    prev = record.state
    record.state = nxt
    if emit is not None:
        emit(record, prev, event)
    return record


def new_records(workload: Workload) -> dict[str, TaskRecord]:
    return {t: TaskRecord(spec=s) for t, s in workload.tasks.items()}


def ready_tasks(workload: Workload, records: dict[str, TaskRecord]) -> set[str]:
    out = set()
    for tid, spec in workload.tasks.items():
        if records[tid].state is not TaskState.PENDING:
            continue
        if all(records[d].state is TaskState.SUCCEEDED for d in spec.deps):
            out.add(tid)
    return out


def propagate_dep_failure(
    workload: Workload,
    failed_id: str,
    records: Optional[dict[str, TaskRecord]] = None,
) -> set[tuple[str, str]]:
    """Descendants of ``failed_id`` that are not yet terminal, tagged with the root cause."""
    if failed_id not in workload.tasks:
        raise UnknownTask(failed_id)
    root = failed_id
    if records is not None and records[failed_id].root_cause:
        root = records[failed_id].root_cause
    out = set()
    for d in workload.descendants(failed_id):
        if records is not None and records[d].is_terminal():
            continue
        out.add((d, root))
    return out

