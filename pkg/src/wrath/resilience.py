"""Failure categorization and the resilience policy engine.

Pipeline per failure: :func:`classify` (taxonomy rules) ->
:func:`analyze_root_cause` (evidence from the monitoring store) ->
:func:`decide` (Terminate / RestartComponent / HierarchicalRetry / GiveUp).
"""

from __future__ import annotations

import enum
import json
import re
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Optional, Union

from .monitoring import (MonitoringStore, Recovered, SuspectedFailure, RESOURCE,
                         component_kind, component_node, task_history)
from .taskgraph import TaskRecord, TaskSpec
from .vcluster import NodeView, Placement


class Layer(str, enum.Enum):
    APPLICATION = "Application"
    FRAMEWORK = "Framework"
    RUNTIME = "Runtime"
    ENVIRONMENT = "Environment"


class Cause(str, enum.Enum):
    ZERO_DIVISION = "ZeroDivision"
    RUNTIME_EXCEPTION = "RuntimeException"
    WORKER_LOST = "WorkerLost"
    MANAGER_LOST = "ManagerLost"
    DEPENDENCY_FAILURE = "DependencyFailure"
    RESOURCE_STARVATION = "ResourceStarvation"
    PILOT_INIT_FAILURE = "PilotInitFailure"
    NODE_SHUTDOWN = "NodeShutdown"
    ENV_MISMATCH = "EnvMismatch"
    UNKNOWN = "Unknown"


class Detection(str, enum.Enum):
    FTL = "FTL"
    RP = "RP"
    FTL_RP = "FTL+RP"
    RC = "RC"


L, C, D = Layer, Cause, Detection

# Every (layer, cause, retriable, detection) the engine may produce.
TAXONOMY_ROWS = frozenset({
    (L.APPLICATION, C.ZERO_DIVISION, False, D.FTL),
    (L.APPLICATION, C.RUNTIME_EXCEPTION, False, D.FTL),
    (L.FRAMEWORK, C.WORKER_LOST, True, D.FTL),
    (L.FRAMEWORK, C.MANAGER_LOST, True, D.FTL),
    (L.FRAMEWORK, C.DEPENDENCY_FAILURE, False, D.RC),
    (L.RUNTIME, C.RESOURCE_STARVATION, True, D.RP),
    (L.RUNTIME, C.PILOT_INIT_FAILURE, True, D.RP),
    (L.RUNTIME, C.UNKNOWN, True, D.RP),
    (L.ENVIRONMENT, C.NODE_SHUTDOWN, True, D.FTL_RP),
    (L.ENVIRONMENT, C.ENV_MISMATCH, True, D.FTL),
    (L.ENVIRONMENT, C.ENV_MISMATCH, False, D.FTL),
})

MEMORY = "Memory"
FILE_HANDLES = "FileHandles"


@dataclass(frozen=True)
class FailureClass:
    layer: Layer
    cause: Cause
    retriable: bool
    detection: Detection
    resource: Optional[str] = None
    packages: frozenset[str] = frozenset()

    @property
    def row(self) -> tuple:
        return (self.layer, self.cause, self.retriable, self.detection)

    def to_dict(self) -> dict:
        d = {"layer": self.layer.value, "cause": self.cause.value,
             "retriable": self.retriable, "detection": self.detection.value}
        if self.resource:
            d["resource"] = self.resource
        if self.packages:
            d["packages"] = sorted(self.packages)
        return d


UNKNOWN_CLASS = FailureClass(L.RUNTIME, C.UNKNOWN, True, D.RP)
_NODE_SHUTDOWN = FailureClass(L.ENVIRONMENT, C.NODE_SHUTDOWN, True, D.FTL_RP)
_BY_COMPONENT = {
    "worker": FailureClass(L.FRAMEWORK, C.WORKER_LOST, True, D.FTL),
    "manager": FailureClass(L.FRAMEWORK, C.MANAGER_LOST, True, D.FTL),
    "pool": FailureClass(L.FRAMEWORK, C.MANAGER_LOST, True, D.FTL),
    "node": _NODE_SHUTDOWN,
}


# --- failure reports --------------------------------------------------------------

EXCEPTION_TEXT = "ExceptionText"
HEARTBEAT_LOSS = "HeartbeatLoss"
RESOURCE_ANOMALY = "ResourceAnomaly"
COMPONENT_CRASH = "ComponentCrash"


@dataclass(frozen=True)
class FailureReport:
    manifestation: str
    detail: str  # exception text verbatim, or the component id
    source: str
    timestamp: int
    task_id: Optional[str] = None
    attempt_index: int = 0
    attempt_start: Optional[int] = None
    pool_id: Optional[str] = None
    node_id: Optional[str] = None
    requested_units: int = 0

    def __post_init__(self):
        if self.manifestation not in (EXCEPTION_TEXT, HEARTBEAT_LOSS, RESOURCE_ANOMALY, COMPONENT_CRASH):
            raise ValueError(f"unknown manifestation {self.manifestation!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


# --- taxonomy library ---------------------------------------------------------------

@dataclass(frozen=True)
class TaxonomyRule:
    name: str
    pattern: re.Pattern
    cls: FailureClass

    @classmethod
    def from_dict(cls, d: dict) -> "TaxonomyRule":
        fc = FailureClass(Layer(d["layer"]), Cause(d["cause"]), bool(d["retriable"]),
                          Detection(d["detection"]), d.get("resource"))
        if fc.row not in TAXONOMY_ROWS:
            raise ValueError(f"rule {d.get('name')!r} maps outside the taxonomy: {fc.row}")
        return cls(d.get("name", d["pattern"]), re.compile(d["pattern"]), fc)


class Taxonomy:
    """Ordered exception-text rules; the first matching rule wins."""

    def __init__(self, rules: Iterable[TaxonomyRule]):
        self.rules = list(rules)

    @classmethod
    def from_records(cls, records: list[dict]) -> "Taxonomy":
        return cls(TaxonomyRule.from_dict(r) for r in records)

    @classmethod
    def load(cls, path: Optional[str] = None) -> "Taxonomy":
        if path is None:
            text = resources.files("wrath").joinpath("data/taxonomy.json").read_text()
        else:
            with open(path) as f:
                text = f.read()
        return cls.from_records(json.loads(text))

    def match(self, text: str) -> Optional[FailureClass]:
        for rule in self.rules:
            m = rule.pattern.search(text)
            if m is None:
                continue
            fc = rule.cls
            pkg = m.groupdict().get("package")
            if pkg:
                fc = replace(fc, packages=frozenset({pkg}))
            return fc
        return None


_DEFAULT_TAXONOMY: Optional[Taxonomy] = None


def default_taxonomy() -> Taxonomy:
    global _DEFAULT_TAXONOMY
    if _DEFAULT_TAXONOMY is None:
        _DEFAULT_TAXONOMY = Taxonomy.load()
    return _DEFAULT_TAXONOMY


def classify(report: FailureReport, taxonomy: Optional[Taxonomy] = None) -> FailureClass:
    if report.manifestation in (HEARTBEAT_LOSS, COMPONENT_CRASH):
        return _BY_COMPONENT[component_kind(report.detail)]
    if report.manifestation == EXCEPTION_TEXT:
        fc = (taxonomy or default_taxonomy()).match(report.detail)
        if fc is not None:
            return fc
    return UNKNOWN_CLASS


# --- root cause analysis --------------------------------------------------------------

@dataclass(frozen=True)
class ResourceNeed:
    kind: str
    amount: int


@dataclass(frozen=True)
class Diagnosis:
    cls: FailureClass
    evidence: tuple = ()
    resource_need: Optional[ResourceNeed] = None
    missing_packages: Optional[frozenset[str]] = None
    suspected_component: Optional[str] = None
    inherited_from: Optional[str] = None

    def __post_init__(self):
        starving = self.cls.cause is C.RESOURCE_STARVATION
        if starving != (self.resource_need is not None):
            raise ValueError("resource_need must be present iff cause is ResourceStarvation")
        if self.missing_packages is not None and self.cls.cause is not C.ENV_MISMATCH:
            raise ValueError("missing_packages only applies to EnvMismatch")

    @property
    def key(self) -> tuple:
        need = self.resource_need.kind if self.resource_need else None
        return (self.cls.cause, need, self.missing_packages or frozenset())

    def to_dict(self) -> dict:
        d: dict = {"class": self.cls.to_dict()}
        if self.resource_need:
            d["resource_need"] = {"kind": self.resource_need.kind, "amount": self.resource_need.amount}
        if self.missing_packages is not None:
            d["missing_packages"] = sorted(self.missing_packages)
        if self.suspected_component:
            d["suspected_component"] = self.suspected_component
        if self.inherited_from:
            d["inherited_from"] = self.inherited_from
        if self.evidence:
            d["evidence"] = [list(e) for e in self.evidence]
        return d


INSUFFICIENT_EVIDENCE = Diagnosis(UNKNOWN_CLASS)


def analyze_root_cause(
    report: FailureReport,
    cls: FailureClass,
    store: Optional[MonitoringStore] = None,
    *,
    task: Optional[TaskSpec] = None,
    node: Optional[NodeView] = None,
    root_diagnosis: Optional[Diagnosis] = None,
    root_task: Optional[str] = None,
    threshold_pct: float = 90.0,
    window_ms: int = 2000,
    silence_ms: Optional[int] = None,
) -> Diagnosis:
    """Enrich a failure class with evidence from the monitoring store.

    The sample window is ``[attempt_start - window_ms, report.timestamp]`` on
    the failing node.  Memory starvation requires peak in-use plus the
    requested reservation to reach ``threshold_pct`` of capacity.
    """
    cause = cls.cause

    if cause is C.DEPENDENCY_FAILURE:
        if root_diagnosis is None:
            return Diagnosis(cls, inherited_from=root_task)
        return replace(root_diagnosis, inherited_from=root_task or root_diagnosis.inherited_from)

    if cause in (C.WORKER_LOST, C.MANAGER_LOST, C.NODE_SHUTDOWN):
        comp = report.detail if report.manifestation in (HEARTBEAT_LOSS, COMPONENT_CRASH) else report.node_id
        evidence = ()
        if cause is C.MANAGER_LOST and store is not None and comp and silence_ms is not None:
            # a silent manager on a silent node is a machine shutdown
            host = component_node(comp)
            last = store.last_heartbeat.get(host)
            if last is not None and report.timestamp - last > silence_ms:
                cls = _NODE_SHUTDOWN
                evidence = ((host, "heartbeat", last),)
        return Diagnosis(cls, evidence=evidence, suspected_component=comp)

    if cause is C.ENV_MISMATCH:
        missing: frozenset[str] = frozenset()
        if task is not None and node is not None:
            missing = frozenset(task.requirements.packages - node.packages)
        if not missing:
            missing = cls.packages
        if not missing:
            # not a package problem: user intervention needed
            return Diagnosis(FailureClass(L.ENVIRONMENT, C.ENV_MISMATCH, False, D.FTL),
                             missing_packages=frozenset())
        return Diagnosis(replace(cls, packages=missing), missing_packages=missing)

    if cause is C.RESOURCE_STARVATION and cls.resource == FILE_HANDLES:
        amount = None
        if task is not None and task.requirements.max_open_files is not None:
            amount = task.requirements.max_open_files
        elif node is not None:
            amount = node.file_handle_limit + 1
        if amount is None:
            return INSUFFICIENT_EVIDENCE
        return Diagnosis(cls, resource_need=ResourceNeed(FILE_HANDLES, amount),
                         suspected_component=report.node_id)

    if cause in (C.RESOURCE_STARVATION, C.UNKNOWN):
        requested = report.requested_units or (task.requirements.memory_units if task else 0)
        peak, capacity, evidence = _memory_window(report, store, node, window_ms)
        if capacity and requested and peak + requested >= threshold_pct / 100.0 * capacity:
            mem_cls = FailureClass(L.RUNTIME, C.RESOURCE_STARVATION, True, D.RP, MEMORY)
            return Diagnosis(mem_cls, evidence=evidence, resource_need=ResourceNeed(MEMORY, requested),
                             suspected_component=report.node_id)
        if cause is C.RESOURCE_STARVATION:
            return INSUFFICIENT_EVIDENCE
        return Diagnosis(cls, evidence=evidence)

    return Diagnosis(cls)


def _memory_window(report: FailureReport, store: Optional[MonitoringStore],
                   node: Optional[NodeView], window_ms: int):
    peak, capacity, evidence = 0, node.memory_capacity_units if node else 0, []
    if store is None or report.node_id is None:
        return peak, capacity, ()
    start = (report.attempt_start if report.attempt_start is not None else report.timestamp) - window_ms
    for ev in store.query(source=report.node_id, kind=RESOURCE, since=start, until=report.timestamp):
        b = ev.body
        if b.get("memory_in_use_units", 0) >= peak:
            peak = b["memory_in_use_units"]
        capacity = b.get("memory_capacity_units", capacity)
        evidence.append((ev.source, ev.seq))
    return peak, capacity, tuple(evidence[-8:])


# --- denylist ------------------------------------------------------------------------

@dataclass
class DenyEntry:
    added_at: int
    reason: str


@dataclass
class Denylist:
    entries: dict[str, DenyEntry] = field(default_factory=dict)
    removals: list[tuple[str, int, str]] = field(default_factory=list)

    def __contains__(self, component_id: str) -> bool:
        return component_id in self.entries

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def add(self, component_id: str, at: int, reason: str) -> bool:
        if component_id in self.entries:
            return False
        self.entries[component_id] = DenyEntry(at, reason)
        return True

    def remove(self, component_id: str, at: int, reason: str = "recovered") -> bool:
        if self.entries.pop(component_id, None) is None:
            return False
        self.removals.append((component_id, at, reason))
        return True


def update_denylist(denylist: Denylist, events: Iterable[Union[SuspectedFailure, Recovered]]) -> Denylist:
    for ev in events:
        if isinstance(ev, SuspectedFailure):
            denylist.add(ev.component_id, ev.detected_at, f"heartbeat lost (last seen {ev.last_seen})")
        elif isinstance(ev, Recovered):
            denylist.remove(ev.component_id, ev.detected_at)
    return denylist


# --- actions --------------------------------------------------------------------------

@dataclass(frozen=True)
class Terminate:
    reason: str
    name = "Terminate"

    def to_dict(self) -> dict:
        return {"action": self.name, "reason": self.reason}


@dataclass(frozen=True)
class HierarchicalRetry:
    placement: Placement
    name = "HierarchicalRetry"

    @property
    def ladder_step(self) -> int:
        return self.placement.ladder_step

    def to_dict(self) -> dict:
        p = self.placement
        return {"action": self.name, "ladder_step": p.ladder_step, "pool_id": p.pool_id, "node_id": p.node_id}


@dataclass(frozen=True)
class RestartComponent:
    component_id: str
    then: HierarchicalRetry
    name = "RestartComponent"

    @property
    def placement(self) -> Placement:
        return self.then.placement

    def to_dict(self) -> dict:
        return {"action": self.name, "component": self.component_id, "then": self.then.to_dict()}


@dataclass(frozen=True)
class GiveUp:
    reason: str
    name = "GiveUp"

    def to_dict(self) -> dict:
        return {"action": self.name, "reason": self.reason}


Action = Union[Terminate, HierarchicalRetry, RestartComponent, GiveUp]


# --- hierarchical retry ladder -----------------------------------------------------------

class NoTarget(RuntimeError):
    pass


# failures tied to one node, where another node of the same pool is a sensible retry
NODE_LOCAL = frozenset({C.WORKER_LOST, C.MANAGER_LOST, C.NODE_SHUTDOWN, C.PILOT_INIT_FAILURE,
                        C.ENV_MISMATCH})


def _excluded(node_id: str, denylist) -> bool:
    if not denylist:
        return False
    return node_id in denylist or f"{node_id}.manager" in denylist


def feasible(spec: TaskSpec, diag: Diagnosis, node: NodeView, denylist=None) -> bool:
    """Hard constraints for any resilience-chosen placement."""
    if not node.live or node.denylisted or _excluded(node.node_id, denylist):
        return False
    req = spec.requirements
    mem = req.memory_units
    files = req.max_open_files or 0
    if diag.resource_need is not None:
        if diag.resource_need.kind == MEMORY:
            mem = max(mem, diag.resource_need.amount)
        else:
            files = max(files, diag.resource_need.amount)
    if node.memory_capacity_units < mem or node.file_handle_limit < files:
        return False
    need_pkgs = req.packages | (diag.missing_packages or frozenset())
    return need_pkgs <= node.packages


def _fits_now(spec: TaskSpec, diag: Diagnosis, node: NodeView) -> bool:
    need = spec.requirements.memory_units
    if diag.resource_need is not None and diag.resource_need.kind == MEMORY:
        need = max(need, diag.resource_need.amount)
    return node.free_slots > 0 and node.free_memory >= need


@dataclass
class LadderState:
    """Per-run ladder memory: round-robin cursor and each task's last step."""

    rr: int = 0
    last: dict[str, tuple[tuple, int]] = field(default_factory=dict)


def next_retry_target(
    record: TaskRecord,
    diag: Diagnosis,
    view: dict[str, NodeView],
    denylist=None,
    history: Optional[dict] = None,
    state: Optional[LadderState] = None,
) -> Placement:
    """Walk the four-step ladder and return the first feasible placement.

    1. a node meeting the diagnosed resource/package need (current pool first);
    2. another node of the failing pool, for node-local failures;
    3. the node where this task kind has succeeded most often;
    4. a node of another pool, pools taken round-robin.
    The node that just failed is never returned.  For a repeated diagnosis
    the walk resumes at the previous step, so steps never go backwards.
    """
    state = state if state is not None else LadderState()
    last = record.last_attempt
    fail_node = last.node_id if last else None
    fail_pool = last.pool_id if last else None
    spec = record.spec
    cands = {n: v for n, v in view.items() if n != fail_node and feasible(spec, diag, v, denylist)}

    prev = state.last.get(spec.id)
    start = prev[1] if prev and prev[0] == diag.key else 1

    def step1():
        if diag.resource_need is None and not diag.missing_packages:
            return None
        if not cands:
            return None
        return min(cands.values(), key=lambda v: (v.pool_id != fail_pool, not _fits_now(spec, diag, v),
                                                   -v.free_slots, v.node_id))

    def step2():
        if diag.cls.cause not in NODE_LOCAL:
            return None
        local = [v for v in cands.values() if v.pool_id == fail_pool]
        return min(local, key=lambda v: (-v.free_slots, v.node_id)) if local else None

    def step3():
        hist = history or {}
        scored = []
        for (pool, node_id), c in hist.items():
            v = cands.get(node_id)
            if v is None or v.pool_id != pool or c["successes"] <= 0:
                continue
            scored.append((-c["successes"], c["failures"], node_id, v))
        return min(scored, key=lambda s: s[:3])[3] if scored else None

    def step4():
        pools = sorted({v.pool_id for v in cands.values() if v.pool_id != fail_pool})
        if not pools:
            return None
        pool = pools[state.rr % len(pools)]
        state.rr += 1
        return min((v for v in cands.values() if v.pool_id == pool), key=lambda v: (-v.free_slots, v.node_id))

    for step, fn in ((1, step1), (2, step2), (3, step3), (4, step4)):
        if step < start:
            continue
        v = fn()
        if v is not None:
            state.last[spec.id] = (diag.key, step)
            return Placement(step, v.pool_id, v.node_id)
    raise NoTarget(f"no feasible retry target for {spec.id}")


def decide(
    record: TaskRecord,
    diag: Diagnosis,
    view: dict[str, NodeView],
    denylist=None,
    history: Optional[dict] = None,
    state: Optional[LadderState] = None,
) -> Action:
    cause = diag.cls.cause
    if diag.inherited_from is not None:
        # dependency failure: act on the root cause, never re-run the child
        if not diag.cls.retriable:
            return Terminate(f"dependency {diag.inherited_from} failed: {cause.value}")
        return GiveUp(f"dependency {diag.inherited_from} exhausted its retries ({cause.value})")
    if not diag.cls.retriable:
        return Terminate(f"non-recoverable {diag.cls.layer.value} failure: {cause.value}")
    if record.retries_used >= record.spec.max_retries:
        return GiveUp(f"retry budget exhausted ({record.retries_used}/{record.spec.max_retries})")
    try:
        placement = next_retry_target(record, diag, view, denylist, history, state)
    except NoTarget as e:
        return GiveUp(str(e))
    retry = HierarchicalRetry(placement)
    if cause in (C.WORKER_LOST, C.MANAGER_LOST) and diag.suspected_component:
        return RestartComponent(diag.suspected_component, retry)
    return retry


# --- engine ---------------------------------------------------------------------------

@dataclass
class PolicyConfig:
    heartbeat_interval_ms: int = 500
    miss_threshold: int = 3
    default_max_retries: int = 3
    starvation_threshold_pct: float = 90.0
    taxonomy_file: Optional[str] = None
    history_file: Optional[str] = None

    def __post_init__(self):
        if self.heartbeat_interval_ms <= 0:
            raise ValueError("heartbeat_interval_ms must be > 0")
        if self.miss_threshold < 1:
            raise ValueError("miss_threshold must be >= 1")
        if self.default_max_retries < 0:
            raise ValueError("default_max_retries must be >= 0")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "PolicyConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown policy fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Decision:
    report: FailureReport
    cls: FailureClass
    diagnosis: Diagnosis
    action: Action
    elapsed_ms: float


class ResilienceEngine:
    """Runs classify -> analyze -> decide and times the whole span."""

    def __init__(self, policy: Optional[PolicyConfig] = None, prior_history: Optional[dict] = None):
        self.policy = policy or PolicyConfig()
        self.taxonomy = Taxonomy.load(self.policy.taxonomy_file)
        self.denylist = Denylist()
        self.ladder = LadderState()
        self.prior_history = prior_history
        self.diagnoses: dict[str, Diagnosis] = {}

    def handle(self, report: FailureReport, record: TaskRecord, store: MonitoringStore,
               view: dict[str, NodeView], history: Optional[dict] = None,
               root_task: Optional[str] = None) -> Decision:
        t0 = time.perf_counter()
        cls = classify(report, self.taxonomy)
        diag = analyze_root_cause(
            report, cls, store, task=record.spec,
            node=view.get(report.node_id) if report.node_id else None,
            root_diagnosis=self.diagnoses.get(root_task) if root_task else None,
            root_task=root_task,
            threshold_pct=self.policy.starvation_threshold_pct,
            silence_ms=self.policy.heartbeat_interval_ms * self.policy.miss_threshold,
        )
        if history is None:
            history = task_history(store, record.spec.kind, self.prior_history)
        action = decide(record, diag, view, self.denylist, history, self.ladder)
        elapsed = (time.perf_counter() - t0) * 1000.0
        self.diagnoses[record.id] = diag
        return Decision(report, cls, diag, action, elapsed)
