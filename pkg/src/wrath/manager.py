"""The central manager: a discrete-event loop driving one workload over a virtual cluster.

Virtual time is integer milliseconds.  Task bodies run for real when an
attempt starts; the attempt then occupies its worker for the task's
simulated duration.  Resilience decisions are timed on the wall clock and
logged so the overhead ratio can be computed from the run log.
"""

from __future__ import annotations

import heapq
import logging
import random
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

from . import resilience as rs
from .bench.metrics import MetricsRecord, compute_metrics, make_record
from .monitoring import (FAILURE, RESOURCE, TRANSITION, Emitter, HeartbeatDetector, LocalTransport,
                         MonitoringStore, Radio, RadioServer, Recovered, SocketTransport, SuspectedFailure,
                         component_kind, component_node, parse_addr, sample_node, task_history)
from .taskgraph import (AttemptRecord, TaskEvent, TaskRecord, TaskState, Workload, new_records,
                        propagate_dep_failure, transition)
from .vcluster import (Cluster, ClusterConfig, NodeLost, Placement, RestartFailed, RunningAttempt,
                       begin_attempt, is_excluded, schedule)

log = logging.getLogger(__name__)

WRATH = "wrath"
BASELINE = "baseline"

E, S = TaskEvent, TaskState


@dataclass(frozen=True)
class Fault:
    """Scripted environment fault: ``kill``, ``revive`` or ``hang_manager`` a node at ``at_ms``."""

    at_ms: int
    action: str
    target: str

    def __post_init__(self):
        if self.action not in ("kill", "revive", "hang_manager"):
            raise ValueError(f"unknown fault action {self.action!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "Fault":
        return cls(int(d["at_ms"]), d["action"], d["target"])


@dataclass
class RunConfig:
    mode: str = WRATH
    baseline_retries: int = 3
    seed: int = 0
    policy: rs.PolicyConfig = field(default_factory=rs.PolicyConfig)
    faults: tuple[Fault, ...] = ()
    prior_history: Optional[dict] = None
    resource_interval_ms: int = 250
    detector_interval_ms: int = 250
    startup_ms: int = 10
    jitter: float = 0.1
    max_virtual_ms: int = 600_000
    stall_ms: int = 30_000
    store_path: Optional[str] = None
    radio_addr: Optional[str] = None  # serve the store over TCP at this address

    def __post_init__(self):
        if self.mode not in (WRATH, BASELINE):
            raise ValueError(f"mode must be {WRATH!r} or {BASELINE!r}")
        if self.baseline_retries < 0:
            raise ValueError("baseline_retries must be >= 0")


@dataclass
class RunResult:
    run_id: str
    records: dict[str, TaskRecord]
    values: dict[str, Any]
    store: MonitoringStore
    metrics: MetricsRecord
    incremental: MetricsRecord
    decisions: list[rs.Decision]
    denylist: rs.Denylist
    cluster: Cluster

    @property
    def success(self) -> bool:
        return self.metrics.application_success

    def events(self):
        return self.store.snapshot()


class Manager:
    def __init__(self, workload: Workload, cluster_config: ClusterConfig,
                 config: Optional[RunConfig] = None, run_id: Optional[str] = None):
        self.workload = workload
        self.config = config or RunConfig()
        cfg = self.config
        self.run_id = run_id or f"{workload.name}-{cfg.mode}-seed{cfg.seed}"
        self.now = 0
        self._heap: list = []
        self._seq = 0

        self.store = MonitoringStore(cfg.store_path)
        self._server = None
        if cfg.radio_addr:
            host, port = parse_addr(cfg.radio_addr)
            self._server = RadioServer(self.store, host, port).start()
            transport = SocketTransport(self._server.address)
        else:
            transport = LocalTransport(self.store)
        self.radio = Radio(transport)
        self.emitter = Emitter(self.run_id, self.radio, lambda: self.now, time.time)
        self.cluster = Cluster(cluster_config, self.emitter)
        self.engine = rs.ResilienceEngine(cfg.policy, cfg.prior_history)
        self.detector = HeartbeatDetector(cfg.policy.heartbeat_interval_ms, cfg.policy.miss_threshold)

        self.records = new_records(workload)
        if cfg.mode == BASELINE:
            for r in self.records.values():
                r.spec = replace(r.spec, max_retries=cfg.baseline_retries)
        self.values: dict[str, Any] = {}
        self.queue: dict[str, Optional[Placement]] = {}
        self.inflight: dict[str, RunningAttempt] = {}
        self.decisions: list[rs.Decision] = []
        self.start_time: Optional[int] = None
        self.end_time: Optional[int] = None
        self.first_failure: Optional[int] = None
        self.decision_ms = 0.0
        self.last_progress = 0
        self.done = False

    @property
    def wrath(self) -> bool:
        return self.config.mode == WRATH

    # -- event loop
    def _at(self, t: int, fn: Callable, *args):
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn, args))

    def run(self) -> RunResult:
        cfg = self.config
        try:
            self.cluster.provision_all()
            self.start_time = self.now
            self.emitter.log("manager", "run_start", workload=self.workload.name, mode=cfg.mode,
                             seed=cfg.seed, task_ids=list(self.workload.tasks))
            for f in sorted(cfg.faults, key=lambda f: f.at_ms):
                self._at(f.at_ms, self._fault, f)
            self._at(0, self._tick_heartbeat)
            self._at(0, self._tick_resources)
            self._at(cfg.detector_interval_ms, self._tick_detector)
            for tid in self.workload.topological_order():
                if not self.workload.tasks[tid].deps:
                    self._ready(tid)
            self._pump()
            self._check_done()
            while self._heap and not self.done:
                t, _, fn, args = heapq.heappop(self._heap)
                if t > cfg.max_virtual_ms:
                    self.now = cfg.max_virtual_ms
                    self._abort("virtual time limit reached")
                    break
                self.now = t
                fn(*args)
            if not self.done:
                self._abort("event queue drained")
            self.radio.flush()
            self.store.flush()
        finally:
            if self._server is not None:
                self.radio.transport.close()
                self._server.stop()
        return self._result()

    def _result(self) -> RunResult:
        states = {t: r.state.value for t, r in self.records.items()}
        incremental = make_record(start=self.start_time, end=self.end_time, first_failure=self.first_failure,
                                  decision_ms=self.decision_ms, final_states=states,
                                  attempts={t: len(r.attempts) for t, r in self.records.items()})
        return RunResult(self.run_id, self.records, self.values, self.store,
                         compute_metrics(self.store.snapshot()), incremental, self.decisions,
                         self.engine.denylist, self.cluster)

    # -- periodic agents
    def _tick_heartbeat(self):
        for st in self.cluster.nodes.values():
            if st.alive and st.provisioned:
                self.emitter.heartbeat(st.node_id)
                if st.manager_ok:
                    self.emitter.heartbeat(f"{st.node_id}.manager")
        self._at(self.now + self.config.policy.heartbeat_interval_ms, self._tick_heartbeat)

    def _tick_resources(self):
        for st in self.cluster.nodes.values():
            if st.alive and st.provisioned:
                self.emitter.emit(RESOURCE, st.node_id, sample_node(st))
        self._at(self.now + self.config.resource_interval_ms, self._tick_resources)

    def _tick_detector(self):
        for ev in self.detector.poll(self.store, self.now):
            if isinstance(ev, SuspectedFailure):
                self._suspected(ev)
            elif isinstance(ev, Recovered):
                self._recovered(ev)
        if not self.done and not self.inflight and self.queue \
                and self.now - self.last_progress > self.config.stall_ms:
            self._abort(f"no progress for {self.config.stall_ms} ms")
            return
        self._pump()
        self._at(self.now + self.config.detector_interval_ms, self._tick_detector)

    def _suspected(self, ev: SuspectedFailure):
        cid = ev.component_id
        self.emitter.log("detector", "suspected", component=cid, last_seen=ev.last_seen)
        if self.wrath:
            rs.update_denylist(self.engine.denylist, [ev])
            self.cluster.node(component_node(cid)).denylisted = True
        if component_kind(cid) not in ("node", "manager"):
            return
        lost = self._leases_on(component_node(cid))
        # mark every lost task failed before deciding on any of them
        reports = [self._fail_lost(tid, rs.HEARTBEAT_LOSS, cid) for tid in lost]
        for tid, report in zip(lost, reports):
            self._handle_failure(self.records[tid], report)
        self._check_done()

    def _recovered(self, ev: Recovered):
        cid = ev.component_id
        self.emitter.log("detector", "recovered", component=cid, seen_at=ev.seen_at)
        if self.wrath:
            rs.update_denylist(self.engine.denylist, [ev])
            node = component_node(cid)
            self.cluster.node(node).denylisted = is_excluded(node, self.engine.denylist)

    def _leases_on(self, node_id: str) -> list[str]:
        return sorted(t for t, a in self.inflight.items() if a.node.node_id == node_id)

    def _fault(self, f: Fault):
        self.emitter.log("injector", "fault", action=f.action, target=f.target)
        if f.action == "kill":
            self.cluster.kill_node(f.target)
        elif f.action == "hang_manager":
            self.cluster.hang_manager(f.target)
        else:
            self.cluster.revive_node(f.target)
            # a node back before detection still lost whatever it was running
            stale = [t for t in self._leases_on(f.target) if self.inflight[t].stale]
            reports = [self._fail_lost(t, rs.HEARTBEAT_LOSS, f.target) for t in stale]
            for t, report in zip(stale, reports):
                self._handle_failure(self.records[t], report)
            self._check_done()
            self._pump()

    # -- dispatch
    def _ready(self, tid: str):
        transition(self.records[tid], E.MARK_READY, self._on_transition)
        self.queue[tid] = None

    def _pump(self):
        if self.done or not self.queue:
            return
        view = None
        for tid, hint in list(self.queue.items()):
            if hint is None:
                continue
            if view is None:
                view = self.cluster.view(self.engine.denylist if self.wrath else None)
            v = view.get(hint.node_id)
            if v is not None and v.live and not v.denylisted:
                continue
            fresh = self._replan(tid)
            if fresh is not None:
                self.queue[tid] = fresh
        specs = [self.records[t].spec for t in self.queue]
        hints = {t: p for t, p in self.queue.items() if p is not None}
        for tid, _pool, node_id in schedule(self.cluster, specs, hints,
                                            self.engine.denylist if self.wrath else None):
            self._dispatch(tid, node_id, self.queue.pop(tid))

    def _replan(self, tid: str) -> Optional[Placement]:
        rec = self.records[tid]
        if not self.wrath:
            return self._baseline_target(rec)
        diag = self.engine.diagnoses.get(tid)
        if diag is None:
            return None
        view = self.cluster.view(self.engine.denylist)
        try:
            return rs.next_retry_target(rec, diag, view, self.engine.denylist,
                                        self._history(rec.spec.kind), self.engine.ladder)
        except rs.NoTarget:
            return None

    def _history(self, kind: str):
        return task_history(self.store, kind, self.config.prior_history)

    def _dispatch(self, tid: str, node_id: str, hint: Optional[Placement]):
        rec = self.records[tid]
        st = self.cluster.node(node_id)
        worker = st.free_workers()[0]
        idx = len(rec.attempts)
        rec.attempts.append(AttemptRecord(idx, st.pool_id, node_id, worker, self.now,
                                          ladder_step=hint.ladder_step if hint else None))
        transition(rec, E.DISPATCH if rec.state is S.READY else E.RETRY_GRANTED, self._on_transition)
        transition(rec, E.START, self._on_transition)
        attempt = begin_attempt(rec.spec, st, worker, self.values, idx)
        self.inflight[tid] = attempt
        self.last_progress = self.now
        if attempt.outcome.failure == "oom":
            delay = self.config.startup_ms
        else:
            rng = random.Random(f"{self.config.seed}:{tid}:{idx}")
            j = self.config.jitter
            delay = max(1, round(rec.spec.duration_ms * (1.0 + rng.uniform(-j, j))))
        self._at(self.now + delay, self._finish, tid, attempt)

    def _finish(self, tid: str, attempt: RunningAttempt):
        if self.done or self.inflight.get(tid) is not attempt:
            return
        if attempt.stale:
            return  # the node died under it; the detector reports the loss
        if not attempt.node.manager_ok:
            return  # result stuck behind a hung node manager
        del self.inflight[tid]
        out = attempt.finish()
        rec = self.records[tid]
        att = rec.last_attempt
        att.end = self.now
        self.last_progress = self.now
        if out.success:
            att.outcome = "success"
            att.digest = out.digest
            self.values[tid] = out.value
            transition(rec, E.SUCCEED, self._on_transition)
            for child in self.workload.children.get(tid, ()):
                crec = self.records[child]
                if crec.state is S.PENDING and all(
                        self.records[d].state is S.SUCCEEDED for d in crec.spec.deps):
                    self._ready(child)
        else:
            att.outcome = "failure"
            if out.failure == "worker_lost":
                manifestation, detail = rs.COMPONENT_CRASH, out.worker_id
            else:
                manifestation, detail = rs.EXCEPTION_TEXT, out.error
            ev = self.emitter.emit(FAILURE, att.node_id, {
                "task_id": tid, "attempt_index": att.attempt_index, "manifestation": manifestation,
                "text": out.error, "component": detail, "pool_id": att.pool_id, "node_id": att.node_id,
                "worker_id": att.worker_id,
            })
            att.failure_ref = ev.seq
            report = rs.FailureReport(manifestation, detail, att.node_id, self.now, tid, att.attempt_index,
                                      att.start, att.pool_id, att.node_id, out.requested_units)
            transition(rec, E.FAIL, self._on_transition)
            self._handle_failure(rec, report)
        self._check_done()
        self._pump()

    def _fail_lost(self, tid: str, manifestation: str, component: str) -> rs.FailureReport:
        """Fail an in-flight attempt that will never report back."""
        attempt = self.inflight.pop(tid)
        attempt.done = True
        rec = self.records[tid]
        att = rec.last_attempt
        att.end = self.now
        att.outcome = "failure"
        transition(rec, E.FAIL, self._on_transition)
        return rs.FailureReport(manifestation, component, "detector", self.now, tid, att.attempt_index,
                                att.start, att.pool_id, att.node_id, rec.spec.requirements.memory_units)

    # -- failure handling
    def _handle_failure(self, rec: TaskRecord, report: rs.FailureReport):
        if self.done:
            return
        if self.wrath:
            self._wrath_failure(rec, report)
        else:
            self._baseline_failure(rec, report)

    def _decide(self, rec: TaskRecord, report: rs.FailureReport, root_task: Optional[str] = None) -> rs.Decision:
        view = self.cluster.view(self.engine.denylist)
        dec = self.engine.handle(report, rec, self.store, view, root_task=root_task)
        self.decisions.append(dec)
        self.decision_ms += dec.elapsed_ms
        self.emitter.log("resilience", "decision", task_id=rec.id, attempt_index=report.attempt_index,
                         action=dec.action.to_dict(), diagnosis=dec.diagnosis.to_dict(),
                         wall_ms=dec.elapsed_ms)
        return dec

    def _wrath_failure(self, rec: TaskRecord, report: rs.FailureReport):
        action = self._decide(rec, report).action
        if isinstance(action, rs.Terminate):
            transition(rec, E.TERMINATE, self._on_transition)
            self._app_failure(rec.id, action.reason)
            self._dep_fail(rec.id, decide=True)
            self._cancel_all(f"terminated by {rec.id}")
        elif isinstance(action, rs.GiveUp):
            rec.final = True
            self._app_failure(rec.id, action.reason)
            self._dep_fail(rec.id, decide=True)
        else:
            if isinstance(action, rs.RestartComponent):
                self._restart(action.component_id, exclude=rec.id)
            self.queue[rec.id] = action.placement

    def _restart(self, component_id: str, exclude: str):
        try:
            orphans = self.cluster.restart_component(component_id)
        except RestartFailed as e:
            self.emitter.log("resilience", "restart_failed", component=component_id, error=str(e))
            return
        # leases that did not survive the restart are requeued through the engine
        lost = [t for t in orphans if t in self.inflight and t != exclude]
        reports = [self._fail_lost(t, rs.COMPONENT_CRASH, component_id) for t in lost]
        for t, report in zip(lost, reports):
            self._handle_failure(self.records[t], report)

    def _baseline_failure(self, rec: TaskRecord, report: rs.FailureReport):
        if report.manifestation == rs.COMPONENT_CRASH and component_kind(report.detail) == "worker":
            try:
                self.cluster.restart_component(report.detail)
            except RestartFailed:
                pass
        if rec.retries_used < rec.spec.max_retries:
            self.queue[rec.id] = self._baseline_target(rec)
            return
        rec.final = True
        self._app_failure(rec.id, f"retry budget exhausted ({rec.retries_used})")
        self._dep_fail(rec.id, decide=False)

    def _baseline_target(self, rec: TaskRecord) -> Optional[Placement]:
        last = rec.last_attempt
        pool = last.pool_id if last else None
        live = sorted(n for n, st in self.cluster.nodes.items() if st.pool_id == pool and st.live)
        if not live:
            return None
        rng = random.Random(f"{self.config.seed}:baseline:{rec.id}:{len(rec.attempts)}")
        return Placement(0, pool, rng.choice(live), checked=False)

    def _dep_fail(self, failed: str, decide: bool):
        root = self.records[failed].root_cause or failed
        for tid, _ in sorted(propagate_dep_failure(self.workload, failed, self.records)):
            rec = self.records[tid]
            if rec.state is not S.PENDING:
                continue
            rec.root_cause = root
            transition(rec, E.DEP_FAIL, self._on_transition)
            if decide:
                report = rs.FailureReport(rs.EXCEPTION_TEXT, f"DependencyError: dependency {root} failed",
                                          "manager", self.now, tid)
                self._decide(rec, report, root_task=root)

    def _cancel_all(self, reason: str):
        for tid, rec in self.records.items():
            if rec.is_terminal():
                continue
            attempt = self.inflight.pop(tid, None)
            if attempt is not None:
                try:
                    attempt.finish()
                except NodeLost:
                    pass
            self.queue.pop(tid, None)
            transition(rec, E.CANCEL, self._on_transition)
        self.emitter.log("manager", "cancelled", reason=reason)

    def _app_failure(self, tid: str, reason: str):
        if self.first_failure is None:
            self.first_failure = self.now
        self.emitter.log("manager", "app_failure", task_id=tid, reason=reason)

    def _abort(self, reason: str):
        if self.done:
            return
        self._app_failure("", reason)
        self._cancel_all(reason)
        self._check_done()

    def _check_done(self):
        if self.done or not all(r.is_terminal() for r in self.records.values()):
            return
        self.done = True
        self.end_time = self.now
        ok = all(r.state is S.SUCCEEDED for r in self.records.values())
        self.emitter.log("manager", "run_end", success=ok)

    # -- logging
    def _on_transition(self, rec: TaskRecord, prev: TaskState, event: TaskEvent):
        att = rec.last_attempt
        self.emitter.emit(TRANSITION, "manager", {
            "task_id": rec.id, "kind": rec.spec.kind, "from": prev.value, "to": rec.state.value,
            "event": event.value, "attempt_index": att.attempt_index if att else None,
            "pool_id": att.pool_id if att else None, "node_id": att.node_id if att else None,
            "worker_id": att.worker_id if att else None,
        })


def run_workload(workload: Workload, cluster_config: ClusterConfig, config: Optional[RunConfig] = None,
                 run_id: Optional[str] = None) -> RunResult:
    return Manager(workload, cluster_config, config, run_id).run()
