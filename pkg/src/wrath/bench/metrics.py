"""Run metrics derived from a finished event log."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional

from ..monitoring import LOG, TRANSITION, MonitoringEvent


class IncompleteLog(ValueError):
    pass


@dataclass
class MetricsRecord:
    makespan_ms: int
    time_to_failure_ms: Optional[int]
    overhead_ratio: float
    task_success_rate: float
    retry_success_rate: float
    application_success: bool
    tasks: int = 0
    succeeded: int = 0
    retried: int = 0
    retry_succeeded: int = 0
    dep_failed: int = 0
    decision_ms: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def counts(self) -> dict:
        return {k: getattr(self, k) for k in ("tasks", "succeeded", "retried", "retry_succeeded", "dep_failed")}


METRIC_FIELDS = [f.name for f in fields(MetricsRecord)]


def make_record(*, start: int, end: int, first_failure: Optional[int], decision_ms: float,
                final_states: dict[str, str], attempts: dict[str, int]) -> MetricsRecord:
    tasks = len(final_states)
    succeeded = sum(1 for s in final_states.values() if s == "Succeeded")
    retried = [t for t, n in attempts.items() if n > 1]
    retry_ok = sum(1 for t in retried if final_states.get(t) == "Succeeded")
    makespan = end - start
    ok = tasks > 0 and succeeded == tasks
    return MetricsRecord(
        makespan_ms=makespan,
        time_to_failure_ms=None if ok or first_failure is None else first_failure - start,
        overhead_ratio=decision_ms / makespan if makespan > 0 else 0.0,
        task_success_rate=succeeded / tasks if tasks else 0.0,
        # no retried task: nothing was rescued
        retry_success_rate=retry_ok / len(retried) if retried else 0.0,
        application_success=ok,
        tasks=tasks,
        succeeded=succeeded,
        retried=len(retried),
        retry_succeeded=retry_ok,
        dep_failed=sum(1 for s in final_states.values() if s == "DepFailed"),
        decision_ms=decision_ms,
    )


def compute_metrics(run_log: Iterable[MonitoringEvent]) -> MetricsRecord:
    """Replay the run log.  Requires run_start and run_end sentinels."""
    start = end = None
    task_ids: list[str] = []
    final: dict[str, str] = {}
    attempts: dict[str, int] = {}
    first_failure = None
    decision_ms = 0.0
    for ev in run_log:
        b = ev.body
        if ev.kind == LOG:
            e = b.get("event")
            if e == "run_start":
                start = ev.ts
                task_ids = list(b.get("task_ids", []))
            elif e == "run_end":
                end = ev.ts
            elif e == "decision":
                decision_ms += float(b.get("wall_ms", 0.0))
            elif e == "app_failure" and first_failure is None:
                first_failure = ev.ts
        elif ev.kind == TRANSITION:
            t = b["task_id"]
            final[t] = b["to"]
            if b["to"] == "Dispatched":
                attempts[t] = attempts.get(t, 0) + 1
    if start is None or end is None:
        raise IncompleteLog("run log lacks run_start/run_end sentinels")
    states = {t: final.get(t, "Pending") for t in task_ids} if task_ids else final
    return make_record(start=start, end=end, first_failure=first_failure, decision_ms=decision_ms,
                       final_states=states, attempts=attempts)


def mean_sem(values: list[float]) -> tuple[float, float]:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return float("nan"), float("nan")
    m = sum(vals) / len(vals)
    if len(vals) < 2:
        return m, 0.0
    var = sum((v - m) ** 2 for v in vals) / (len(vals) - 1)
    return m, math.sqrt(var / len(vals))


SUMMARY_COLUMNS = ["run", "seed"] + METRIC_FIELDS


def write_summary(path: str, rows: list[tuple[int, int, MetricsRecord]]):
    """Per-run rows followed by ``mean`` and ``sem`` rows."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for run, seed, m in rows:
            d = m.to_dict()
            w.writerow([run, seed] + [_fmt(d[k]) for k in METRIC_FIELDS])
        stats = {k: mean_sem([_num(m.to_dict()[k]) for _, _, m in rows]) for k in METRIC_FIELDS}
        w.writerow(["mean", ""] + [_fmt(stats[k][0]) for k in METRIC_FIELDS])
        w.writerow(["sem", ""] + [_fmt(stats[k][1]) for k in METRIC_FIELDS])


def read_summary(path: str) -> dict[str, dict[str, str]]:
    with open(path, newline="") as f:
        return {row["run"]: row for row in csv.DictReader(f)}


def _num(v):
    if v is None:
        return None
    if isinstance(v, bool):
        return 1.0 if v else 0.0
    return float(v)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(round(v, 9))
    return str(v)


def dump_metrics(path: str, m: MetricsRecord):
    with open(path, "w") as f:
        json.dump(m.to_dict(), f, indent=1, sort_keys=True)
