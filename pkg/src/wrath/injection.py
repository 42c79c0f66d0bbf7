"""Failure injection: swap a seeded fraction of a workload's tasks for failing variants."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from typing import Optional

from .taskgraph import TaskSpec, Workload, build_workload
from .vcluster import TASK_FUNCTIONS, ClusterConfig, task_function

FAILURE_TYPES = ("ZeroDivision", "Failure", "WorkerKilled", "Dependency", "Ulimit", "Memory", "Import")

DEFAULT_PARAMS = {
    "Memory": {"memory_units": 8},
    "Import": {"package": "pkgX"},
    "Ulimit": {"files_to_open": 1025},
    "WorkerKilled": {"kill_attempts": 1},
    "Dependency": {"parent_failure": "Failure"},
}


class EmptyWorkload(ValueError):
    pass


@dataclass(frozen=True)
class InjectionPlan:
    failure_type: str
    rate: float
    seed: int
    replaced: frozenset[str]
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"type": self.failure_type, "rate": self.rate, "seed": self.seed,
                "replaced": sorted(self.replaced), "params": self.params}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def plan_injection(workload: Workload, failure_type: str, rate: float, seed: int,
                   params: Optional[dict] = None) -> InjectionPlan:
    if failure_type not in FAILURE_TYPES:
        raise ValueError(f"unknown failure type {failure_type!r}; expected one of {FAILURE_TYPES}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    if len(workload) == 0:
        raise EmptyWorkload(workload.name)
    merged = {**DEFAULT_PARAMS.get(failure_type, {}), **(params or {})}
    k = _round_half_up(rate * len(workload))
    ids = sorted(workload.tasks)
    if failure_type == "Dependency":
        # parents with the most descendants fail, so the failure reaches children
        parents = [t for t in ids if workload.children.get(t)]
        parents.sort(key=lambda t: (-len(workload.descendants(t)), t))
        chosen = parents[:k]
    else:
        chosen = random.Random(seed).sample(ids, k)
    return InjectionPlan(failure_type, rate, seed, frozenset(chosen), merged)


def apply(plan: InjectionPlan, task: TaskSpec) -> TaskSpec:
    if task.id not in plan.replaced:
        return task
    ftype, p = plan.failure_type, plan.params
    if ftype == "Dependency":
        ftype = p.get("parent_failure", "Failure")
        p = {**DEFAULT_PARAMS.get(ftype, {}), **p}
    req = task.requirements
    if ftype == "Memory":
        return replace(task, requirements=replace(req, memory_units=int(p["memory_units"])))
    wrapped = {"inner_fn": task.fn, "inner_args": task.args}
    if ftype == "Import":
        req = replace(req, packages=req.packages | {p["package"]})
        wrapped["package"] = p["package"]
    elif ftype == "Ulimit":
        req = replace(req, max_open_files=int(p["files_to_open"]))
        wrapped["files_to_open"] = int(p["files_to_open"])
    elif ftype == "WorkerKilled":
        wrapped["kill_attempts"] = int(p.get("kill_attempts", 1))
    return replace(task, fn=f"inject.{ftype}", args=wrapped, requirements=req)


def apply_all(plan: InjectionPlan, workload: Workload) -> Workload:
    return build_workload([apply(plan, t) for t in workload.tasks.values()], name=workload.name)


def params_for_cluster(failure_type: str, cluster: ClusterConfig) -> dict:
    """Scale Memory/Ulimit injections to the smallest node of the submit pools."""
    pools = [p for p in cluster.pools if not cluster.submit_pools or p.pool_id in cluster.submit_pools]
    nodes = [n for p in pools for n in p.nodes]
    if failure_type == "Memory":
        return {"memory_units": 2 * min(n.memory_capacity_units for n in nodes)}
    if failure_type == "Ulimit":
        return {"files_to_open": min(n.file_handle_limit for n in nodes) + 1}
    return {}


def _inner(ctx, inner_fn, inner_args):
    return TASK_FUNCTIONS[inner_fn](ctx, **inner_args)


@task_function("inject.ZeroDivision")
def _zero_division(ctx, inner_fn, inner_args):
    return 1 / 0


@task_function("inject.Failure")
def _runtime_failure(ctx, inner_fn, inner_args):
    raise RuntimeError("injected task failure")


@task_function("inject.WorkerKilled")
def _kill_worker(ctx, inner_fn, inner_args, kill_attempts=1):
    if ctx.attempt_index < kill_attempts:
        ctx.kill_worker()
    return _inner(ctx, inner_fn, inner_args)


@task_function("inject.Ulimit")
def _open_files(ctx, inner_fn, inner_args, files_to_open):
    ctx.open_files(files_to_open)
    return _inner(ctx, inner_fn, inner_args)


@task_function("inject.Import")
def _bad_import(ctx, inner_fn, inner_args, package):
    ctx.require(package)
    return _inner(ctx, inner_fn, inner_args)
