"""Experiment runner: ``wrath run``, ``wrath compare``, ``wrath generate``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import injection
from .bench.generators import GENERATORS
from .bench.metrics import METRIC_FIELDS, MetricsRecord, dump_metrics, mean_sem, write_summary
from .manager import BASELINE, WRATH, Fault, RunConfig, RunResult, run_workload
from .monitoring import RADIO_ADDR_ENV, load_history
from .resilience import PolicyConfig
from .taskgraph import Workload
from .vcluster import ClusterConfig, NodeConfig, PoolConfig

log = logging.getLogger("wrath")

LOG_LEVEL_ENV = "WRATH_LOG_LEVEL"


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        self.path = path
        super().__init__(f"{path}: {msg}")


class MismatchedExperiments(ValueError):
    pass


# --- experiment configuration ---------------------------------------------------------

@dataclass
class ExperimentConfig:
    cluster: ClusterConfig
    workload: dict  # {"generator": name, "params": {...}} or {"file": path}
    injection: Optional[dict] = None  # {"type", "rate", "seed", "params"}
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    repeats: int = 1
    seed: int = 0
    mode: str = WRATH
    baseline_retries: int = 3
    faults: tuple[Fault, ...] = ()

    def describe(self) -> dict:
        return {
            "workload": self.workload,
            "injection": self.injection,
            "mode": self.mode,
            "baseline_retries": self.baseline_retries if self.mode == BASELINE else None,
            "repeats": self.repeats,
            "seed": self.seed,
            "cluster": self.cluster.to_dict(),
            "faults": [f.__dict__ for f in self.faults],
        }


_MODE_RE = re.compile(r"^baseline(?:\((\d+)\))?$")


def parse_mode(mode: str) -> tuple[str, Optional[int]]:
    if mode == WRATH:
        return WRATH, None
    m = _MODE_RE.match(mode)
    if not m:
        raise ValueError(f"mode must be 'wrath', 'baseline' or 'baseline(k)', got {mode!r}")
    return BASELINE, int(m.group(1)) if m.group(1) is not None else None


def _cluster_from(raw: Any, base: Path) -> ClusterConfig:
    if isinstance(raw, str):
        path = base / raw
        if not path.exists():
            raise ConfigError("cluster", f"file not found: {path}")
        with open(path) as f:
            raw = json.load(f)
    if not isinstance(raw, dict) or "pools" not in raw:
        raise ConfigError("cluster", "expected a file path or an object with 'pools'")
    pools = []
    for i, p in enumerate(raw["pools"]):
        where = f"cluster.pools[{i}]"
        try:
            if "nodes" in p:
                pools.append(PoolConfig.from_dict(p))
                continue
            # shorthand: {"pool_id", "count", "memory", "packages", "file_limit", "workers"}
            prefix = p.get("prefix", p["pool_id"].lower())
            nodes = tuple(NodeConfig(f"{prefix}{k + 1}", int(p.get("memory", 4)), frozenset(p.get("packages", ())),
                                     int(p.get("file_limit", 1024)), (k + 1) in p.get("init_failures", ()))
                          for k in range(int(p.get("count", 1))))
            pools.append(PoolConfig(p["pool_id"], nodes, int(p.get("workers", 4))))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(where, str(e)) from None
    try:
        return ClusterConfig(tuple(pools), tuple(raw.get("submit_pools", ())))
    except ValueError as e:
        raise ConfigError("cluster", str(e)) from None


def load_experiment(source, base: Optional[Path] = None) -> ExperimentConfig:
    """Parse an experiment file (path) or dict; paths resolve against the file's directory."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        base = path.parent
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON: {e}") from None
    else:
        raw = dict(source)
    base = base or Path(".")

    if "cluster" not in raw:
        raise ConfigError("cluster", "missing")
    cluster = _cluster_from(raw["cluster"], base)

    wl = raw.get("workload")
    if not isinstance(wl, dict):
        raise ConfigError("workload", "missing or not an object")
    if "file" in wl:
        wl = {"file": str(base / wl["file"])}
        if not Path(wl["file"]).exists():
            raise ConfigError("workload.file", f"file not found: {wl['file']}")
    elif wl.get("generator") in GENERATORS:
        wl = {"generator": wl["generator"], "params": dict(wl.get("params", {}))}
    else:
        raise ConfigError("workload.generator", f"expected one of {sorted(GENERATORS)} or a 'file'")

    inj = raw.get("injection")
    if inj is not None:
        if inj.get("type") not in injection.FAILURE_TYPES:
            raise ConfigError("injection.type", f"expected one of {list(injection.FAILURE_TYPES)}")
        try:
            rate = float(inj.get("rate", 0.0))
        except (TypeError, ValueError):
            raise ConfigError("injection.rate", "not a number") from None
        if not 0.0 <= rate <= 1.0:
            raise ConfigError("injection.rate", "must be in [0, 1]")
        inj = {"type": inj["type"], "rate": rate, "seed": inj.get("seed"), "params": dict(inj.get("params", {}))}

    try:
        policy = PolicyConfig.from_dict(raw.get("policy"))
    except (TypeError, ValueError) as e:
        raise ConfigError("policy", str(e)) from None
    if policy.history_file:
        policy.history_file = str(base / policy.history_file)

    repeats = raw.get("repeats", 1)
    if not isinstance(repeats, int) or repeats < 1:
        raise ConfigError("repeats", "must be an integer >= 1")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    try:
        mode, k = parse_mode(str(raw.get("mode", WRATH)))
    except ValueError as e:
        raise ConfigError("mode", str(e)) from None
    k = k if k is not None else raw.get("baseline_retries", 3)
    if not isinstance(k, int) or k < 0:
        raise ConfigError("baseline_retries", "must be an integer >= 0")
    try:
        faults = tuple(Fault.from_dict(f) for f in raw.get("faults", ()))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError("faults", str(e)) from None
    node_ids = {n.node_id for p in cluster.pools for n in p.nodes}
    for i, f in enumerate(faults):
        if f.target not in node_ids:
            raise ConfigError(f"faults[{i}].target", f"unknown node {f.target!r}")
    return ExperimentConfig(cluster, wl, inj, policy, repeats, seed, mode, k, faults)


# --- running -------------------------------------------------------------------------------

def build_run(cfg: ExperimentConfig, seed: int):
    """The workload (with injection applied) and its benchmark oracle, if generated."""
    bench = None
    if "file" in cfg.workload:
        workload = Workload.load(cfg.workload["file"])
    else:
        params = {"seed": seed, **cfg.workload["params"]}
        bench = GENERATORS[cfg.workload["generator"]](**params)
        workload = bench.workload
    plan = None
    if cfg.injection and cfg.injection["rate"] > 0:
        inj = cfg.injection
        params = {**injection.params_for_cluster(inj["type"], cfg.cluster), **inj["params"]}
        inj_seed = inj["seed"] if inj["seed"] is not None else seed
        plan = injection.plan_injection(workload, inj["type"], inj["rate"], inj_seed, params)
        workload = injection.apply_all(plan, workload)
    return workload, bench, plan


def run_once(cfg: ExperimentConfig, seed: int, store_path: Optional[str] = None,
             radio_addr: Optional[str] = None) -> tuple[RunResult, Any, Any]:
    workload, bench, plan = build_run(cfg, seed)
    prior = load_history(cfg.policy.history_file) if cfg.policy.history_file else None
    rc = RunConfig(mode=cfg.mode, baseline_retries=cfg.baseline_retries, seed=seed, policy=cfg.policy,
                   faults=cfg.faults, prior_history=prior, store_path=store_path, radio_addr=radio_addr)
    result = run_workload(workload, cfg.cluster, rc)
    result.store.close()
    return result, bench, plan


def run_experiment(cfg: ExperimentConfig, out_dir) -> list[tuple[int, int, MetricsRecord]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    radio_addr = os.environ.get(RADIO_ADDR_ENV) or None
    rows = []
    per_run = []
    for i in range(cfg.repeats):
        seed = cfg.seed + i
        run_dir = out / f"run-{i:04d}"
        run_dir.mkdir(exist_ok=True)
        events = run_dir / "events.jsonl"
        if events.exists():
            events.unlink()
        result, bench, plan = run_once(cfg, seed, str(events), radio_addr)
        m = result.metrics
        dump_metrics(str(run_dir / "metrics.json"), m)
        verified = bench.verify(result.values) if bench is not None and m.application_success else None
        per_run.append({"run": i, "seed": seed, "run_id": result.run_id, "verified": verified,
                        "replaced": sorted(plan.replaced) if plan else []})
        log.info("run %d seed %d: success=%s makespan=%d ms", i, seed, m.application_success, m.makespan_ms)
        rows.append((i, seed, m))
    write_summary(str(out / "summary.csv"), rows)
    with open(out / "experiment.json", "w") as f:
        json.dump({**cfg.describe(), "runs": per_run}, f, indent=1, sort_keys=True)
    return rows


# --- comparison --------------------------------------------------------------------------------

def _load_report(d) -> tuple[dict, list[dict]]:
    d = Path(d)
    exp_path = d / "experiment.json"
    if not exp_path.exists():
        raise MismatchedExperiments(f"{d}: no experiment.json")
    with open(exp_path) as f:
        exp = json.load(f)
    runs = []
    for r in exp.get("runs", []):
        with open(d / f"run-{r['run']:04d}" / "metrics.json") as f:
            runs.append({**json.load(f), "seed": r["seed"]})
    return exp, runs


def _ratio(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None or b is None or (isinstance(a, float) and math.isnan(a)) or (isinstance(b, float) and math.isnan(b)):
        return None
    if a == b:
        return 1.0
    if b == 0:
        return None
    return a / b


def compare(dir_a, dir_b) -> list[dict]:
    """Mean of each metric in ``dir_a`` normalized by ``dir_b``."""
    exp_a, runs_a = _load_report(dir_a)
    exp_b, runs_b = _load_report(dir_b)
    for key in ("workload", "injection"):
        if exp_a.get(key) != exp_b.get(key):
            raise MismatchedExperiments(f"{key} differs: {exp_a.get(key)!r} vs {exp_b.get(key)!r}")
    ftype = (exp_a.get("injection") or {}).get("type", "none")
    rows = []
    for k in METRIC_FIELDS:
        a = mean_sem([_as_num(r[k]) for r in runs_a])[0]
        b = mean_sem([_as_num(r[k]) for r in runs_b])[0]
        rows.append({"failure_type": ftype, "metric": k, "a": a, "b": b, "ratio": _ratio(a, b)})
    return rows


def _as_num(v):
    if v is None:
        return None
    return float(v)


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(round(v, 9)) if isinstance(v, float) else str(v)


# --- entry point --------------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _generate(app: str, params: list[str]) -> Workload:
    kwargs = {}
    for p in params:
        k, sep, v = p.partition("=")
        if not sep:
            raise ConfigError(f"generate.{p}", "expected key=value")
        kwargs[k.replace("-", "_")] = _parse_value(v)
    try:
        return GENERATORS[app](**kwargs).workload
    except TypeError as e:
        raise ConfigError(f"generate.{app}", str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wrath", description="Resilient task runtime experiments on a virtual cluster.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment file")
    run.add_argument("--config", required=True, help="experiment JSON file")
    run.add_argument("--mode", help="wrath, baseline or baseline(k); overrides the file")
    run.add_argument("--baseline-retries", type=int, help="retries per task in baseline mode")
    run.add_argument("--seed", type=int)
    run.add_argument("--repeats", type=int)
    run.add_argument("--out", default="wrath-out", help="output directory (default: %(default)s)")

    cmp_ = sub.add_parser("compare", help="normalize metrics of one report directory by another")
    cmp_.add_argument("dir_a")
    cmp_.add_argument("dir_b")

    gen = sub.add_parser("generate", help="emit a workload file")
    gen.add_argument("app", choices=sorted(GENERATORS))
    gen.add_argument("params", nargs="*", help="generator parameters as key=value")
    gen.add_argument("-o", "--output", help="write here instead of stdout")
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_LEVEL_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_experiment(args.config)
            if args.mode:
                try:
                    cfg.mode, k = parse_mode(args.mode)
                except ValueError as e:
                    raise ConfigError("--mode", str(e)) from None
                if k is not None:
                    cfg.baseline_retries = k
            if args.baseline_retries is not None:
                if args.baseline_retries < 0:
                    raise ConfigError("--baseline-retries", "must be >= 0")
                cfg.baseline_retries = args.baseline_retries
            if args.seed is not None:
                cfg.seed = args.seed
            if args.repeats is not None:
                if args.repeats < 1:
                    raise ConfigError("--repeats", "must be >= 1")
                cfg.repeats = args.repeats
            rows = run_experiment(cfg, args.out)
            ok = sum(1 for _, _, m in rows if m.application_success)
            print(f"{len(rows)} runs, {ok} successful; summary in {Path(args.out) / 'summary.csv'}")
        elif args.command == "compare":
            rows = compare(args.dir_a, args.dir_b)
            print("failure_type,metric,a,b,ratio")
            for r in rows:
                print(",".join([r["failure_type"], r["metric"], _cell(r["a"]), _cell(r["b"]), _cell(r["ratio"])]))
        else:
            text = _generate(args.app, args.params).dumps()
            if args.output:
                Path(args.output).write_text(text + "\n")
            else:
                print(text)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MismatchedExperiments as e:
        print(f"cannot compare: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
