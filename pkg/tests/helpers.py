"""Shared scenario builders for the end-to-end tests."""

from wrath.bench.generators import gen_cholesky, gen_mapreduce
from wrath.injection import apply_all, params_for_cluster, plan_injection
from wrath.manager import RunConfig, run_workload
from wrath.monitoring import LOG
from wrath.vcluster import make_cluster_config


def mixed_cluster(small=4, workers=4):
    return make_cluster_config(
        {"pool_id": "small", "count": small, "memory": 4, "workers": workers, "prefix": "s"},
        {"pool_id": "big", "count": 1, "memory": 16, "packages": ["pkgX"], "file_limit": 4096,
         "workers": workers, "prefix": "b"},
        submit_pools=["small"])


def bench(app="mapreduce", seed=0, **kw):
    if app == "cholesky":
        return gen_cholesky(kw.pop("n", 400), kw.pop("block", 100), seed=seed, **kw)
    return gen_mapreduce(kw.pop("map_count", 20), seed=seed, **kw)


def run(ftype=None, rate=0.0, seed=0, mode="wrath", app="mapreduce", cluster=None, bm=None, **cfg):
    """Generate, inject, and run one scenario.  Returns (result, benchmark, plan)."""
    cluster = cluster or mixed_cluster()
    bm = bm or bench(app, seed)
    wl, plan = bm.workload, None
    if ftype:
        plan = plan_injection(wl, ftype, rate, seed, params_for_cluster(ftype, cluster))
        wl = apply_all(plan, wl)
    res = run_workload(wl, cluster, RunConfig(mode=mode, seed=seed, **cfg))
    return res, bm, plan


def logs(res, event):
    return [e for e in res.store.events if e.kind == LOG and e.body.get("event") == event]


def normalized(events):
    """Event log with wall-clock fields stripped, for determinism checks."""
    out = []
    for e in events:
        body = {k: v for k, v in e.body.items() if k not in ("wall_ms", "wall")}
        out.append((e.kind, e.source, e.ts, e.seq, repr(sorted(body.items()))))
    return out
