import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wrath.monitoring import FAILURE, LOG, Emitter, LocalTransport, MonitoringStore, Radio
from wrath.taskgraph import RequirementManifest, TaskSpec
from wrath.vcluster import (Cluster, ClusterConfig, InitFailure, NodeConfig, NodeLost, Placement, PoolConfig,
                            RestartFailed, UnknownNode, begin_attempt, digest, execute_attempt,
                            make_cluster_config, schedule)
import wrath  # noqa: F401  registers task bodies


def cluster(*pools, submit=()):
    store = MonitoringStore()
    now = [0]
    em = Emitter("t", Radio(LocalTransport(store)), lambda: now[0])
    c = Cluster(make_cluster_config(*pools, submit_pools=submit), em)
    c.provision_all()
    return c, store, now


def task(tid="t", fn="synthetic.sum", args=None, **req):
    return TaskSpec(tid, "k", fn, args if args is not None else {"value": 1}, requirements=RequirementManifest(**req))


def test_provision_registers_managers_and_workers():
    c, store, _ = cluster({"pool_id": "A", "count": 2, "workers": 3})
    regs = [e for e in store.query(kind=LOG) if e.body["event"] == "registered"]
    assert len(regs) == 2
    assert sum(len(e.body["workers"]) for e in regs) == 6
    assert set(store.last_heartbeat) == {"a1", "a1.manager", "a2", "a2.manager"}


def test_partial_pilot_init_failure_reported():
    c, store, _ = cluster({"pool_id": "A", "count": 2, "init_failures": [2]})
    assert c.nodes["a1"].live and not c.nodes["a2"].live
    fails = store.query(kind=FAILURE)
    assert len(fails) == 1 and fails[0].source == "a2"
    assert fails[0].body["text"].startswith("PilotInitError")


def test_all_nodes_fail_init():
    c = Cluster(make_cluster_config({"pool_id": "A", "count": 1, "init_failures": [1]}))
    with pytest.raises(InitFailure) as ei:
        c.provision_pool(c.config.pools[0])
    assert ei.value.node_ids == ["a1"]


def test_config_validation_and_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        NodeConfig("n", memory_capacity_units=0)
    with pytest.raises(ValueError):
        PoolConfig("A", ())
    n = NodeConfig("n1")
    with pytest.raises(ValueError):
        ClusterConfig((PoolConfig("A", (n,)), PoolConfig("A", (NodeConfig("n2"),))))
    with pytest.raises(ValueError):
        ClusterConfig((PoolConfig("A", (n,)), PoolConfig("B", (n,))))
    cfg = make_cluster_config({"pool_id": "A", "count": 2, "packages": ["x"]}, {"pool_id": "B"}, submit_pools=["A"])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ClusterConfig.load(p) == cfg


# --- schedule ---------------------------------------------------------------------------

def test_schedule_picks_most_free_slots_then_lowest_id():
    c, _, _ = cluster({"pool_id": "A", "count": 2, "workers": 4})
    c.nodes["a1"].running.update({("x", "a1.w0"), ("y", "a1.w1"), ("z", "a1.w2")})
    assert schedule(c, [task()]) == [("t", "A", "a2")]
    c.nodes["a1"].running.clear()
    assert schedule(c, [task()]) == [("t", "A", "a1")]


@settings(max_examples=100)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=5), st.integers(1, 6))
def test_schedule_matches_enumerated_argmax(busy, ntasks):
    c, _, _ = cluster({"pool_id": "A", "count": len(busy), "workers": 4})
    for (nid, st_), b in zip(sorted(c.nodes.items()), busy):
        st_.running.update((f"x{nid}{k}", f"{nid}.w{k}") for k in range(b))
    got = schedule(c, [task(f"t{i}") for i in range(ntasks)])
    # oracle: simulate greedy assignment by enumerating all nodes each time
    free = {nid: 4 - b for nid, b in zip(sorted(c.nodes), busy)}
    expect = []
    for i in range(ntasks):
        best = None
        for nid in sorted(free):
            if free[nid] > 0 and (best is None or free[nid] > free[best]):
                best = nid
        if best is None:
            break
        free[best] -= 1
        expect.append((f"t{i}", "A", best))
    assert got == expect


def test_schedule_hint_passthrough_and_submit_pools():
    c, _, _ = cluster({"pool_id": "A", "count": 1}, {"pool_id": "B", "count": 2, "memory": 16}, submit=["A"])
    assert schedule(c, [task()]) == [("t", "A", "a1")]
    assert schedule(c, [task()], {"t": Placement(1, "B", "b2")}) == [("t", "B", "b2")]


def test_schedule_all_denylisted_queues():
    c, _, _ = cluster({"pool_id": "A", "count": 2})
    assert schedule(c, [task()], denylist={"a1", "a2.manager"}) == []


def test_hinted_admission_checks_requirements_only_when_checked():
    c, _, _ = cluster({"pool_id": "A", "count": 1, "memory": 4})
    big = task(memory_units=8)
    assert schedule(c, [big]) == [("t", "A", "a1")]  # first placement is requirement-blind
    assert schedule(c, [big], {"t": Placement(1, "A", "a1")}) == []
    assert schedule(c, [big], {"t": Placement(0, "A", "a1", checked=False)}) == [("t", "A", "a1")]
    pkg = task(packages=frozenset({"pkgX"}))
    assert schedule(c, [pkg], {"t": Placement(1, "A", "a1")}) == []


def test_schedule_respects_free_memory_across_batch():
    c, _, _ = cluster({"pool_id": "B", "count": 1, "memory": 16})
    specs = [task(f"t{i}", memory_units=8) for i in range(3)]
    hints = {s.id: Placement(1, "B", "b1") for s in specs}
    assert [t for t, _, _ in schedule(c, specs, hints)] == ["t0", "t1"]


# --- execution ---------------------------------------------------------------------------

def test_attempt_out_of_memory():
    c, _, _ = cluster({"pool_id": "A", "count": 1, "memory": 4})
    out = execute_attempt(task(memory_units=8), c.nodes["a1"], "a1.w0")
    assert not out.success and out.failure == "oom" and out.digest is None
    assert out.error.startswith("MemoryError: out of memory")
    assert c.nodes["a1"].memory_in_use_units == 0


def test_attempt_import_error_text():
    c, _, _ = cluster({"pool_id": "A", "count": 1})
    spec = task(fn="inject.Import", args={"inner_fn": "synthetic.sum", "inner_args": {"value": 1},
                                          "package": "pkgX"}, packages=frozenset({"pkgX"}))
    out = execute_attempt(spec, c.nodes["a1"], "a1.w0")
    assert out.error == "ModuleNotFoundError: No module named 'pkgX'"


def test_attempt_success_digest_and_release():
    c, _, _ = cluster({"pool_id": "A", "count": 1})
    spec = task(fn="wordcount.map", args={"texts": ["a a b"]}, memory_units=2)
    node = c.nodes["a1"]
    running = begin_attempt(spec, node, "a1.w0", {})
    assert node.memory_in_use_units == 2 and ("t", "a1.w0") in node.running
    out = running.finish()
    assert out.success and out.value == {"a": 2, "b": 1} and out.digest == digest({"a": 2, "b": 1})
    assert node.memory_in_use_units == 0 and not node.running


def test_attempt_ulimit_and_worker_kill():
    c, _, _ = cluster({"pool_id": "A", "count": 1, "file_limit": 100})
    node = c.nodes["a1"]
    ul = task(fn="inject.Ulimit", args={"inner_fn": "synthetic.sum", "inner_args": {"value": 1},
                                        "files_to_open": 101})
    assert execute_attempt(ul, node, "a1.w0").error == "OSError: [Errno 24] Too many open files"
    ok = task(fn="inject.Ulimit", args={"inner_fn": "synthetic.sum", "inner_args": {"value": 1},
                                        "files_to_open": 60})
    running = begin_attempt(ok, node, "a1.w0", {})
    assert node.open_files == 60
    running.finish()
    assert node.open_files == 0
    wk = task(fn="inject.WorkerKilled", args={"inner_fn": "synthetic.sum", "inner_args": {"value": 1}})
    out = execute_attempt(wk, node, "a1.w1")
    assert out.failure == "worker_lost" and out.worker_id == "a1.w1"
    assert "a1.w1" not in node.free_workers()


def test_kill_node_mid_attempt_is_node_lost():
    c, _, _ = cluster({"pool_id": "A", "count": 1})
    running = begin_attempt(task(), c.nodes["a1"], "a1.w0", {})
    assert c.kill_node("a1") == ["t"]
    with pytest.raises(NodeLost):
        running.finish()
    with pytest.raises(NodeLost):
        begin_attempt(task(), c.nodes["a1"], "a1.w0", {})
    with pytest.raises(UnknownNode):
        c.kill_node("zz")


def test_revive_resets_counters_and_heartbeats():
    c, store, now = cluster({"pool_id": "A", "count": 1})
    begin_attempt(task(memory_units=3), c.nodes["a1"], "a1.w0", {})
    c.kill_node("a1")
    now[0] = 100
    c.revive_node("a1")
    st_ = c.nodes["a1"]
    assert st_.live and st_.memory_in_use_units == 0 and not st_.running
    assert store.last_heartbeat["a1"] == 100 and store.last_heartbeat["a1.manager"] == 100


def test_restart_hung_manager_requeues_orphan():
    c, store, now = cluster({"pool_id": "A", "count": 3})
    begin_attempt(task("orphan"), c.nodes["a3"], "a3.w0", {})
    c.hang_manager("a3")
    assert not c.nodes["a3"].live
    now[0] = 2000
    assert c.restart_component("a3.manager") == ["orphan"]
    assert c.nodes["a3"].live and not c.nodes["a3"].running
    assert store.last_heartbeat["a3.manager"] == 2000


def test_restart_healthy_is_noop_with_warning(caplog):
    c, _, _ = cluster({"pool_id": "A", "count": 1})
    with caplog.at_level(logging.WARNING):
        assert c.restart_component("a1.manager") == []
    assert "healthy" in caplog.text


def test_restart_on_killed_node_fails():
    c, _, _ = cluster({"pool_id": "A", "count": 1})
    c.hang_manager("a1")
    c.kill_node("a1")
    with pytest.raises(RestartFailed):
        c.restart_component("a1.manager")


def test_restart_pool_restarts_hung_managers():
    c, _, _ = cluster({"pool_id": "A", "count": 2})
    c.hang_manager("a1")
    c.hang_manager("a2")
    c.restart_component("pool:A")
    assert c.nodes["a1"].manager_ok and c.nodes["a2"].manager_ok


@settings(max_examples=100)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 6)), max_size=30))
def test_memory_never_exceeds_capacity(ops):
    c, _, _ = cluster({"pool_id": "A", "count": 1, "memory": 6, "workers": 4})
    node = c.nodes["a1"]
    live = []
    for i, (start, units) in enumerate(ops):
        if start and node.free_workers():
            live.append(begin_attempt(task(f"t{i}", memory_units=units), node, node.free_workers()[0], {}))
        elif live:
            live.pop(0).finish()
        assert 0 <= node.memory_in_use_units <= node.config.memory_capacity_units
    for r in live:
        r.finish()
    assert node.memory_in_use_units == 0


def test_digest_is_canonical():
    assert digest({"b": 1, "a": [1, 2]}) == digest({"a": [1, 2], "b": 1})
    assert digest(np.eye(2)) == digest(np.eye(2).copy())
    assert digest(np.eye(2)) != digest(np.eye(2, dtype=np.float32))
