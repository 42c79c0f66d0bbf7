import itertools
import json

import pytest
from hypothesis import given, settings, strategies as st

from wrath.taskgraph import (TRANSITIONS, CycleError, DuplicateTask, IllegalTransition, RequirementManifest,
                             TaskEvent, TaskRecord, TaskSpec, TaskState, UnknownDependency, UnknownTask,
                             Workload, build_workload, new_records, propagate_dep_failure, ready_tasks,
                             transition)

S, E = TaskState, TaskEvent


def spec(tid, *deps, **kw):
    return TaskSpec(tid, "k", "synthetic.sum", {"value": 1}, deps=deps, **kw)


@st.composite
def dags(draw, max_nodes=8):
    n = draw(st.integers(1, max_nodes))
    ids = [f"t{i}" for i in range(n)]
    deps = {}
    for i, t in enumerate(ids):
        deps[t] = sorted(draw(st.sets(st.sampled_from(ids[:i]), max_size=i)) if i else [])
    order = draw(st.permutations(ids))
    return build_workload([spec(t, *deps[t]) for t in order], name="h")


def closure(wl, tid):
    # brute-force transitive closure over the deps relation
    out = set()
    changed = True
    while changed:
        changed = False
        for t, s in wl.tasks.items():
            if t not in out and (tid in s.deps or out & set(s.deps)):
                out.add(t)
                changed = True
    return out


def test_build_diamond():
    wl = build_workload([spec("a"), spec("b", "a"), spec("c", "a"), spec("d", "b", "c")])
    assert wl.topological_order() == ["a", "b", "c", "d"]
    assert wl.children["a"] == ("b", "c")
    assert wl.descendants("a") == {"b", "c", "d"}


def test_cycle_reported():
    with pytest.raises(CycleError) as ei:
        build_workload([spec("a", "c"), spec("b", "a"), spec("c", "b")])
    assert set(ei.value.cycle) == {"a", "b", "c"}


def test_unknown_dependency_and_duplicate():
    with pytest.raises(UnknownDependency):
        build_workload([spec("a", "zzz")])
    with pytest.raises(DuplicateTask):
        build_workload([spec("a"), spec("a")])
    with pytest.raises(UnknownTask):
        build_workload([spec("a")]).descendants("b")


def test_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec("a", "k", "f", max_retries=-1)
    with pytest.raises(ValueError):
        RequirementManifest(memory_units=-1)


def test_workload_json_roundtrip(tmp_path):
    wl = build_workload([spec("a", requirements=RequirementManifest(2, frozenset({"p"}), 10)),
                         spec("b", "a", max_retries=5, duration_ms=7)], name="rt")
    p = tmp_path / "w.json"
    p.write_text(wl.dumps())
    back = Workload.load(p)
    assert back.tasks == wl.tasks
    assert back.name == "rt"
    assert json.loads(back.dumps()) == json.loads(wl.dumps())


@given(dags())
def test_topological_order_respects_deps(wl):
    pos = {t: i for i, t in enumerate(wl.topological_order())}
    assert set(pos) == set(wl.tasks)
    for t, s in wl.tasks.items():
        assert all(pos[d] < pos[t] for d in s.deps)


@given(dags())
def test_descendants_match_closure(wl):
    for t in wl.tasks:
        assert wl.descendants(t) == closure(wl, t)


def brute_ready(wl, states):
    # independent oracle: scan the children lists to find each task's parents
    parents = {t: set() for t in wl.tasks}
    for p, kids in wl.children.items():
        for k in kids:
            parents[k].add(p)
    return {t for t in wl.tasks if states[t] is S.PENDING and all(states[p] is S.SUCCEEDED for p in parents[t])}


def _records(wl, states):
    recs = new_records(wl)
    for t, s in states.items():
        recs[t].state = s
    return recs


def test_readiness_exhaustive_small_dags():
    # every DAG on up to 4 labelled nodes (edges i<j) x every assignment of 4 states
    states4 = [S.PENDING, S.SUCCEEDED, S.FAILED, S.RUNNING]
    checked = 0
    for n in range(1, 5):
        ids = [f"t{i}" for i in range(n)]
        pairs = [(i, j) for j in range(n) for i in range(j)]
        for mask in range(1 << len(pairs)):
            deps = {t: [] for t in ids}
            for b, (i, j) in enumerate(pairs):
                if mask >> b & 1:
                    deps[ids[j]].append(ids[i])
            wl = build_workload([spec(t, *deps[t]) for t in ids])
            for combo in itertools.product(states4, repeat=n):
                states = dict(zip(ids, combo))
                assert ready_tasks(wl, _records(wl, states)) == brute_ready(wl, states)
                checked += 1
    assert checked == 4 + 2 * 16 + 8 * 64 + 64 * 256


@settings(max_examples=300)
@given(dags(), st.data())
def test_readiness_random_dags_up_to_8(wl, data):
    states = {t: data.draw(st.sampled_from(list(S))) for t in wl.tasks}
    assert ready_tasks(wl, _records(wl, states)) == brute_ready(wl, states)


def test_transition_happy_path_and_retry_budget():
    rec = TaskRecord(spec("a", max_retries=1))
    seen = []
    emit = lambda r, prev, ev: seen.append((prev, ev, r.state))
    for ev in (E.MARK_READY, E.DISPATCH, E.START, E.FAIL, E.RETRY_GRANTED, E.START, E.FAIL):
        transition(rec, ev, emit)
    assert rec.state is S.FAILED and rec.retries_used == 1
    with pytest.raises(IllegalTransition):
        transition(rec, E.RETRY_GRANTED)
    transition(rec, E.TERMINATE)
    assert rec.is_terminal()
    assert seen[0] == (S.PENDING, E.MARK_READY, S.READY)
    assert len(seen) == 7


@given(st.sampled_from(list(S)), st.sampled_from(list(E)))
def test_transition_table_defines_exactly_the_legal_moves(state, event):
    rec = TaskRecord(spec("a"), state=state)
    if (state, event) in TRANSITIONS:
        transition(rec, event)
        assert rec.state is TRANSITIONS[(state, event)]
    else:
        with pytest.raises(IllegalTransition):
            transition(rec, event)
        assert rec.state is state


def test_terminal_states_have_no_exits():
    for state in (S.SUCCEEDED, S.DEP_FAILED, S.TERMINATED):
        assert not [e for (s, e) in TRANSITIONS if s is state]


def test_failed_is_terminal_only_when_final():
    rec = TaskRecord(spec("a"), state=S.FAILED)
    assert not rec.is_terminal()
    rec.final = True
    assert rec.is_terminal()


@given(dags(), st.data())
def test_propagate_dep_failure_is_descendants_minus_terminal(wl, data):
    failed = data.draw(st.sampled_from(sorted(wl.tasks)))
    recs = new_records(wl)
    for t in wl.tasks:
        recs[t].state = data.draw(st.sampled_from([S.PENDING, S.SUCCEEDED, S.DEP_FAILED]))
    got = propagate_dep_failure(wl, failed, recs)
    expect = {(d, failed) for d in closure(wl, failed) if recs[d].state is S.PENDING}
    assert got == expect


def test_propagate_uses_recorded_root():
    wl = build_workload([spec("a"), spec("b", "a"), spec("c", "b")])
    recs = new_records(wl)
    recs["b"].root_cause = "a"
    assert propagate_dep_failure(wl, "b", recs) == {("c", "a")}
