"""Benchmark workload generators: MapReduce word count, blocked Cholesky, synthetic DAGs."""

from __future__ import annotations

import random
import string
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular

from ..taskgraph import RequirementManifest, TaskSpec, Workload, build_workload
from ..vcluster import digest, task_function


@dataclass
class Benchmark:
    workload: Workload
    expected_digest: Optional[str]
    verify: Callable[[dict[str, Any]], bool]
    expected: Any = None  # oracle output; for Cholesky a zero-arg callable returning A
    assemble: Optional[Callable[[dict[str, Any]], Any]] = None


# --- MapReduce word count -------------------------------------------------------------

def random_texts(files: int, seed: int, words_per_file: int = 200, vocabulary: int = 64) -> list[str]:
    rng = random.Random(seed)
    vocab = sorted({"".join(rng.choices(string.ascii_lowercase, k=rng.randint(2, 7)))
                    for _ in range(vocabulary)})
    return [" ".join(rng.choices(vocab, k=words_per_file)) for _ in range(files)]


def count_words_sequential(texts: list[str]) -> dict[str, int]:
    c: Counter = Counter()
    for t in texts:
        c.update(t.split())
    return dict(sorted(c.items()))


@task_function("wordcount.map")
def wc_map(ctx, texts):
    c: Counter = Counter()
    for t in texts:
        for w in t.split():
            c[w] += 1
    return dict(sorted(c.items()))


@task_function("wordcount.reduce")
def wc_reduce(ctx, partials):
    total: Counter = Counter()
    for p in partials:
        total.update(p)
    return dict(sorted(total.items()))


def gen_mapreduce(map_count: int = 20, files: Optional[int] = None, seed: int = 0, *,
                  texts: Optional[list[str]] = None, words_per_file: int = 200,
                  map_ms: int = 200, reduce_ms: int = 300, memory_units: int = 1,
                  max_retries: int = 3) -> Benchmark:
    """``map_count`` map tasks over round-robin file shards plus one reduce."""
    if map_count < 1:
        raise ValueError("map_count must be >= 1")
    if texts is None:
        texts = random_texts(files if files is not None else map_count, seed, words_per_file)
    width = len(str(map_count - 1))
    req = RequirementManifest(memory_units=memory_units)
    specs = []
    for i in range(map_count):
        shard = texts[i::map_count]
        specs.append(TaskSpec(f"map-{i:0{width}d}", "map", "wordcount.map", {"texts": shard},
                              requirements=req, max_retries=max_retries, duration_ms=map_ms))
    specs.append(TaskSpec("reduce", "reduce", "wordcount.reduce",
                          {"partials": [{"$ref": s.id} for s in specs]},
                          deps=tuple(s.id for s in specs), requirements=req,
                          max_retries=max_retries, duration_ms=reduce_ms))
    expected = count_words_sequential(texts)
    expected_digest = digest(expected)

    def verify(values: dict[str, Any]) -> bool:
        return "reduce" in values and digest(values["reduce"]) == expected_digest

    return Benchmark(build_workload(specs, name=f"mapreduce-{map_count}"), expected_digest, verify, expected)


# --- blocked Cholesky -------------------------------------------------------------------

class InvalidBlocking(ValueError):
    pass


@lru_cache(maxsize=8)
def spd_matrix(n: int, seed: int) -> np.ndarray:
    m = np.random.default_rng(seed).standard_normal((n, n))
    a = m.T @ m + n * np.eye(n)
    a.setflags(write=False)
    return a


def _block(src: dict) -> np.ndarray:
    if "values" in src:
        return np.asarray(src["values"], dtype=float)
    a, b, i, j = spd_matrix(src["n"], src["seed"]), src["block"], src["i"], src["j"]
    return np.array(a[i * b:(i + 1) * b, j * b:(j + 1) * b])


def _src_or_value(x):
    return _block(x) if isinstance(x, dict) else x


@task_function("cholesky.potrf")
def ch_potrf(ctx, a):
    return np.linalg.cholesky(_src_or_value(a))


@task_function("cholesky.trsm_col")
def ch_trsm_col(ctx, a, l_kk):
    # L_ik = A_ik L_kk^-T
    return solve_triangular(l_kk, _src_or_value(a).T, lower=True).T


@task_function("cholesky.trsm_row")
def ch_trsm_row(ctx, a, l_kk):
    # U_kj = L_kk^-1 A_kj
    return solve_triangular(l_kk, _src_or_value(a), lower=True)


@task_function("cholesky.update")
def ch_update(ctx, a, l_ik, u_kj):
    return _src_or_value(a) - l_ik @ u_kj


def cholesky_task_count(blocks: int) -> int:
    # step k touches an m x m trailing matrix (m = blocks - k): 1 + 2(m-1) + (m-1)^2 = m^2 tasks
    return blocks * (blocks + 1) * (2 * blocks + 1) // 6


def gen_cholesky(n: int = 400, block: int = 100, seed: int = 0, *, matrix: Optional[np.ndarray] = None,
                 potrf_ms: int = 100, trsm_ms: int = 150, update_ms: int = 200,
                 memory_units: int = 1, max_retries: int = 3) -> Benchmark:
    """Right-looking tiled Cholesky of ``A = M^T M + n I`` (or ``matrix``).

    Each step factors the diagonal tile, solves the column and row panels,
    and updates the full trailing square, so ``b = n / block`` tiles give
    ``b(b+1)(2b+1)/6`` tasks.
    """
    if matrix is not None:
        matrix = np.asarray(matrix, dtype=float)
        n = matrix.shape[0]
    if block <= 0 or n <= 0 or n % block:
        raise InvalidBlocking(f"block {block} does not divide n={n}")
    b = n // block
    req = RequirementManifest(memory_units=memory_units)

    def src(i, j):
        if matrix is not None:
            return {"values": matrix[i * block:(i + 1) * block, j * block:(j + 1) * block].tolist()}
        return {"seed": seed, "n": n, "block": block, "i": i, "j": j}

    def cur(i, j, k):
        # tile (i, j) as seen by step k
        return ({"$ref": f"upd-{i}-{j}-{k - 1}"}, (f"upd-{i}-{j}-{k - 1}",)) if k > 0 else (src(i, j), ())

    specs = []

    def add(tid, kind, fn, args, deps, ms):
        specs.append(TaskSpec(tid, kind, fn, args, tuple(deps), req, max_retries, ms))

    for k in range(b):
        a, d = cur(k, k, k)
        add(f"potrf-{k}", "potrf", "cholesky.potrf", {"a": a}, d, potrf_ms)
        lkk = {"$ref": f"potrf-{k}"}
        for i in range(k + 1, b):
            a, d = cur(i, k, k)
            add(f"trsm_col-{i}-{k}", "trsm", "cholesky.trsm_col", {"a": a, "l_kk": lkk},
                (f"potrf-{k}",) + d, trsm_ms)
            a, d = cur(k, i, k)
            add(f"trsm_row-{k}-{i}", "trsm", "cholesky.trsm_row", {"a": a, "l_kk": lkk},
                (f"potrf-{k}",) + d, trsm_ms)
        for i in range(k + 1, b):
            for j in range(k + 1, b):
                a, d = cur(i, j, k)
                add(f"upd-{i}-{j}-{k}", "update", "cholesky.update",
                    {"a": a, "l_ik": {"$ref": f"trsm_col-{i}-{k}"}, "u_kj": {"$ref": f"trsm_row-{k}-{j}"}},
                    (f"trsm_col-{i}-{k}", f"trsm_row-{k}-{j}") + d, update_ms)

    def full() -> np.ndarray:
        # built on demand: large layouts can be generated without the matrix
        return matrix if matrix is not None else spd_matrix(n, seed)

    def assemble(values: dict[str, Any]) -> np.ndarray:
        low = np.zeros((n, n))
        for k in range(b):
            low[k * block:(k + 1) * block, k * block:(k + 1) * block] = values[f"potrf-{k}"]
            for i in range(k + 1, b):
                low[i * block:(i + 1) * block, k * block:(k + 1) * block] = values[f"trsm_col-{i}-{k}"]
        return low

    def verify(values: dict[str, Any]) -> bool:
        try:
            low = assemble(values)
        except KeyError:
            return False
        return residual_ok(full(), low)

    return Benchmark(build_workload(specs, name=f"cholesky-{n}-{block}"), None, verify, full, assemble)


def cholesky_residual(a: np.ndarray, low: np.ndarray) -> tuple[float, float]:
    """``max|L L^T - A|`` and the tolerance ``1e-6 * ||A||_inf``."""
    return float(np.max(np.abs(low @ low.T - a))), 1e-6 * float(np.linalg.norm(a, np.inf))


def residual_ok(a: np.ndarray, low: np.ndarray) -> bool:
    r, tol = cholesky_residual(a, low)
    return r <= tol


# --- synthetic DAGs ----------------------------------------------------------------------

@task_function("synthetic.sum")
def syn_sum(ctx, value, inputs=()):
    return value + sum(inputs)


def gen_synthetic(shape: str = "diamond", size: int = 4, seed: int = 0, duration_ms: int = 50,
                  max_retries: int = 3) -> Benchmark:
    """Chains, fan-out/fan-in, diamonds, or seeded random DAGs of ``synthetic.sum`` tasks."""
    rng = random.Random(seed)
    edges: dict[str, list[str]] = {}
    if shape == "chain":
        ids = [f"t{i}" for i in range(size)]
        for i, t in enumerate(ids):
            edges[t] = [ids[i - 1]] if i else []
    elif shape == "fanout":
        edges["src"] = []
        mids = [f"m{i}" for i in range(size)]
        for m in mids:
            edges[m] = ["src"]
        edges["sink"] = mids
    elif shape == "diamond":
        edges = {"a": [], "b": ["a"], "c": ["a"], "d": ["b", "c"]}
    elif shape == "random":
        ids = [f"t{i}" for i in range(size)]
        for i, t in enumerate(ids):
            edges[t] = sorted(rng.sample(ids[:i], rng.randint(0, min(i, 3))))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    specs = [TaskSpec(t, "synthetic", "synthetic.sum",
                      {"value": rng.randint(1, 9), "inputs": [{"$ref": d} for d in deps]},
                      deps=tuple(deps), max_retries=max_retries, duration_ms=duration_ms)
             for t, deps in edges.items()]
    wl = build_workload(specs, name=f"synthetic-{shape}-{size}")
    expected: dict[str, int] = {}
    for t in wl.topological_order():
        s = wl.tasks[t]
        expected[t] = s.args["value"] + sum(expected[d] for d in s.deps)

    def verify(values):
        return all(values.get(t) == v for t, v in expected.items())

    return Benchmark(wl, digest(expected), verify, expected)


GENERATORS = {"mapreduce": gen_mapreduce, "cholesky": gen_cholesky, "synthetic": gen_synthetic}
