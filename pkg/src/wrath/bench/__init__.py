from .generators import (GENERATORS, Benchmark, InvalidBlocking, cholesky_residual, cholesky_task_count,
                         count_words_sequential, gen_cholesky, gen_mapreduce, gen_synthetic, residual_ok)
from .metrics import IncompleteLog, MetricsRecord, compute_metrics, mean_sem, write_summary

__all__ = [
    "GENERATORS", "Benchmark", "InvalidBlocking", "cholesky_residual", "cholesky_task_count",
    "count_words_sequential", "gen_cholesky", "gen_mapreduce", "gen_synthetic", "residual_ok",
    "IncompleteLog", "MetricsRecord", "compute_metrics", "mean_sem", "write_summary",
]
