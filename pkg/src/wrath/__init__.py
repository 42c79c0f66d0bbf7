"""Resilient task-based parallel runtime on a virtual cluster."""

from . import injection  # noqa: F401  registers the failure-task bodies
from .bench import generators  # noqa: F401  registers the benchmark task bodies
from .manager import Fault, RunConfig, RunResult, run_workload

__version__ = "0.1.0"

__all__ = ["Fault", "RunConfig", "RunResult", "run_workload"]
