from dagharness.harness.bench import (
    AuditFailure,
    BenchReport,
    GainReport,
    GroupResult,
    MissingGroup,
    audit,
    compute_gains,
    run_bench,
    run_engine,
    run_group,
)
from dagharness.harness.groups import GROUPS, Group, GroupConfig
from dagharness.harness.loopsim import simulate_loop
from dagharness.harness.metrics import RunMetrics, metrics_from_trace
from dagharness.harness.tasks import TaskSpec, generate_tasks, parallel_tasks

__all__ = [
    "AuditFailure",
    "BenchReport",
    "GROUPS",
    "GainReport",
    "Group",
    "GroupConfig",
    "GroupResult",
    "MissingGroup",
    "RunMetrics",
    "TaskSpec",
    "audit",
    "compute_gains",
    "generate_tasks",
    "metrics_from_trace",
    "parallel_tasks",
    "run_bench",
    "run_engine",
    "run_group",
    "simulate_loop",
]
