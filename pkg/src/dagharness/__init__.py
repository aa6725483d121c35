"""Static-DAG execution harness: versioned plans, a multi-ready-unit scheduler,
bounded recovery, write-ahead logging and a group-comparison simulation bench."""

from dagharness.plan import Plan, parse_plan, validate_plan, topological_order, derive_replan
from dagharness.lifecycle import NodeState, Trigger, transition
from dagharness.scheduler import Engine, compute_ready_set, execute_plan, run_to_completion
from dagharness.executor import FaultScript, ScriptedExecutor
from dagharness.recovery import RecoveryPolicy
from dagharness.persistence import WriteAheadLog, replay

__version__ = "0.1.0"

__all__ = [
    "Engine",
    "FaultScript",
    "NodeState",
    "Plan",
    "RecoveryPolicy",
    "ScriptedExecutor",
    "Trigger",
    "WriteAheadLog",
    "compute_ready_set",
    "derive_replan",
    "execute_plan",
    "parse_plan",
    "replay",
    "run_to_completion",
    "topological_order",
    "transition",
    "validate_plan",
]
