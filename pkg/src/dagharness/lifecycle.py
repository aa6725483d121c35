"""Per-node state machine: states, triggers, the legal transition relation and deadlines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Optional


class NodeState(str, Enum):
    PENDING = "pending"
    READY = "ready"
    RUNNING = "running"
    WAITING_HUMAN = "waiting_human"
    BLOCKED = "blocked"
    EXECUTED = "executed"
    FAILED_RETRYABLE = "failed_retryable"
    FAILED = "failed"
    CANCELLED = "cancelled"
    SKIPPED = "skipped"


TERMINAL = frozenset({NodeState.EXECUTED, NodeState.FAILED, NodeState.CANCELLED, NodeState.SKIPPED})
NON_TERMINAL = frozenset(NodeState) - TERMINAL


class Trigger(str, Enum):
    DEPS_SATISFIED = "deps_satisfied"
    DISPATCH = "dispatch"
    DEP_LOST = "dep_lost"
    SIBLING_COMPLETED = "sibling_completed"
    ACTION_SUCCESS = "action_success"
    TRANSIENT_ERROR = "transient_error"
    STRUCTURAL_ERROR = "structural_error"
    APPROVAL_REQUIRED = "approval_required"
    HUMAN_APPROVED = "human_approved"
    HUMAN_CANCELLED = "human_cancelled"
    HUMAN_TIMEOUT = "human_timeout"
    DEP_RESOLVED = "dep_resolved"
    RETRY = "retry"
    BUDGET_EXHAUSTED = "budget_exhausted"
    EXEC_TIMEOUT = "exec_timeout"


class RecoveryState(str, Enum):
    PRISTINE = "pristine"
    RETRIED = "retried"
    PATCHED = "patched"

    @property
    def level(self) -> int:
        return _RECOVERY_LEVEL[self]


_RECOVERY_LEVEL = {RecoveryState.PRISTINE: 0, RecoveryState.RETRIED: 1, RecoveryState.PATCHED: 2}

S, T = NodeState, Trigger

# Rows of the published transition table, in table order.
TABLE_ROWS: tuple[tuple[NodeState, Trigger, NodeState], ...] = (
    (S.PENDING, T.DEPS_SATISFIED, S.READY),
    (S.READY, T.DISPATCH, S.RUNNING),
    (S.READY, T.DEP_LOST, S.BLOCKED),
    (S.READY, T.SIBLING_COMPLETED, S.SKIPPED),
    (S.RUNNING, T.ACTION_SUCCESS, S.EXECUTED),
    (S.RUNNING, T.TRANSIENT_ERROR, S.FAILED_RETRYABLE),
    (S.RUNNING, T.STRUCTURAL_ERROR, S.FAILED),
    (S.RUNNING, T.APPROVAL_REQUIRED, S.WAITING_HUMAN),
    (S.WAITING_HUMAN, T.HUMAN_APPROVED, S.READY),
    (S.WAITING_HUMAN, T.HUMAN_CANCELLED, S.CANCELLED),
    (S.WAITING_HUMAN, T.HUMAN_TIMEOUT, S.CANCELLED),
    (S.BLOCKED, T.DEP_RESOLVED, S.PENDING),
    (S.FAILED_RETRYABLE, T.RETRY, S.PENDING),
    (S.FAILED_RETRYABLE, T.SIBLING_COMPLETED, S.SKIPPED),
    (S.FAILED_RETRYABLE, T.BUDGET_EXHAUSTED, S.FAILED),
)

# Arcs required by the bounded-execution and join rules but absent from the table:
# deadline expiry, sibling skip of pending/running candidates, and failure of a
# pending node whose join can no longer be satisfied.
PROSE_ROWS: tuple[tuple[NodeState, Trigger, NodeState], ...] = (
    (S.RUNNING, T.EXEC_TIMEOUT, S.FAILED),
    (S.PENDING, T.SIBLING_COMPLETED, S.SKIPPED),
    (S.RUNNING, T.SIBLING_COMPLETED, S.SKIPPED),
    (S.PENDING, T.STRUCTURAL_ERROR, S.FAILED),
)

LEGAL: dict[tuple[NodeState, Trigger], NodeState] = {(a, g): b for a, g, b in TABLE_ROWS + PROSE_ROWS}

del S, T


class LifecycleError(Exception):
    pass


class IllegalTransition(LifecycleError):
    def __init__(self, state: NodeState, trigger: Trigger, reason: str = ""):
        self.state = state
        self.trigger = trigger
        msg = f"illegal transition from {state.value} on {trigger.value}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class TerminalStateMutation(LifecycleError):
    def __init__(self, state: NodeState, trigger: Trigger):
        self.state = state
        self.trigger = trigger
        super().__init__(f"{state.value} is terminal; {trigger.value} rejected")


@dataclass(frozen=True)
class NodeRuntime:
    node: str
    retry_budget: int
    timeout_ms: int
    state: NodeState = NodeState.PENDING
    retries_used: int = 0
    started_at: Optional[int] = None
    deadline: Optional[int] = None
    human_deadline: Optional[int] = None
    human_timeout_ms: Optional[int] = None
    recovery_state: RecoveryState = RecoveryState.PRISTINE
    contract_passed: bool = False
    approved: bool = False
    output: Optional[dict] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["state"] = self.state.value
        d["recovery_state"] = self.recovery_state.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NodeRuntime":
        d = dict(d)
        d["state"] = NodeState(d["state"])
        d["recovery_state"] = RecoveryState(d["recovery_state"])
        return cls(**d)


def is_terminal(state: NodeState) -> bool:
    return state in TERMINAL


def transition(rt: NodeRuntime, trigger: Trigger, clock: int) -> NodeRuntime:
    """Apply one trigger; returns the updated runtime or raises."""
    if rt.state in TERMINAL:
        raise TerminalStateMutation(rt.state, trigger)
    target = LEGAL.get((rt.state, trigger))
    if target is None:
        raise IllegalTransition(rt.state, trigger)

    if trigger is Trigger.DISPATCH:
        return replace(rt, state=target, started_at=clock, deadline=clock + rt.timeout_ms, contract_passed=False)
    if trigger is Trigger.ACTION_SUCCESS and not rt.contract_passed:
        raise IllegalTransition(rt.state, trigger, "output contract not stamped as passed")
    if trigger is Trigger.RETRY:
        if rt.retries_used >= rt.retry_budget:
            raise IllegalTransition(rt.state, trigger, "retry budget exhausted")
        return replace(rt, state=target, retries_used=rt.retries_used + 1)
    if trigger is Trigger.APPROVAL_REQUIRED:
        if rt.human_timeout_ms is None:
            raise IllegalTransition(rt.state, trigger, "no human timeout configured")
        return replace(rt, state=target, human_deadline=clock + rt.human_timeout_ms)
    if trigger is Trigger.HUMAN_APPROVED:
        return replace(rt, state=target, approved=True)
    return replace(rt, state=target)


def check_deadlines(rt: NodeRuntime, clock: int) -> Optional[Trigger]:
    """Deadline comparison is strict: reaching the deadline exactly does not fire."""
    if rt.state is NodeState.RUNNING and rt.deadline is not None and clock > rt.deadline:
        return Trigger.EXEC_TIMEOUT
    if rt.state is NodeState.WAITING_HUMAN and rt.human_deadline is not None and clock > rt.human_deadline:
        return Trigger.HUMAN_TIMEOUT
    return None


def transition_bound(budgets) -> int:
    """Attempt-aware cap on transitions for one plan version.

    Every attempt visits each non-terminal state at most once, and each node
    takes one closing transition into a terminal state.
    """
    budgets = list(budgets)
    return sum(len(NON_TERMINAL) * (b + 1) + 1 for b in budgets)


def literal_transition_bound(node_count: int) -> int:
    """|V| * |non-terminal states|, the bound as published."""
    return node_count * len(NON_TERMINAL)
