"""Failure classification, rule-based diagnosis and the retry -> patch -> replan ladder.

The per-node recovery state (pristine, retried, patched) is the only thing that
decides which level is permitted. Rejected attempts are logged and raised; they
never change state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Optional

from dagharness.context import ContextPartition, ContextViolation, GuardedView
from dagharness.lifecycle import NodeState, RecoveryState, Trigger
from dagharness.plan import NodeConfig, NodeId
from dagharness.state import ExecutionState, config_to_doc, failed_nodes


class ErrorKind(str, Enum):
    TRANSIENT = "transient"
    CONTRACT_VIOLATION = "contract_violation"
    AUTH_ERROR = "auth_error"
    STRUCTURAL = "structural"


@dataclass(frozen=True)
class Failure:
    kind: ErrorKind
    detail: str = ""


# first match wins; the order matters for strings like "contract timeout"
_RULES: tuple[tuple[ErrorKind, tuple[str, ...]], ...] = (
    (ErrorKind.CONTRACT_VIOLATION, ("contract", "validation")),
    (ErrorKind.AUTH_ERROR, ("auth", "unauthorized", "forbidden", "permission")),
    (ErrorKind.TRANSIENT, ("timeout", "network", "rate_limit", "rate-limit", "transient", "connection", "unavailable")),
    (ErrorKind.STRUCTURAL, ("missing", "dependency", "invalid_plan", "structural")),
)


def classify_error(raw: Any) -> ErrorKind:
    """Map a raw executor failure to an ErrorKind. Unknown failures are structural."""
    if isinstance(raw, ErrorKind):
        return raw
    if isinstance(raw, Failure):
        return raw.kind
    text = str(raw).lower()
    for kind, needles in _RULES:
        if any(n in text for n in needles):
            return kind
    return ErrorKind.STRUCTURAL


class RecoveryAction(str, Enum):
    LOCAL_RETRY = "local_retry"
    LOCAL_PATCH = "local_patch"
    REQUEST_REPLAN = "request_replan"

    @property
    def level(self) -> int:
        return {"local_retry": 1, "local_patch": 2, "request_replan": 3}[self.value]


ALL_LEVELS = frozenset(RecoveryAction)

_RECOMMEND = {
    ErrorKind.TRANSIENT: (RecoveryAction.LOCAL_RETRY, 1.0, "transient fault; same inputs should succeed"),
    ErrorKind.CONTRACT_VIOLATION: (RecoveryAction.LOCAL_PATCH, 0.8, "output shape wrong; node configuration suspect"),
    ErrorKind.AUTH_ERROR: (RecoveryAction.LOCAL_PATCH, 0.8, "credentials or permissions misconfigured"),
    ErrorKind.STRUCTURAL: (RecoveryAction.REQUEST_REPLAN, 0.6, "plan structure cannot produce this node's inputs"),
}


def permitted_level(recovery_state: RecoveryState) -> RecoveryAction:
    return {
        RecoveryState.PRISTINE: RecoveryAction.LOCAL_RETRY,
        RecoveryState.RETRIED: RecoveryAction.LOCAL_PATCH,
        RecoveryState.PATCHED: RecoveryAction.REQUEST_REPLAN,
    }[recovery_state]


@dataclass(frozen=True)
class Diagnosis:
    node: NodeId
    kind: ErrorKind
    cause: str
    action: RecoveryAction
    confidence: float
    recommended: RecoveryAction
    detail: str = ""

    def to_doc(self) -> dict:
        return {
            "node": self.node,
            "kind": self.kind.value,
            "cause": self.cause,
            "action": self.action.value,
            "confidence": self.confidence,
            "recommended": self.recommended.value,
            "detail": self.detail,
        }


def diagnose(kind: ErrorKind, node: NodeId, diag_context: Mapping) -> Diagnosis:
    recommended, confidence, cause = _RECOMMEND[kind]
    states = diag_context["recovery_states"]
    current = RecoveryState(states.get(node, RecoveryState.PRISTINE))
    cap = permitted_level(current)
    action = recommended if recommended.level <= cap.level else cap
    detail = ""
    if "failure" in diag_context:
        detail = str(diag_context["failure"].get("detail", ""))
    return Diagnosis(node, kind, cause, action, confidence, recommended, detail)


class RecoveryError(Exception):
    pass


class BudgetExhausted(RecoveryError):
    def __init__(self, node: NodeId):
        self.node = node
        super().__init__(f"{node}: retry budget exhausted")


class EscalationOrderViolation(RecoveryError):
    pass


class TopologyChangeAttempted(RecoveryError):
    pass


class PatchLimitReached(RecoveryError):
    pass


class ReplanRequested(Exception):
    def __init__(self, reason: str, nodes: Iterable[NodeId] = ()):
        self.reason = reason
        self.nodes = tuple(sorted(nodes))
        super().__init__(f"replan requested: {reason}")


_TOPOLOGY_KEYS = {"edges", "nodes", "predecessors", "successors", "preds", "succs"}


class RecoveryManager:
    """The three recovery operations, gated on the per-node recovery state."""

    def __init__(self, state: ExecutionState):
        self.state = state
        self.history: list[tuple[Optional[NodeId], RecoveryAction, str]] = []

    def already_patched(self, node: NodeId) -> bool:
        # recovery state resets on replan, so "patched" means patched in this version
        return self.state.runtimes[node].recovery_state is RecoveryState.PATCHED

    def _log(self, node, action: RecoveryAction, result: str, clock: int, **extra) -> None:
        body = {"node": node, "action": action.value, "result": result}
        body.update(extra)
        self.state.commit("recovery_action", body, clock)
        self.history.append((node, action, result))

    def _require_fr(self, node: NodeId) -> None:
        st = self.state.state_of(node)
        if st is not NodeState.FAILED_RETRYABLE:
            raise RecoveryError(f"{node} is {st.value}, not failed_retryable")

    def exhaust(self, node: NodeId, clock: int) -> None:
        self.state.transition(node, Trigger.BUDGET_EXHAUSTED, clock)

    def attempt_retry(self, node: NodeId, clock: int) -> str:
        self._require_fr(node)
        rt = self.state.runtimes[node]
        if rt.retries_used >= rt.retry_budget:
            self._log(node, RecoveryAction.LOCAL_RETRY, "rejected", clock, why="budget_exhausted")
            self.exhaust(node, clock)
            raise BudgetExhausted(node)
        self._log(node, RecoveryAction.LOCAL_RETRY, "applied", clock)
        self.state.transition(node, Trigger.RETRY, clock)
        return "retried"

    def attempt_patch(self, node: NodeId, new_config: Any, clock: int) -> str:
        self._require_fr(node)
        rt = self.state.runtimes[node]
        current = self.state.config(node)
        if isinstance(new_config, Mapping):
            if _TOPOLOGY_KEYS & set(new_config):
                self._log(node, RecoveryAction.LOCAL_PATCH, "rejected", clock, why="topology")
                raise TopologyChangeAttempted(f"{node}: patch carries topology keys {sorted(_TOPOLOGY_KEYS & set(new_config))}")
            new_config = replace(current, **dict(new_config))
        if not isinstance(new_config, NodeConfig):
            raise TypeError("patch must be a NodeConfig or a mapping of config fields")
        if new_config.join is not current.join or new_config.any_of_group != current.any_of_group:
            self._log(node, RecoveryAction.LOCAL_PATCH, "rejected", clock, why="topology")
            raise TopologyChangeAttempted(f"{node}: join mode and group membership are structural")
        if rt.recovery_state.level < RecoveryState.RETRIED.level:
            self._log(node, RecoveryAction.LOCAL_PATCH, "rejected", clock, why="escalation_order")
            raise EscalationOrderViolation(f"{node}: patch requires a prior retry")
        if self.already_patched(node):
            self._log(node, RecoveryAction.LOCAL_PATCH, "rejected", clock, why="patch_limit")
            raise PatchLimitReached(f"{node}: already patched in plan version {self.state.plan.version}")
        if new_config.retry_budget > current.retry_budget:
            self._log(node, RecoveryAction.LOCAL_PATCH, "rejected", clock, why="budget_increase")
            raise RecoveryError(f"{node}: a patch may not raise the retry budget")
        if rt.retries_used >= new_config.retry_budget:
            self._log(node, RecoveryAction.LOCAL_PATCH, "rejected", clock, why="budget_exhausted")
            raise BudgetExhausted(node)
        self._log(node, RecoveryAction.LOCAL_PATCH, "applied", clock, config=config_to_doc(node, new_config))
        self.state.transition(node, Trigger.RETRY, clock)
        return "patched"

    def request_replan(self, reason: str, clock: int) -> ReplanRequested:
        failed = failed_nodes(self.state)
        if not failed:
            self._log(None, RecoveryAction.REQUEST_REPLAN, "rejected", clock, why="no_failed_nodes", reason=reason)
            raise EscalationOrderViolation("replan requested with no failed nodes")
        unpatched = [n for n in failed if self.state.runtimes[n].recovery_state is not RecoveryState.PATCHED]
        if unpatched:
            self._log(None, RecoveryAction.REQUEST_REPLAN, "rejected", clock, why="escalation_order", reason=reason, nodes=unpatched)
            raise EscalationOrderViolation(f"failed nodes not yet patched: {unpatched}")
        self._log(None, RecoveryAction.REQUEST_REPLAN, "applied", clock, reason=reason, nodes=failed)
        return ReplanRequested(reason, failed)


Patcher = Callable[[NodeId, NodeConfig, Diagnosis], Any]


def default_patcher(node: NodeId, cfg: NodeConfig, diagnosis: Diagnosis) -> NodeConfig:
    return replace(cfg, action=f"{cfg.action}.patched")


@dataclass
class RecoveryPolicy:
    """Decides, per failed node, which recovery operation to run.

    Starts from the diagnosis and climbs the ladder when the chosen level is not
    feasible. Replan requests are collected and issued after every other
    failed_retryable node in the round has been handled.
    """

    levels: frozenset = ALL_LEVELS
    patcher: Patcher = default_patcher
    annotations: dict = field(default_factory=dict)

    def diag_context(self, state: ExecutionState, failures: Mapping[NodeId, list]) -> ContextPartition:
        return ContextPartition(
            diag={
                "failure_history": {n: list(v) for n, v in failures.items()},
                "recovery_states": {n: rt.recovery_state.value for n, rt in state.runtimes.items()},
                "plan_versions": list(range(1, state.plan.version + 1)),
                "annotations": dict(self.annotations),
            }
        )

    def handle(
        self,
        manager: RecoveryManager,
        node: NodeId,
        failure: Failure,
        failures: Mapping[NodeId, list],
        clock: int,
    ) -> Optional[Diagnosis]:
        """Returns the diagnosis when the node should join a replan request."""
        state = manager.state
        view: GuardedView = self.diag_context(state, failures).diag_view(
            {"node": node, "kind": failure.kind.value, "detail": failure.detail}
        )
        diag = diagnose(failure.kind, node, view)
        state.commit("recovery_action", {"node": node, "action": "diagnose", "result": "recorded", "diagnosis": diag.to_doc()}, clock)
        rt = state.runtimes[node]
        enabled = sorted(self.levels, key=lambda a: a.level)
        # start at the diagnosed level, or the highest enabled level below it, then climb
        below = [a for a in enabled if a.level <= diag.action.level]
        start = below[-1].level if below else diag.action.level
        for action in enabled:
            if action.level < start:
                continue
            if action is RecoveryAction.LOCAL_RETRY:
                if rt.retries_used < rt.retry_budget:
                    manager.attempt_retry(node, clock)
                    return None
            elif action is RecoveryAction.LOCAL_PATCH:
                if (
                    rt.recovery_state.level >= RecoveryState.RETRIED.level
                    and not manager.already_patched(node)
                    and rt.retries_used < rt.retry_budget
                ):
                    manager.attempt_patch(node, self.patcher(node, state.config(node), diag), clock)
                    return None
            elif action is RecoveryAction.REQUEST_REPLAN:
                if rt.recovery_state is RecoveryState.PATCHED:
                    return diag
        manager.exhaust(node, clock)
        return None


__all__ = [
    "ALL_LEVELS",
    "BudgetExhausted",
    "ContextViolation",
    "Diagnosis",
    "ErrorKind",
    "EscalationOrderViolation",
    "Failure",
    "PatchLimitReached",
    "RecoveryAction",
    "RecoveryError",
    "RecoveryManager",
    "RecoveryPolicy",
    "ReplanRequested",
    "TopologyChangeAttempted",
    "classify_error",
    "default_patcher",
    "diagnose",
    "permitted_level",
]
