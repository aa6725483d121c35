"""Ready-set computation, deterministic dispatch, join semantics and the round loop.

A scheduling round is one dispatch wave plus the collection of every outcome of
that wave. Outcomes are applied in (completion time, node id) order, then the
recovery phase handles failed_retryable nodes, then join failures propagate.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional

from dagharness import lifecycle
from dagharness.clock import VirtualClock
from dagharness.context import ContextPartition
from dagharness.executor import ActionResult, Outcome, OutcomeKind, ScriptedExecutor, finalize, validate_contract
from dagharness.lifecycle import NodeState, Trigger
from dagharness.plan import JoinMode, NodeId, Plan, SideEffect, validate_plan
from dagharness.recovery import (
    ErrorKind,
    EscalationOrderViolation,
    Failure,
    RecoveryManager,
    RecoveryPolicy,
    ReplanRequested,
)
from dagharness.state import ExecutionState

SCHEDULABLE = frozenset({NodeState.PENDING, NodeState.READY})
SKIPPABLE = frozenset({NodeState.PENDING, NodeState.READY, NodeState.RUNNING, NodeState.FAILED_RETRYABLE})
DEAD = frozenset({NodeState.FAILED, NodeState.CANCELLED})


class EngineError(Exception):
    """An engine invariant broke. These indicate bugs, never plan failures."""


class TransitionBudgetExceeded(EngineError):
    pass


class ProgressViolation(EngineError):
    pass


class PlanNotValid(Exception):
    def __init__(self, report):
        self.report = report
        super().__init__(f"plan failed validation: {sorted(report.failed_checks)}")


@dataclass(frozen=True)
class ReadySet:
    members: tuple[NodeId, ...]
    round: int

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, node: object) -> bool:
        return node in self.members


# --------------------------------------------------------------------------- joins


def join_holds(state: ExecutionState, node: NodeId) -> bool:
    plan = state.plan
    preds = plan.preds[node]
    if plan.config[node].join is JoinMode.ANY_OF:
        return any(state.runtimes[p].state is NodeState.EXECUTED for p in preds)
    for p in preds:
        s = state.runtimes[p].state
        if s is NodeState.EXECUTED:
            continue
        group = plan.config[p].any_of_group
        if s is NodeState.SKIPPED and group is not None and state.group_satisfied(group):
            continue
        return False
    return True


def join_dead(state: ExecutionState, node: NodeId) -> bool:
    """True when the join can never hold again."""
    plan = state.plan
    preds = plan.preds[node]
    if not preds:
        return False
    if plan.config[node].join is JoinMode.ANY_OF:
        return all(state.runtimes[p].state in DEAD | {NodeState.SKIPPED} for p in preds)
    for p in preds:
        s = state.runtimes[p].state
        if s in DEAD:
            return True
        group = plan.config[p].any_of_group
        if s is NodeState.SKIPPED and not (group is not None and state.group_satisfied(group)):
            return True
    return False


def compute_ready_set(state: ExecutionState) -> ReadySet:
    members = [
        n for n in sorted(state.runtimes) if state.runtimes[n].state in SCHEDULABLE and join_holds(state, n)
    ]
    return ReadySet(tuple(members), state.round)


def update_ready_set_incremental(
    state: ExecutionState,
    newly_terminal: Iterable[NodeId],
    previous: Optional[ReadySet] = None,
    requeued: Iterable[NodeId] = (),
) -> ReadySet:
    """Update ``previous`` by looking only at successors of newly terminal nodes.

    ``requeued`` names nodes that re-entered pending or ready (retries,
    approvals). Without a previous set this falls back to a full computation.
    """
    if previous is None:
        return compute_ready_set(state)
    runtimes = state.runtimes
    members = {n for n in previous.members if runtimes[n].state in SCHEDULABLE}
    touched: set[NodeId] = set(requeued)
    succs = state.plan.succs
    for t in newly_terminal:
        touched.update(succs[t])
    for n in touched:
        if n not in members and runtimes[n].state in SCHEDULABLE and join_holds(state, n):
            members.add(n)
    return ReadySet(tuple(sorted(members)), state.round)


def _high_write_sibling_busy(state: ExecutionState, node: NodeId, selected: set) -> bool:
    if state.config(node).side_effect is not SideEffect.HIGH_WRITE:
        return False
    for s in state.plan.siblings(node):
        if s in selected or state.runtimes[s].state is NodeState.RUNNING:
            return True
    return False


def dispatch(state: ExecutionState, ready: ReadySet, clock: int = 0) -> list[NodeId]:
    """Dispatch every ready member in ascending id order, serializing high_write siblings."""
    chosen: list[NodeId] = []
    selected: set[NodeId] = set()
    for n in sorted(ready.members):
        rt = state.runtimes[n]
        if rt.state not in SCHEDULABLE:
            continue
        if not join_holds(state, n):
            raise EngineError(f"{n} selected for dispatch but its join does not hold")
        if _high_write_sibling_busy(state, n, selected):
            continue
        if rt.state is NodeState.PENDING:
            state.transition(n, Trigger.DEPS_SATISFIED, clock)
        state.commit("dispatch", {"node": n, "action": state.config(n).action, "attempt": rt.retries_used + 1}, clock)
        state.transition(n, Trigger.DISPATCH, clock)
        chosen.append(n)
        selected.add(n)
    return chosen


def sibling_skip(state: ExecutionState, node: NodeId, clock: int) -> list[NodeId]:
    skipped = []
    for s in state.plan.siblings(node):
        if state.runtimes[s].state in SKIPPABLE:
            state.transition(s, Trigger.SIBLING_COMPLETED, clock, by=node)
            skipped.append(s)
    return skipped


def propagate_join_failures(state: ExecutionState, clock: int) -> list[NodeId]:
    failed = []
    changed = True
    while changed:
        changed = False
        for n in sorted(state.runtimes):
            if state.runtimes[n].state is NodeState.PENDING and join_dead(state, n):
                state.transition(n, Trigger.STRUCTURAL_ERROR, clock, cause="join_failed")
                failed.append(n)
                changed = True
    return failed


def apply_outcome(
    state: ExecutionState,
    node: NodeId,
    outcome: Outcome,
    clock: int = 0,
    previous: Optional[ReadySet] = None,
) -> ReadySet:
    """Apply one outcome to a running node, then sibling skip and join failure.

    Returns the incrementally updated ready set.
    """
    rt = state.runtimes[node]
    if rt.state is NodeState.SKIPPED:
        state.commit("late_outcome", {"node": node, **outcome.to_doc()}, clock)
        return update_ready_set_incremental(state, (), previous)
    seen_terminal = set(state.newly_terminal)
    seen_requeued = set(state.requeued)
    state.commit("outcome", {"node": node, **outcome.to_doc()}, clock)
    if outcome.validation:
        state.commit(
            "contract_report",
            {
                "node": node,
                "passed": outcome.kind is OutcomeKind.SUCCESS,
                "payload": outcome.output.payload if outcome.output is not None else None,
                "results": [r.to_doc() for r in outcome.validation],
                "method": state.config(node).contract.method.value,
            },
            clock,
        )
    if outcome.kind is OutcomeKind.SUCCESS:
        state.transition(node, Trigger.ACTION_SUCCESS, clock)
        if state.config(node).any_of_group is not None:
            sibling_skip(state, node, clock)
    elif outcome.timed_out:
        state.transition(node, Trigger.EXEC_TIMEOUT, clock)
    elif outcome.kind is OutcomeKind.ESCALATE and not rt.approved:
        state.transition(node, Trigger.APPROVAL_REQUIRED, clock)
    elif outcome.failure is not None and outcome.failure.kind is ErrorKind.STRUCTURAL:
        state.transition(node, Trigger.STRUCTURAL_ERROR, clock, error=outcome.failure.kind.value)
    else:
        kind = outcome.failure.kind.value if outcome.failure is not None else "transient"
        state.transition(node, Trigger.TRANSIENT_ERROR, clock, error=kind)
    propagate_join_failures(state, clock)
    return update_ready_set_incremental(
        state, state.newly_terminal - seen_terminal, previous, state.requeued - seen_requeued
    )


# --------------------------------------------------------------------------- engine


Responder = Callable[[NodeId, int], Optional[tuple[str, int]]]


def approve_all(node: NodeId, clock: int) -> tuple[str, int]:
    return ("approve", 0)


def no_response(node: NodeId, clock: int) -> None:
    return None


@dataclass
class RunResult:
    state: ExecutionState
    rounds: int
    cardinalities: list[int]
    ready_sets: list[list[NodeId]]
    dispatches: int
    recovery_actions: dict[str, int]
    plan_versions: list[int]
    clock: int
    success: bool
    plan_contract_checked: bool
    log: Any = None
    replan_reason: Optional[str] = None

    def summary(self) -> dict:
        from dagharness.state import summarize

        return {
            "success": self.success,
            "rounds": self.rounds,
            "cardinalities": self.cardinalities,
            "ready_sets": self.ready_sets,
            "dispatches": self.dispatches,
            "recovery_actions": dict(sorted(self.recovery_actions.items())),
            "plan_versions": self.plan_versions,
            "clock_ms": self.clock,
            "plan_contract_checked": self.plan_contract_checked,
            "final_states": summarize(self.state),
        }


@dataclass
class _Event:
    time: int
    node: NodeId
    kind: str  # result | deadline | human
    result: Optional[ActionResult] = None
    decision: Optional[str] = None

    def __lt__(self, other: "_Event") -> bool:
        return (self.time, self.node) < (other.time, other.node)


class Engine:
    """Runs one plan version round by round. Replans are handled by :func:`execute_plan`."""

    def __init__(
        self,
        plan: Plan,
        executor: Any = None,
        recovery: Optional[RecoveryPolicy] = None,
        clock: Any = None,
        log: Any = None,
        predicates: Optional[Mapping[str, Callable]] = None,
        responder: Responder = no_response,
        human_timeout_ms: int = 60_000,
        approval_nodes: Iterable[NodeId] = (),
        validate: bool = True,
        state: Optional[ExecutionState] = None,
    ):
        if validate:
            report = validate_plan(plan, predicates)
            if not report.ok:
                raise PlanNotValid(report)
        self.executor = executor if executor is not None else ScriptedExecutor()
        self.recovery = recovery
        self.clock = clock if clock is not None else VirtualClock()
        self.predicates = predicates
        self.responder = responder
        self.approval_nodes = frozenset(approval_nodes)
        if state is None:
            state = ExecutionState.initial(plan, human_timeout_ms, log=log)
            state.commit(
                "replan",
                {
                    "from_version": None,
                    "to_version": plan.version,
                    "plan": plan.to_doc(),
                    "carried": {},
                    "reason": "initial",
                    "human_timeout_ms": human_timeout_ms,
                },
                self.clock.now(),
            )
        self.state = state
        self.manager = RecoveryManager(state)
        self.failures: dict[NodeId, list[dict]] = {}
        self.cardinalities: list[int] = []
        self.ready_sets: list[list[NodeId]] = []
        self.dispatches = 0
        self.replan_allowed = True
        self._ready: Optional[ReadySet] = None

    # ---------------------------------------------------------------- helpers

    def _bound(self) -> int:
        return lifecycle.transition_bound(self.state.plan.config[n].retry_budget for n in self.state.plan.nodes)

    def _exec_view(self, node: NodeId):
        state = self.state
        inputs = {p: state.runtimes[p].output for p in state.plan.preds[node] if state.runtimes[p].state is NodeState.EXECUTED}
        rt = state.runtimes[node]
        part = ContextPartition(
            exec={
                "inputs": inputs,
                "artifacts": {},
                "budget": {"retries_left": rt.retry_budget - rt.retries_used, "timeout_ms": rt.timeout_ms},
                "node": node,
            }
        )
        return part.exec_view()

    def _ready_now(self) -> ReadySet:
        st = self.state
        ready = update_ready_set_incremental(st, set(st.newly_terminal), self._ready, st.requeued)
        st.newly_terminal.clear()
        st.requeued.clear()
        return ReadySet(ready.members, st.round)

    # ---------------------------------------------------------------- round

    def step(self) -> bool:
        """Run one round. Returns False once every node is terminal."""
        st = self.state
        if st.all_terminal():
            return False
        before = st.transitions
        ready = self._ready_now()
        if not ready.members:
            raise ProgressViolation(f"no ready nodes but non-terminal nodes remain: {st!r}")
        now = self.clock.now()
        st.commit("round_boundary", {"round": st.round + 1, "ready": list(ready.members)}, now)
        self.cardinalities.append(len(ready))
        self.ready_sets.append(list(ready.members))

        events: list[_Event] = []
        for n in dispatch(st, ready, now):
            self.dispatches += 1
            cfg = st.config(n)
            result = self.executor.run(n, cfg, self._exec_view(n))
            if result.duration_ms > cfg.timeout_ms:
                heapq.heappush(events, _Event(st.runtimes[n].deadline + 1, n, "deadline", result))
            else:
                heapq.heappush(events, _Event(now + result.duration_ms, n, "result", result))
        self._ready = ReadySet(tuple(m for m in ready.members if st.runtimes[m].state in SCHEDULABLE), st.round)

        while events:
            ev = heapq.heappop(events)
            self.clock.advance_to(max(ev.time, self.clock.now()))
            t = self.clock.now()
            rt = st.runtimes[ev.node]
            if ev.kind == "human":
                if rt.state is not NodeState.WAITING_HUMAN:
                    continue
                if ev.decision == "approve":
                    st.transition(ev.node, Trigger.HUMAN_APPROVED, t)
                elif ev.decision == "cancel":
                    st.transition(ev.node, Trigger.HUMAN_CANCELLED, t)
                else:
                    trig = lifecycle.check_deadlines(rt, t)
                    if trig is not Trigger.HUMAN_TIMEOUT:
                        raise EngineError(f"human timeout event for {ev.node} fired early")
                    st.transition(ev.node, trig, t)
                propagate_join_failures(st, t)
                continue
            if ev.kind == "deadline":
                if rt.state is NodeState.RUNNING and lifecycle.check_deadlines(rt, t) is not Trigger.EXEC_TIMEOUT:
                    raise EngineError(f"deadline event for {ev.node} fired early")
                outcome = Outcome.fail(ErrorKind.TRANSIENT, f"exceeded timeout of {rt.timeout_ms} ms", timed_out=True)
            else:
                outcome = finalize(ev.result, st.config(ev.node), t, self.predicates)
                if outcome.kind is OutcomeKind.SUCCESS and ev.node in self.approval_nodes and not rt.approved:
                    outcome = Outcome(OutcomeKind.ESCALATE, failure=Failure(ErrorKind.TRANSIENT, "approval_required"))
            if outcome.failure is not None and (outcome.kind is not OutcomeKind.ESCALATE or rt.approved):
                self.failures.setdefault(ev.node, []).append(
                    {"kind": outcome.failure.kind.value, "detail": outcome.failure.detail, "clock": t}
                )
            was_waiting = st.runtimes[ev.node].state
            apply_outcome(st, ev.node, outcome, t)
            if was_waiting is NodeState.RUNNING and st.runtimes[ev.node].state is NodeState.WAITING_HUMAN:
                self._schedule_human(ev.node, t, events)

        self._recovery_phase()
        propagate_join_failures(st, self.clock.now())
        if st.transitions == before:
            raise ProgressViolation(f"round {st.round} applied no transition")
        if st.transitions > self._bound():
            raise TransitionBudgetExceeded(f"{st.transitions} transitions exceed bound {self._bound()}")
        return not st.all_terminal()

    def _schedule_human(self, node: NodeId, t: int, events: list) -> None:
        rt = self.state.runtimes[node]
        reply = self.responder(node, t)
        if reply is not None:
            decision, delay = reply
            if t + delay <= rt.human_deadline:
                heapq.heappush(events, _Event(t + delay, node, "human", decision=decision))
                return
        heapq.heappush(events, _Event(rt.human_deadline + 1, node, "human", decision=None))

    def _recovery_phase(self) -> None:
        st = self.state
        now = self.clock.now()
        wants_replan = []
        for n in st.nodes_in(NodeState.FAILED_RETRYABLE):
            if st.runtimes[n].state is not NodeState.FAILED_RETRYABLE:
                continue
            last = self.failures.get(n, [{"kind": "transient", "detail": ""}])[-1]
            failure = Failure(ErrorKind(last["kind"]), last["detail"])
            if self.recovery is None:
                self.manager.exhaust(n, now)
                continue
            diag = self.recovery.handle(self.manager, n, failure, self.failures, now)
            if diag is not None:
                wants_replan.append(n)
        if not wants_replan:
            return
        if not self.replan_allowed:
            for n in wants_replan:
                self.manager.exhaust(n, now)
            return
        reason = "; ".join(f"{n}: {self.failures[n][-1]['kind']}" for n in wants_replan)
        try:
            request = self.manager.request_replan(reason, now)
        except EscalationOrderViolation:
            for n in wants_replan:
                self.manager.exhaust(n, now)
            return
        raise request

    # ---------------------------------------------------------------- driver

    def run(self) -> int:
        """Run until every node is terminal; returns the number of rounds."""
        while self.step():
            pass
        return len(self.cardinalities)

    @property
    def blocked_arcs(self) -> int:
        """Count of ready -> blocked transitions; expected to stay zero."""
        log = self.state.log
        if log is None:
            return 0
        return sum(1 for r in log.records if r.kind == "transition" and r.body["trigger"] == Trigger.DEP_LOST.value)


def _recovery_counts(log) -> dict[str, int]:
    counts: dict[str, int] = {}
    if log is None:
        return counts
    for rec in log.records:
        if rec.kind == "recovery_action" and rec.body.get("result") == "applied":
            counts[rec.body["action"]] = counts.get(rec.body["action"], 0) + 1
    return counts


def plan_contract_status(state: ExecutionState, predicates=None) -> tuple[bool, bool]:
    """(holds, checked). Checked only for single-exit plans."""
    exits = state.plan.exits
    if len(exits) != 1:
        return True, False
    rt = state.runtimes[exits[0]]
    if rt.state is not NodeState.EXECUTED or rt.output is None:
        return False, True
    report = validate_contract(rt.output, state.plan.plan_contract, predicates)
    return all(r.passed for r in report), True


def _result(engine: Engine, log, versions, time_cap_ms, replan_reason=None) -> RunResult:
    st = engine.state
    complete = all(rt.state in (NodeState.EXECUTED, NodeState.SKIPPED) for rt in st.runtimes.values())
    holds, checked = plan_contract_status(st, engine.predicates)
    clock = engine.clock.now()
    success = complete and holds and (time_cap_ms is None or clock <= time_cap_ms)
    return RunResult(
        state=st,
        rounds=len(engine.cardinalities),
        cardinalities=list(engine.cardinalities),
        ready_sets=[list(r) for r in engine.ready_sets],
        dispatches=engine.dispatches,
        recovery_actions=_recovery_counts(log),
        plan_versions=list(versions),
        clock=clock,
        success=success,
        plan_contract_checked=checked,
        log=log,
        replan_reason=replan_reason,
    )


def run_to_completion(
    plan: Plan,
    executor: Any = None,
    recovery: Optional[RecoveryPolicy] = None,
    clock: Any = None,
    log: Any = None,
    time_cap_ms: Optional[int] = None,
    **engine_kw,
) -> RunResult:
    """Run a single plan version. ReplanRequested propagates to the caller."""
    engine = Engine(plan, executor, recovery, clock, log, **engine_kw)
    while engine.step():
        pass
    return _result(engine, log, [plan.version], time_cap_ms)


Replanner = Callable[[ExecutionState, ReplanRequested], tuple]


def fallback_replanner(state: ExecutionState, request: ReplanRequested) -> tuple:
    """Swap each failed node ``v`` for a fresh node ``v.alt`` running ``<action>.alt``.

    Edges and any_of membership are copied over; executed nodes are carried.
    """
    from dataclasses import replace as _replace

    plan = state.plan
    rename = {n: f"{n}.alt" for n in request.nodes}
    nodes = {rename.get(n, n) for n in plan.nodes}
    edges = {(rename.get(u, u), rename.get(v, v)) for u, v in plan.edges}
    config = {}
    for n in plan.nodes:
        cfg = plan.config[n]
        config[rename.get(n, n)] = _replace(cfg, action=f"{cfg.action}.alt") if n in rename else cfg
    return nodes, edges, config


def execute_plan(
    plan: Plan,
    executor: Any = None,
    recovery: Optional[RecoveryPolicy] = None,
    clock: Any = None,
    log: Any = None,
    replanner: Replanner = fallback_replanner,
    max_replans: int = 3,
    time_cap_ms: Optional[int] = None,
    **engine_kw,
) -> RunResult:
    """Run a plan, deriving new versions when recovery requests a replan."""
    from dagharness.plan import InvalidStructure, derive_replan

    clock = clock if clock is not None else VirtualClock()
    engine = Engine(plan, executor, recovery, clock, log, **engine_kw)
    versions = [plan.version]
    cards: list[int] = []
    ready_sets: list[list[NodeId]] = []
    dispatches = 0
    last_reason = None
    while True:
        try:
            while engine.step():
                pass
            break
        except ReplanRequested as req:
            last_reason = req.reason
            st = engine.state
            new_plan = None
            if len(versions) <= max_replans:
                try:
                    new_plan = derive_replan(st.plan, replanner(st, req), req.reason, engine.predicates)
                except InvalidStructure:
                    new_plan = None
            if new_plan is None:
                # refused: the old version stays authoritative and the requesters fail
                for n in st.nodes_in(NodeState.FAILED_RETRYABLE):
                    engine.manager.exhaust(n, clock.now())
                propagate_join_failures(st, clock.now())
                engine.replan_allowed = False
                continue
            carried = {
                n: st.runtimes[n].output
                for n in sorted(new_plan.nodes)
                if n in st.runtimes and st.runtimes[n].state is NodeState.EXECUTED
            }
            cards += engine.cardinalities
            ready_sets += engine.ready_sets
            dispatches += engine.dispatches
            st.commit(
                "replan",
                {
                    "from_version": st.plan.version,
                    "to_version": new_plan.version,
                    "plan": new_plan.to_doc(),
                    "carried": carried,
                    "reason": req.reason,
                    "human_timeout_ms": st.human_timeout_ms,
                },
                clock.now(),
            )
            versions.append(new_plan.version)
            engine = Engine(
                new_plan, executor, recovery, clock, log, state=st, validate=False, **_engine_passthrough(engine, engine_kw)
            )
    engine.cardinalities = cards + engine.cardinalities
    engine.ready_sets = ready_sets + engine.ready_sets
    engine.dispatches += dispatches
    return _result(engine, log, versions, time_cap_ms, last_reason)


def _engine_passthrough(engine: Engine, engine_kw: dict) -> dict:
    kw = dict(engine_kw)
    kw.pop("human_timeout_ms", None)
    return kw


__all__ = [
    "Engine",
    "EngineError",
    "Outcome",
    "OutcomeKind",
    "PlanNotValid",
    "ProgressViolation",
    "ReadySet",
    "ReplanRequested",
    "RunResult",
    "TransitionBudgetExceeded",
    "apply_outcome",
    "approve_all",
    "compute_ready_set",
    "dispatch",
    "execute_plan",
    "fallback_replanner",
    "join_dead",
    "join_holds",
    "no_response",
    "plan_contract_status",
    "propagate_join_failures",
    "run_to_completion",
    "update_ready_set_incremental",
]
