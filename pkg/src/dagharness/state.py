"""Execution state and the record fold shared by live execution and replay.

Every mutation of an :class:`ExecutionState` goes through :meth:`ExecutionState.commit`,
which appends the record to the write-ahead log (when one is attached) and only
then folds it into memory. Replay folds the same records, so a replayed state is
equal to the live one by construction.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Any, Iterable, Mapping, Optional

from dagharness import lifecycle
from dagharness.lifecycle import NodeRuntime, NodeState, RecoveryState, Trigger
from dagharness.plan import NodeConfig, NodeId, Plan, plan_from_doc, _parse_contract, JoinMode, SideEffect


class CorruptRecord(Exception):
    def __init__(self, seq: Optional[int], message: str):
        self.seq = seq
        super().__init__(f"corrupt record at seq {seq}: {message}")


def config_to_doc(node: NodeId, cfg: NodeConfig) -> dict:
    return cfg.to_doc(node)


def config_from_doc(doc: Mapping) -> NodeConfig:
    return NodeConfig(
        action=doc["action"],
        contract=_parse_contract(doc["contract"], "config.contract"),
        join=JoinMode(doc["join"]),
        retry_budget=doc["retry_budget"],
        timeout_ms=doc["timeout_ms"],
        side_effect=SideEffect(doc["side_effect"]),
        any_of_group=doc.get("any_of_group"),
    )


class ExecutionState:
    """Global node-state snapshot for one plan version plus the round counter."""

    def __init__(
        self,
        plan: Plan,
        runtimes: dict[NodeId, NodeRuntime],
        round: int = 0,
        overrides: Optional[dict[NodeId, NodeConfig]] = None,
        transitions: int = 0,
        human_timeout_ms: Optional[int] = None,
        log: Any = None,
    ):
        self.plan = plan
        self.runtimes = runtimes
        self.round = round
        self.overrides = dict(overrides or {})
        self.transitions = transitions
        self.human_timeout_ms = human_timeout_ms
        self.log = log
        # scratch sets consumed by the incremental ready-set update
        self.newly_terminal: set[NodeId] = set()
        self.requeued: set[NodeId] = set()

    @classmethod
    def initial(
        cls,
        plan: Plan,
        human_timeout_ms: Optional[int] = None,
        carried: Optional[Mapping[NodeId, Any]] = None,
        round: int = 0,
        log: Any = None,
    ) -> "ExecutionState":
        carried = carried or {}
        runtimes = {}
        for n in sorted(plan.nodes):
            cfg = plan.config[n]
            rt = NodeRuntime(n, cfg.retry_budget, cfg.timeout_ms, human_timeout_ms=human_timeout_ms)
            if n in carried:
                rt = replace(rt, state=NodeState.EXECUTED, contract_passed=True, output=carried[n])
            runtimes[n] = rt
        return cls(plan, runtimes, round=round, human_timeout_ms=human_timeout_ms, log=log)

    @classmethod
    def from_replan_record(cls, body: Mapping, log: Any = None) -> "ExecutionState":
        """Build the state installed by a replan record (the first record of every log is one)."""
        plan = plan_from_doc(body["plan"])
        state = cls.initial(plan, body.get("human_timeout_ms"), carried=body.get("carried") or {}, log=log)
        state.requeued = set(plan.nodes)
        return state

    # ------------------------------------------------------------------ queries

    def config(self, node: NodeId) -> NodeConfig:
        return self.overrides.get(node) or self.plan.config[node]

    def state_of(self, node: NodeId) -> NodeState:
        return self.runtimes[node].state

    def nodes_in(self, *states: NodeState) -> list[NodeId]:
        wanted = set(states)
        return [n for n in sorted(self.runtimes) if self.runtimes[n].state in wanted]

    def all_terminal(self) -> bool:
        return all(rt.state in lifecycle.TERMINAL for rt in self.runtimes.values())

    def group_satisfied(self, group: str) -> bool:
        return any(self.runtimes[m].state is NodeState.EXECUTED for m in self.plan.groups.get(group, ()))

    # ------------------------------------------------------------------ mutation

    def commit(self, kind: str, body: dict, clock: int):
        """Write-ahead: the record is appended before it is applied."""
        record = None
        if self.log is not None:
            version = body["to_version"] if kind == "replan" else self.plan.version
            record = self.log.append(kind, body, clock, self.plan.id, version)
        # fold the logged form of the body so live and replayed states share one source
        self.apply_record(kind, record.body if record is not None else body, clock, seq=getattr(record, "seq", None))
        if record is not None:
            self.log.after_apply(record, self)
        return record

    def transition(self, node: NodeId, trigger: Trigger, clock: int, **extra) -> NodeRuntime:
        rt = self.runtimes[node]
        target = lifecycle.transition(rt, trigger, clock).state  # raises before anything is logged
        body = {"node": node, "from": rt.state.value, "to": target.value, "trigger": trigger.value}
        body.update(extra)
        self.commit("transition", body, clock)
        return self.runtimes[node]

    def apply_record(self, kind: str, body: Mapping, clock: int, seq: Optional[int] = None) -> None:
        if kind == "transition":
            node = body["node"]
            if node not in self.runtimes:
                raise CorruptRecord(seq, f"unknown node {node!r}")
            rt = self.runtimes[node]
            if rt.state.value != body["from"]:
                raise CorruptRecord(seq, f"{node} is {rt.state.value}, record says {body['from']}")
            new = lifecycle.transition(rt, Trigger(body["trigger"]), clock)
            if new.state.value != body["to"]:
                raise CorruptRecord(seq, f"{node} folded to {new.state.value}, record says {body['to']}")
            self.runtimes[node] = new
            self.transitions += 1
            if new.state in lifecycle.TERMINAL:
                self.newly_terminal.add(node)
            elif new.state is NodeState.PENDING or new.state is NodeState.READY:
                self.requeued.add(node)
        elif kind == "contract_report":
            node = body["node"]
            rt = self.runtimes[node]
            passed = bool(body["passed"])
            self.runtimes[node] = replace(rt, contract_passed=passed, output=body.get("payload") if passed else None)
        elif kind == "recovery_action":
            if body.get("result") != "applied":
                return
            node = body.get("node")
            action = body["action"]
            if action == "local_retry":
                rt = self.runtimes[node]
                if rt.recovery_state is RecoveryState.PRISTINE:
                    self.runtimes[node] = replace(rt, recovery_state=RecoveryState.RETRIED)
            elif action == "local_patch":
                cfg = config_from_doc(body["config"])
                self.overrides[node] = cfg
                rt = self.runtimes[node]
                self.runtimes[node] = replace(
                    rt,
                    recovery_state=RecoveryState.PATCHED,
                    retry_budget=cfg.retry_budget,
                    timeout_ms=cfg.timeout_ms,
                )
        elif kind == "replan":
            plan = plan_from_doc(body["plan"])
            self.human_timeout_ms = body.get("human_timeout_ms", self.human_timeout_ms)
            fresh = ExecutionState.initial(
                plan, self.human_timeout_ms, carried=body.get("carried") or {}, round=self.round
            )
            self.plan = plan
            self.runtimes = fresh.runtimes
            self.overrides = {}
            self.transitions = 0
            self.newly_terminal = set()
            self.requeued = set(plan.nodes)
        elif kind == "round_boundary":
            self.round = int(body["round"])
        # dispatch / outcome / late_outcome records are informational

    # ------------------------------------------------------------------ (de)serialization

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_doc(),
            "round": self.round,
            "transitions": self.transitions,
            "human_timeout_ms": self.human_timeout_ms,
            "overrides": {n: config_to_doc(n, c) for n, c in sorted(self.overrides.items())},
            "runtimes": {n: self.runtimes[n].to_dict() for n in sorted(self.runtimes)},
        }

    @classmethod
    def from_dict(cls, d: Mapping, log: Any = None) -> "ExecutionState":
        plan = plan_from_doc(d["plan"])
        return cls(
            plan,
            {n: NodeRuntime.from_dict(r) for n, r in d["runtimes"].items()},
            round=d["round"],
            overrides={n: config_from_doc(c) for n, c in d["overrides"].items()},
            transitions=d["transitions"],
            human_timeout_ms=d.get("human_timeout_ms"),
            log=log,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExecutionState):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        counts: dict[str, int] = {}
        for rt in self.runtimes.values():
            counts[rt.state.value] = counts.get(rt.state.value, 0) + 1
        return f"ExecutionState({self.plan.id} v{self.plan.version}, round={self.round}, {counts})"


def summarize(state: ExecutionState) -> dict[str, str]:
    return {n: rt.state.value for n, rt in sorted(state.runtimes.items())}


def failed_nodes(state: ExecutionState) -> list[NodeId]:
    """Nodes that failed after running; nodes failed by join propagation never ran."""
    return [
        n
        for n in state.nodes_in(NodeState.FAILED_RETRYABLE, NodeState.FAILED)
        if state.runtimes[n].started_at is not None
    ]


def carried_outputs(state: ExecutionState, nodes: Iterable[NodeId]) -> dict[NodeId, Any]:
    return {n: state.runtimes[n].output for n in sorted(nodes)}
