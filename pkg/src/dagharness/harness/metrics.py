from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

from dagharness.lifecycle import NodeState
from dagharness.persistence import WriteAheadLog, replay
from dagharness.scheduler import plan_contract_status


@dataclass
class RunMetrics:
    success: bool
    rounds: int
    sim_time_ms: int
    dispatches: int
    recovery: dict = field(default_factory=dict)
    plan_versions: list = field(default_factory=lambda: [1])
    cardinalities: list = field(default_factory=list)
    contract_rate: float = 1.0
    error: Optional[str] = None

    def to_doc(self) -> dict:
        return asdict(self)


def metrics_from_trace(log: WriteAheadLog, time_cap_ms: Optional[int] = None) -> RunMetrics:
    """Rebuild run metrics purely from the WAL."""
    records = log.records
    cards = [len(r.body["ready"]) for r in records if r.kind == "round_boundary"]
    dispatches = sum(1 for r in records if r.kind == "dispatch")
    recovery: dict[str, int] = {}
    for r in records:
        if r.kind == "recovery_action" and r.body.get("result") == "applied":
            recovery[r.body["action"]] = recovery.get(r.body["action"], 0) + 1
    versions = sorted({r.plan_version for r in records})
    state = replay(log, use_snapshots=False)
    clock = records[-1].clock if records else 0
    complete = all(rt.state in (NodeState.EXECUTED, NodeState.SKIPPED) for rt in state.runtimes.values())
    holds, _ = plan_contract_status(state)
    success = complete and holds and (time_cap_ms is None or clock <= time_cap_ms)
    required = [n for n, rt in state.runtimes.items() if rt.state is not NodeState.SKIPPED]
    rate = sum(1 for n in required if state.runtimes[n].state is NodeState.EXECUTED) / len(required) if required else 1.0
    return RunMetrics(success, len(cards), clock, dispatches, recovery, versions, cards, rate)
