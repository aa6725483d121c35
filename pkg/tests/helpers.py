"""Shared generators and oracles for the test suite."""

from __future__ import annotations

import random
from dataclasses import replace

from dagharness.lifecycle import NodeState
from dagharness.plan import JoinMode, NodeConfig, OutputContract, SideEffect, field_exists, make_plan
from dagharness.state import ExecutionState

CONTRACT = OutputContract((field_exists("result"),))

# Transcribed by hand, independently of the module's table.
TRANSITION_FIXTURE = {
    ("pending", "deps_satisfied"): "ready",
    ("ready", "dispatch"): "running",
    ("ready", "dep_lost"): "blocked",
    ("ready", "sibling_completed"): "skipped",
    ("running", "action_success"): "executed",
    ("running", "transient_error"): "failed_retryable",
    ("running", "structural_error"): "failed",
    ("running", "approval_required"): "waiting_human",
    ("waiting_human", "human_approved"): "ready",
    ("waiting_human", "human_cancelled"): "cancelled",
    ("waiting_human", "human_timeout"): "cancelled",
    ("blocked", "dep_resolved"): "pending",
    ("failed_retryable", "retry"): "pending",
    ("failed_retryable", "sibling_completed"): "skipped",
    ("failed_retryable", "budget_exhausted"): "failed",
    # arcs stated outside the table
    ("running", "exec_timeout"): "failed",
    ("pending", "sibling_completed"): "skipped",
    ("running", "sibling_completed"): "skipped",
    ("pending", "structural_error"): "failed",
}


def random_plan(rng: random.Random, max_nodes: int = 30, any_of_prob: float = 0.2, plan_id: str = "rand", budgets=(0, 3)):
    """Random valid plan. Nodes are created in order; an any_of merge gets a
    fresh group of 2-3 candidates whose only successor is the merge."""
    target = rng.randint(1, max_nodes)
    config: dict[str, NodeConfig] = {}
    edges: set[tuple[str, str]] = set()
    pool: list[str] = []  # nodes later nodes may depend on
    groups = 0

    def new(preds, join=JoinMode.ALL_OF, group=None):
        nid = f"n{len(config):03d}"
        config[nid] = NodeConfig(
            action=f"a{len(config)}",
            contract=CONTRACT,
            join=join,
            retry_budget=rng.randint(*budgets),
            timeout_ms=rng.choice((200, 500, 1000)),
            side_effect=rng.choice((SideEffect.READ_ONLY, SideEffect.LOW_WRITE)),
            any_of_group=group,
        )
        for p in preds:
            edges.add((p, nid))
        return nid

    def pick_preds(k_max):
        if not pool or rng.random() < 0.15:
            return []
        k = rng.randint(1, min(k_max, len(pool)))
        return rng.sample(pool, k)

    while len(config) < target:
        room = target - len(config)
        if pool and room >= 3 and rng.random() < any_of_prob:
            groups += 1
            width = 2 if room < 4 else rng.choice((2, 3))
            cands = [new(pick_preds(2) or [rng.choice(pool)], group=f"g{groups}") for _ in range(width)]
            pool.append(new(cands, join=JoinMode.ANY_OF))
        else:
            pool.append(new(pick_preds(3)))
    return make_plan(plan_id, config, edges, CONTRACT)


FAULT_KINDS = ("transient", "contract_violation", "structural", "auth", "network timeout")


def random_faults(rng: random.Random, plan, fail_prob: float = 0.3) -> dict:
    script = {}
    for n in sorted(plan.nodes):
        if rng.random() >= fail_prob:
            continue
        ops = []
        for _ in range(rng.randint(1, 4)):
            r = rng.random()
            if r < 0.6:
                ops.append({"op": "fail", "kind": rng.choice(FAULT_KINDS)})
            elif r < 0.75:
                t = plan.config[n].timeout_ms
                ops.append({"op": "hang", "ms": rng.choice((t // 2, t, t + 1, 2 * t))})
            elif r < 0.85:
                ops.append({"op": "fail", "kind": "approval_required"})
            else:
                ops.append({"op": "succeed", "payload": rng.choice(({"result": 1}, {}))})
        script[n] = ops
        if rng.random() < 0.3:
            script[f"{n}@{plan.config[n].action}.patched"] = [{"op": "fail", "kind": "contract_violation"}]
    return script


def set_states(state: ExecutionState, states: dict) -> ExecutionState:
    for n, s in states.items():
        state.runtimes[n] = replace(state.runtimes[n], state=NodeState(s))
    return state


def oracle_all_of_ready(plan, executed: set) -> list:
    """Ready nodes of an all_of-only plan, straight from the definition."""
    return sorted(n for n in plan.nodes if n not in executed and all(p in executed for p in plan.preds[n]))


# ---------------------------------------------------------------- escalation fuzz


def _fail_once(state, node):
    from dagharness.executor import Outcome
    from dagharness.recovery import ErrorKind
    from dagharness.scheduler import ReadySet, apply_outcome, dispatch

    dispatch(state, ReadySet((node,), state.round), 0)
    apply_outcome(state, node, Outcome.fail(ErrorKind.TRANSIENT, "flaky"), 0)


def escalation_trace_violations(records) -> list[str]:
    """Scan a WAL for applied recovery actions that break the ladder order."""
    retried, patched, started, failed = set(), set(), set(), set()
    bad = []
    for rec in records:
        b = rec.body
        if rec.kind == "transition":
            if b["to"] == "running":
                started.add(b["node"])
            if b["to"] in ("failed_retryable", "failed") and b["node"] in started:
                failed.add(b["node"])
            elif b["to"] not in ("failed_retryable", "failed"):
                failed.discard(b["node"])
        elif rec.kind == "recovery_action" and b["result"] == "applied":
            if b["action"] == "local_retry":
                retried.add(b["node"])
            elif b["action"] == "local_patch":
                if b["node"] not in retried:
                    bad.append(f"seq {rec.seq}: patch of {b['node']} before any retry")
                patched.add(b["node"])
            elif b["action"] == "request_replan":
                if not failed:
                    bad.append(f"seq {rec.seq}: replan with no failed nodes")
                elif not failed <= patched:
                    bad.append(f"seq {rec.seq}: replan with unpatched {sorted(failed - patched)}")
    return bad


def escalation_fuzz(rng: random.Random, steps: int = 24) -> list[str]:
    """Drive RecoveryManager with a random operation sequence and compare every
    result against a shadow model. Returns mismatches plus trace violations."""
    from dagharness.persistence import WriteAheadLog
    from dagharness.recovery import (
        BudgetExhausted,
        EscalationOrderViolation,
        PatchLimitReached,
        RecoveryError,
        RecoveryManager,
        TopologyChangeAttempted,
    )

    k = rng.randint(1, 3)
    budgets = {f"v{i}": rng.randint(0, 3) for i in range(k)}
    config = {n: NodeConfig(action="act", contract=CONTRACT, retry_budget=b) for n, b in budgets.items()}
    plan = make_plan("esc", config, [], CONTRACT)
    log = WriteAheadLog(snapshot_every=None)
    state = ExecutionState.initial(plan, log=log)
    mgr = RecoveryManager(state)
    shadow = {n: {"rs": "pristine", "used": 0, "st": "pending"} for n in budgets}
    out: list[str] = []

    def expect(label, fn, want):
        try:
            fn()
            got = None
        except RecoveryError as exc:
            got = type(exc)
        if got is not want:
            out.append(f"{label}: expected {getattr(want, '__name__', want)}, got {getattr(got, '__name__', got)}")

    for _ in range(steps):
        n = rng.choice(sorted(budgets))
        s = shadow[n]
        op = rng.choices(("fail", "retry", "patch", "replan", "topology"), (4, 3, 3, 1, 1))[0]
        if op == "fail":
            if s["st"] == "pending":
                _fail_once(state, n)
                s["st"] = "fr"
            continue
        if op == "retry":
            if s["st"] != "fr":
                want = RecoveryError
            elif s["used"] >= budgets[n]:
                want = BudgetExhausted
            else:
                want = None
            expect(f"retry {n}", lambda: mgr.attempt_retry(n, 0), want)
            if want is BudgetExhausted:
                s["st"] = "failed"
            elif want is None:
                s.update(st="pending", used=s["used"] + 1, rs="retried" if s["rs"] == "pristine" else s["rs"])
        elif op == "patch":
            if s["st"] != "fr":
                want = RecoveryError
            elif s["rs"] == "pristine":
                want = EscalationOrderViolation
            elif s["rs"] == "patched":
                want = PatchLimitReached
            elif s["used"] >= budgets[n]:
                want = BudgetExhausted
            else:
                want = None
            expect(f"patch {n}", lambda: mgr.attempt_patch(n, {"action": "act.patched"}, 0), want)
            if want is None:
                s.update(st="pending", used=s["used"] + 1, rs="patched")
        elif op == "topology":
            want = RecoveryError if s["st"] != "fr" else TopologyChangeAttempted
            expect(f"topology {n}", lambda: mgr.attempt_patch(n, {"edges": [(n, n)]}, 0), want)
        else:
            failed = [m for m, t in shadow.items() if t["st"] in ("fr", "failed")]
            ok = failed and all(shadow[m]["rs"] == "patched" for m in failed)
            expect("replan", lambda: mgr.request_replan("fuzz", 0), None if ok else EscalationOrderViolation)
        for m, t in shadow.items():
            live = state.runtimes[m]
            st_map = {"pending": "pending", "fr": "failed_retryable", "failed": "failed"}
            if (live.state.value, live.recovery_state.value, live.retries_used) != (st_map[t["st"]], t["rs"], t["used"]):
                out.append(f"after {op} {n}: {m} live {live.state.value}/{live.recovery_state.value}/{live.retries_used} "
                           f"shadow {t}")
    return out + escalation_trace_violations(log.records)
