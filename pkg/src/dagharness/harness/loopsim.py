"""Single-ready-unit loop baselines simulated in virtual time.

One node runs per step. The chooser either picks uniformly among eligible steps
(no plan) or follows the plan's topological order. After failures a loop may
lapse and attempt a step whose inputs are not ready yet; such attempts fail.
"""

from __future__ import annotations

import random
from typing import Optional

from dagharness.executor import ActionResult, OutcomeKind, finalize, validate_contract
from dagharness.harness.groups import GROUPS, MAX_LAPSE, Group
from dagharness.harness.metrics import RunMetrics
from dagharness.harness.tasks import TaskSpec
from dagharness.plan import JoinMode, topological_order


class StepCapExceeded(Exception):
    pass


def simulate_loop(group: Group, task: TaskSpec, seed: int) -> RunMetrics:
    cfg = GROUPS[Group(group)]
    if cfg.scheduler != "loop":
        raise ValueError(f"{group} is not a loop group")
    plan = task.plan
    rng = random.Random(seed)
    script = task.fault_script()
    order = topological_order(plan)
    position = {n: i for i, n in enumerate(order)}

    done: dict[str, dict] = {}
    dropped: set[str] = set()
    switched: set[str] = set()
    streak: dict[str, int] = {}
    failures = 0
    steps = 0
    clock = 0
    fallbacks = 0

    def settled(n: str) -> bool:
        return n in done or n in dropped

    def eligible(n: str) -> bool:
        if settled(n):
            return False
        preds = plan.preds[n]
        if plan.config[n].join is JoinMode.ANY_OF:
            return any(p in done for p in preds)
        return all(settled(p) for p in preds)

    error: Optional[str] = None
    while not all(settled(n) for n in plan.nodes):
        if steps >= task.step_cap:
            error = "StepCapExceeded"
            break
        steps += 1
        ready = [n for n in order if eligible(n)]
        blocked = [n for n in order if not settled(n) and not eligible(n)]
        lapse_p = min(MAX_LAPSE, cfg.lapse_rate * failures)
        if blocked and lapse_p > 0 and rng.random() < lapse_p:
            n = rng.choice(blocked)
            clock += task.durations[n]
            failures += 1
            continue
        if cfg.chooser == "random":
            n = rng.choice(ready)
        else:
            n = min(ready, key=position.__getitem__)
        node_cfg = plan.config[n]
        key, action = (f"{n}.alt", f"{node_cfg.action}.alt") if n in switched else (n, node_cfg.action)
        op = script.next(key, action)
        ms = task.durations[n]
        if op is None:
            result = ActionResult("succeed", None, None, ms)
        elif op.op == "hang":
            result = ActionResult("hang", op.payload, None, op.ms if op.ms is not None else 2 * node_cfg.timeout_ms)
        else:
            result = ActionResult(op.op, op.payload, op.kind, op.ms if op.ms is not None else ms)
        elapsed = min(result.duration_ms, node_cfg.timeout_ms + 1)
        clock += elapsed
        outcome = finalize(result, node_cfg, clock)
        if outcome.kind is OutcomeKind.SUCCESS:
            done[n] = outcome.output.payload
            streak.pop(n, None)
            group_id = node_cfg.any_of_group
            if group_id is not None:
                dropped.update(s for s in plan.groups[group_id] if s != n and s not in done)
            continue
        failures += 1
        streak[n] = streak.get(n, 0) + 1
        if cfg.replan_after and streak[n] >= cfg.replan_after and n not in switched:
            switched.add(n)
            fallbacks += 1
            streak[n] = 0

    complete = error is None
    exits = plan.exits
    contract_ok = True
    if complete and len(exits) == 1:
        contract_ok = all(r.passed for r in validate_contract(done.get(exits[0], {}), plan.plan_contract))
    within_time = clock <= task.time_cap_ms
    success = complete and contract_ok and within_time
    if complete and not within_time:
        error = "TimeCapExceeded"
    required = [n for n in plan.nodes if n not in dropped]
    return RunMetrics(
        success=success,
        rounds=steps,
        sim_time_ms=clock,
        dispatches=steps,
        recovery={"fallback": fallbacks} if fallbacks else {},
        plan_versions=[1],
        cardinalities=[1] * steps,
        contract_rate=sum(1 for n in required if n in done) / len(required) if required else 1.0,
        error=error,
    )
