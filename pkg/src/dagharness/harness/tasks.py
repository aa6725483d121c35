"""Seeded task generation by tier, plus fault families and the parallel family."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Optional

from dagharness.executor import FaultScript
from dagharness.plan import (
    JoinMode,
    NodeConfig,
    OutputContract,
    Plan,
    field_exists,
    longest_path_length,
    make_plan,
    topological_order,
    validate_plan,
)

TIERS = ("simple", "medium", "complex")
FAULT_FAMILIES = ("none", "transient", "patchable", "replan")
_FAMILY_WEIGHTS = (0.3, 0.3, 0.2, 0.2)
TIME_CAP_FACTOR = 2
STEP_CAP_FACTOR = 4


@dataclass
class TaskSpec:
    task_id: str
    tier: str
    plan: Plan
    faults: dict
    durations: dict
    family: str = "none"
    seed: int = 0

    def fault_script(self) -> FaultScript:
        return FaultScript(self.faults)

    @property
    def critical_path_ms(self) -> int:
        best: dict[str, int] = {}
        for n in topological_order(self.plan):
            preds = self.plan.preds[n]
            best[n] = self.durations[n] + max((best[p] for p in preds), default=0)
        return max(best.values())

    @property
    def time_cap_ms(self) -> int:
        return TIME_CAP_FACTOR * self.critical_path_ms

    @property
    def step_cap(self) -> int:
        return STEP_CAP_FACTOR * len(self.plan.nodes)

    def to_doc(self) -> dict:
        return {
            "task_id": self.task_id,
            "tier": self.tier,
            "family": self.family,
            "plan": self.plan.to_doc(),
            "faults": self.faults,
            "durations": dict(sorted(self.durations.items())),
            "time_cap_ms": self.time_cap_ms,
            "step_cap": self.step_cap,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_doc(), sort_keys=True).encode()).hexdigest()


class _Builder:
    def __init__(self, rng: random.Random, budget: int, timeout_ms: int):
        self.rng = rng
        self.budget = budget
        self.timeout_ms = timeout_ms
        self.config: dict[str, NodeConfig] = {}
        self.edges: set[tuple[str, str]] = set()
        self.groups = 0

    def node(self, preds=(), join=JoinMode.ALL_OF, group=None) -> str:
        nid = f"t{len(self.config):02d}"
        self.config[nid] = NodeConfig(
            action=f"act_{nid}",
            contract=OutputContract((field_exists("result"),)),
            join=join,
            retry_budget=self.budget,
            timeout_ms=self.timeout_ms,
            any_of_group=group,
        )
        for p in preds:
            self.edges.add((p, nid))
        return nid

    def alt_block(self, src: str) -> str:
        self.groups += 1
        g = f"g{self.groups}"
        a = self.node([src], group=g)
        b = self.node([src], group=g)
        return self.node([a, b], join=JoinMode.ANY_OF)

    def par_block(self, src: str, width: int) -> str:
        heads = [self.node([src]) for _ in range(width)]
        return self.node(heads)

    def nested_block(self, src: str) -> str:
        # one branch holds an alternative pair; the other is a plain step
        left = self.node([src])
        merged = self.alt_block(left)
        right = self.node([src])
        return self.node([merged, right])


def _simple(b: _Builder) -> None:
    prev = None
    for _ in range(b.rng.randint(1, 3)):
        prev = b.node([prev] if prev else [])


def _medium(b: _Builder) -> None:
    size = b.rng.randint(4, 8)
    entry = b.node()
    merge = b.alt_block(entry)
    extra = size - 4
    if extra == 0:
        return
    if extra == 1:
        b.node([merge])
        return
    prev = entry
    for _ in range(extra - 1):
        prev = b.node([prev])
    b.node([merge, prev])


def _complex(b: _Builder) -> None:
    target = b.rng.randint(9, 16)
    cur = b.node()
    nested_done = False
    while True:
        room = target - len(b.config)
        options = []
        if not nested_done and room >= 6:
            options.append("nested")
        if room >= 3:
            options.append("alt")
        if room >= 3:
            options.append("par")
        if not options:
            break
        kind = "nested" if not nested_done and "nested" in options else b.rng.choice(options)
        if kind == "nested":
            cur = b.nested_block(cur)
            nested_done = True
        elif kind == "alt":
            cur = b.alt_block(cur)
        else:
            cur = b.par_block(cur, min(b.rng.randint(2, 3), room - 1))
    while len(b.config) < target:
        cur = b.node([cur])


def _faults(rng: random.Random, plan: Plan, family: str) -> dict:
    if family == "none":
        return {}
    candidates = sorted(n for n in plan.nodes if plan.config[n].any_of_group is None)
    if family == "transient":
        out = {}
        for n in rng.sample(candidates, min(len(candidates), rng.randint(1, 2))):
            out[n] = [{"op": "fail", "kind": "transient"}] * rng.randint(1, 2)
        return out
    n = rng.choice(candidates)
    action = plan.config[n].action
    persistent = {"op": "fail", "kind": "contract_violation", "repeat": 1000}
    if family == "patchable":
        return {n: [persistent], f"{n}@{action}.patched": []}
    return {n: [persistent], f"{n}@{action}.patched": [persistent]}


def _sub_seed(seed: int, *parts) -> int:
    return int.from_bytes(hashlib.sha256(repr((seed,) + parts).encode()).digest()[:8], "big")


def generate_tasks(tier: str, count: int, seed: int, budget: int = 2, family: Optional[str] = None) -> list[TaskSpec]:
    """Seeded, tier-conformant tasks; every plan validates."""
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}")
    if count < 1:
        raise ValueError("count must be >= 1")
    build = {"simple": _simple, "medium": _medium, "complex": _complex}[tier]
    tasks = []
    for i in range(count):
        rng = random.Random(_sub_seed(seed, tier, i))
        b = _Builder(rng, budget, timeout_ms=5_000)
        build(b)
        plan = make_plan(f"{tier}-{i:03d}", b.config, b.edges, OutputContract((field_exists("result"),)))
        report = validate_plan(plan)
        if not report.ok:
            raise AssertionError(f"generator produced an invalid plan: {report.to_doc()}")
        fam = family or rng.choices(FAULT_FAMILIES, _FAMILY_WEIGHTS)[0]
        durations = {n: rng.randrange(100, 1001, 50) for n in sorted(plan.nodes)}
        tasks.append(TaskSpec(plan.id, tier, plan, _faults(rng, plan, fam), durations, fam, seed))
    return tasks


def parallel_tasks(count: int, seed: int) -> list[TaskSpec]:
    """entry -> W independent chains of length k -> exit; uniform 1000 ms, no faults."""
    tasks = []
    for i in range(count):
        rng = random.Random(_sub_seed(seed, "parallel", i))
        width, depth = rng.choice((4, 5)), rng.choice((2, 3))
        b = _Builder(rng, 2, 5_000)
        entry = b.node()
        ends = []
        for _ in range(width):
            prev = entry
            for _ in range(depth):
                prev = b.node([prev])
            ends.append(prev)
        b.node(ends)
        plan = make_plan(f"parallel-{i:03d}", b.config, b.edges, OutputContract((field_exists("result"),)))
        assert validate_plan(plan).ok
        assert longest_path_length(plan) == depth + 2
        tasks.append(TaskSpec(plan.id, "parallel", plan, {}, {n: 1000 for n in plan.nodes}, "none", seed))
    return tasks
