"""Group runs, gain decomposition and bench reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import random
import statistics
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from dagharness.clock import VirtualClock
from dagharness.executor import ScriptedExecutor
from dagharness.harness.groups import GROUPS, Group
from dagharness.harness.loopsim import simulate_loop
from dagharness.harness.metrics import RunMetrics
from dagharness.harness.tasks import TaskSpec
from dagharness.persistence import WriteAheadLog
from dagharness.recovery import RecoveryPolicy
from dagharness.scheduler import execute_plan


class MissingGroup(Exception):
    pass


class AuditFailure(Exception):
    pass


def run_engine(group: Group, task: TaskSpec, seed: int = 0, log: Optional[WriteAheadLog] = None) -> RunMetrics:
    cfg = GROUPS[Group(group)]
    if cfg.scheduler != "graph":
        raise ValueError(f"{group} is not an engine group")
    log = log if log is not None else WriteAheadLog(snapshot_every=None)
    executor = ScriptedExecutor(task.fault_script(), durations=task.durations)
    result = execute_plan(
        task.plan,
        executor,
        RecoveryPolicy(levels=cfg.levels),
        VirtualClock(),
        log,
        time_cap_ms=task.time_cap_ms,
    )
    st = result.state
    from dagharness.lifecycle import NodeState

    required = [n for n, rt in st.runtimes.items() if rt.state is not NodeState.SKIPPED]
    rate = sum(1 for n in required if st.runtimes[n].state is NodeState.EXECUTED) / len(required) if required else 1.0
    error = None
    if not result.success and result.clock > task.time_cap_ms:
        error = "TimeCapExceeded"
    return RunMetrics(
        success=result.success,
        rounds=result.rounds,
        sim_time_ms=result.clock,
        dispatches=result.dispatches,
        recovery=dict(result.recovery_actions),
        plan_versions=list(result.plan_versions),
        cardinalities=list(result.cardinalities),
        contract_rate=rate,
        error=error,
    )


def run_one(group: Group, task: TaskSpec, seed: int) -> RunMetrics:
    if GROUPS[Group(group)].scheduler == "loop":
        return simulate_loop(group, task, seed)
    return run_engine(group, task, seed)


def run_seed(base: int, task_id: str, rep: int) -> int:
    # shared by every group so paired runs see the same randomness
    return int.from_bytes(hashlib.sha256(f"{base}:{task_id}:{rep}".encode()).digest()[:8], "big")


def controlled_hash(tasks: Sequence[TaskSpec], repetitions: int) -> str:
    h = hashlib.sha256()
    h.update(str(repetitions).encode())
    for t in sorted(tasks, key=lambda t: t.task_id):
        h.update(t.digest().encode())
    return h.hexdigest()


@dataclass
class GroupResult:
    group: Group
    runs: list[tuple[str, int, RunMetrics]]
    config_hash: str

    @property
    def successes(self) -> int:
        return sum(1 for _, _, m in self.runs if m.success)

    def perf(self, metric: str = "success") -> Fraction:
        if not self.runs:
            return Fraction(0)
        if metric == "success":
            return Fraction(self.successes, len(self.runs))
        if metric == "contract":
            return sum((Fraction(m.contract_rate).limit_denominator(10**6) for _, _, m in self.runs), Fraction(0)) / len(self.runs)
        raise ValueError(f"unknown metric {metric!r}")

    def summary(self) -> dict:
        if not self.runs:
            return {"runs": 0}
        succ = [1.0 if m.success else 0.0 for _, _, m in self.runs]
        rounds = [float(m.rounds) for _, _, m in self.runs]
        out = {
            "runs": len(self.runs),
            "perf": float(self.perf()),
            "perf_exact": str(self.perf()),
            "success_mean": statistics.fmean(succ),
            "success_sd": statistics.pstdev(succ),
            "rounds_mean": statistics.fmean(rounds),
            "rounds_sd": statistics.pstdev(rounds),
            "synthetic": GROUPS[self.group].synthetic,
        }
        if GROUPS[self.group].synthetic:
            out["note"] = "simulated baseline; only success rate and round counts are reported"
        return out


def run_group(group: Group, tasks: Sequence[TaskSpec], repetitions: int = 1, seed: int = 0) -> GroupResult:
    """Run every task ``repetitions`` times. Order is shuffled per repetition,
    then results are folded in (task, repetition) order."""
    group = Group(group)
    collected: dict[tuple[str, int], RunMetrics] = {}
    for rep in range(repetitions):
        order = list(tasks)
        random.Random(run_seed(seed, "order", rep)).shuffle(order)
        for t in order:
            collected[(t.task_id, rep)] = run_one(group, t, run_seed(seed, t.task_id, rep))
    runs = [(tid, rep, collected[(tid, rep)]) for tid, rep in sorted(collected)]
    return GroupResult(group, runs, controlled_hash(tasks, repetitions))


@dataclass(frozen=True)
class GainReport:
    perf: dict
    g_plan: Fraction
    g_scaffold: Fraction
    g_graph: Fraction
    g_patch: Fraction
    g_replan: Fraction
    g_total: Fraction
    g_info: Optional[Fraction] = None  # Perf(G1) - Perf(G0)
    g_total_from_g0: Optional[Fraction] = None  # Perf(G6) - Perf(G0)

    def to_doc(self) -> dict:
        def num(x):
            return None if x is None else float(x)

        doc = {k: num(getattr(self, k)) for k in ("g_plan", "g_scaffold", "g_graph", "g_patch", "g_replan", "g_total")}
        doc["exact"] = {k: str(getattr(self, k)) for k in ("g_plan", "g_scaffold", "g_graph", "g_patch", "g_replan", "g_total")}
        if self.g_info is not None:
            doc["g_info"] = num(self.g_info)
            doc["g_total_from_g0"] = num(self.g_total_from_g0)
        return doc


def compute_gains(perf: Mapping) -> GainReport:
    p = {Group(k): Fraction(v) for k, v in perf.items()}
    missing = [g.value for g in (Group.G1, Group.G2, Group.G3, Group.G4, Group.G5, Group.G6) if g not in p]
    if missing:
        raise MissingGroup(f"missing groups: {missing}")
    gains = [p[Group(f"G{i + 1}")] - p[Group(f"G{i}")] for i in range(1, 6)]
    g0 = p.get(Group.G0)
    return GainReport(
        perf={g.value: v for g, v in sorted(p.items())},
        g_plan=gains[0],
        g_scaffold=gains[1],
        g_graph=gains[2],
        g_patch=gains[3],
        g_replan=gains[4],
        g_total=sum(gains, Fraction(0)),
        g_info=None if g0 is None else p[Group.G1] - g0,
        g_total_from_g0=None if g0 is None else p[Group.G6] - g0,
    )


@dataclass
class BenchReport:
    groups: dict[Group, GroupResult]
    gains: Optional[GainReport]
    config_hash: str
    metric: str = "success"

    def to_doc(self) -> dict:
        per_task = []
        for g, res in sorted(self.groups.items()):
            for tid, rep, m in res.runs:
                per_task.append({"group": g.value, "task": tid, "rep": rep, **m.to_doc()})
        return {
            "groups": {g.value: res.summary() for g, res in sorted(self.groups.items())},
            "per_task": per_task,
            "gains": None if self.gains is None else self.gains.to_doc(),
            "config_hash": self.config_hash,
            "metric": self.metric,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2, sort_keys=True)

    def cardinality_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["group", "ready_set_size", "rounds"])
        for g, res in sorted(self.groups.items()):
            hist = Counter(c for _, _, m in res.runs for c in m.cardinalities)
            for size in sorted(hist):
                w.writerow([g.value, size, hist[size]])
        return buf.getvalue()


def audit(results: Iterable[GroupResult]) -> str:
    hashes = {r.config_hash for r in results}
    if len(hashes) != 1:
        raise AuditFailure("groups ran different task sets, caps or scripts")
    return hashes.pop()


def run_bench(
    groups: Sequence,
    tasks: Sequence[TaskSpec],
    repetitions: int = 1,
    seed: int = 0,
    metric: str = "success",
) -> BenchReport:
    results = {Group(g): run_group(Group(g), tasks, repetitions, seed) for g in groups}
    config_hash = audit(results.values()) if results else controlled_hash(tasks, repetitions)
    gains = None
    needed = {Group(f"G{i}") for i in range(1, 7)}
    if needed <= set(results):
        gains = compute_gains({g: r.perf(metric) for g, r in results.items()})
    return BenchReport(results, gains, config_hash, metric)
