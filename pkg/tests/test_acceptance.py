"""Acceptance suite. Each test feeds one numbered criterion; a criterion passes
only if all of its tests pass. One PASS/FAIL line per criterion is printed in
the terminal summary (and when this file is run directly)."""

import itertools
import random
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from fractions import Fraction

import pytest

from dagharness.clock import VirtualClock
from dagharness.executor import ActionResult, FaultScript, Outcome, ScriptedExecutor, finalize
from dagharness.fixtures import bugfix_fault_script, bugfix_plan
from dagharness.harness import generate_tasks, parallel_tasks, run_bench
from dagharness.lifecycle import IllegalTransition, NodeRuntime, NodeState, TerminalStateMutation, Trigger, transition
from dagharness.persistence import WriteAheadLog, iter_replay, replay
from dagharness.plan import (
    JoinMode,
    NodeConfig,
    OutputContract,
    SideEffect,
    longest_path_length,
    make_plan,
    validate_plan,
)
from dagharness.recovery import ErrorKind, RecoveryAction, RecoveryManager, RecoveryPolicy
from dagharness.scheduler import (
    EngineError,
    ReadySet,
    apply_outcome,
    approve_all,
    compute_ready_set,
    dispatch,
    execute_plan,
    join_holds,
    no_response,
    update_ready_set_incremental,
)
from dagharness.state import ExecutionState

from helpers import (
    CONTRACT,
    TRANSITION_FIXTURE,
    escalation_fuzz,
    escalation_trace_violations,
    oracle_all_of_ready,
    random_faults,
    random_plan,
)

# ---------------------------------------------------------------- pinned values

GOLDEN_ROUNDS = 6
GOLDEN_CARDINALITIES = [2, 2, 1, 3, 1, 1]
GOLDEN_READY_SETS = [
    ["search_auth", "search_utils"],
    ["read_auth", "read_utils"],
    ["analyze"],
    ["fix_A", "fix_B", "update_docs"],
    ["run_tests"],
    ["report"],
]
GOLDEN_RUNTIME_S = 1.0
FUZZ_RUNS = 1000
FUZZ_MAX_NODES = 60
NON_TERMINAL_COUNT = 6  # lifecycle states that are not terminal
ESCALATION_SEQUENCES = 10_000
JOIN_DAGS = 500
INCREMENTAL_DAGS = 500
BENCH_GROUPS = ["G1", "G2", "G3", "G4", "G5", "G6"]
BENCH_TASKS_PER_TIER = 10
BENCH_REPS = 10
BENCH_SEED = 2024
BENCH_RUNTIME_S = 60.0

# table rows plus the timeout arc and the any_of skip from failed_retryable
TABLE_PLUS_TWO = {
    k: v for k, v in TRANSITION_FIXTURE.items()
    if k not in {("pending", "sibling_completed"), ("running", "sibling_completed"), ("pending", "structural_error")}
}

TITLES = {
    1: "golden trace",
    2: "transition-table exhaustiveness",
    3: "bounded termination",
    4: "escalation fuzz",
    5: "join properties",
    6: "replay determinism",
    7: "incremental ready-set equivalence",
    8: "gain telescoping",
    9: "validation fixtures",
}
RESULTS: dict[int, list[bool]] = {}


@contextmanager
def criterion(n):
    try:
        yield
    except BaseException:
        RESULTS.setdefault(n, []).append(False)
        raise
    RESULTS.setdefault(n, []).append(True)


def summary_lines():
    lines = []
    for n, title in TITLES.items():
        got = RESULTS.get(n)
        status = "NOT RUN" if not got else ("PASS" if all(got) else "FAIL")
        lines.append(f"criterion {n} ({title}): {status}")
    return lines


def cfg(**kw):
    return NodeConfig(action=kw.pop("action", "act"), contract=CONTRACT, **kw)


OK = finalize(ActionResult("succeed", {"result": 1}), cfg(), 0)


# ---------------------------------------------------------------- 1. golden trace


@pytest.fixture(scope="module")
def golden(tmp_path_factory):
    path = tmp_path_factory.mktemp("golden") / "bugfix.wal"
    start = time.perf_counter()
    log = WriteAheadLog(path, snapshot_every=2)
    res = execute_plan(bugfix_plan(), ScriptedExecutor(bugfix_fault_script()), RecoveryPolicy(), VirtualClock(), log)
    log.close()
    return res, log, path, time.perf_counter() - start


def test_c1_golden_trace(golden):
    res, log, _, elapsed = golden
    with criterion(1):
        assert res.rounds == GOLDEN_ROUNDS
        assert res.cardinalities == GOLDEN_CARDINALITIES
        assert res.ready_sets == GOLDEN_READY_SETS
        assert res.state.state_of("fix_A") is NodeState.SKIPPED
        assert len(res.state.runtimes) == 10 and res.state.all_terminal()
        assert res.plan_versions == [1]
        assert [r.body["from_version"] for r in log.records if r.kind == "replan"] == [None]
        fix_a = [(r.body["from"], r.body["to"]) for r in log.records if r.kind == "transition" and r.body["node"] == "fix_A"]
        assert fix_a[-2:] == [("running", "failed_retryable"), ("failed_retryable", "skipped")]
        assert not any(r.kind == "recovery_action" and r.body["action"] == "local_retry" for r in log.records)
        assert res.success
        assert elapsed < GOLDEN_RUNTIME_S


# ---------------------------------------------------------------- 2. transition table


def test_c2_cross_product_matches_table():
    legal = {}
    for s, g in itertools.product(NodeState, Trigger):
        rt = NodeRuntime("n", 2, 100, state=s, human_timeout_ms=50, contract_passed=True)
        try:
            legal[(s.value, g.value)] = transition(rt, g, 0).state.value
        except (IllegalTransition, TerminalStateMutation):
            pass
    with criterion(2):
        extra = sorted(set(legal) - set(TABLE_PLUS_TWO))
        missing = sorted(set(TABLE_PLUS_TWO) - set(legal))
        wrong = sorted(k for k in set(legal) & set(TABLE_PLUS_TWO) if legal[k] != TABLE_PLUS_TWO[k])
        assert (extra, missing, wrong) == ([], [], []), f"extra={extra} missing={missing} wrong={wrong}"


# ---------------------------------------------------------------- 3. bounded termination


@pytest.fixture(scope="module")
def fuzz_runs():
    runs = []
    for seed in range(FUZZ_RUNS):
        rng = random.Random(seed)
        plan = random_plan(rng, FUZZ_MAX_NODES, plan_id=f"fuzz{seed}")
        faults = random_faults(rng, plan)
        log = WriteAheadLog(snapshot_every=rng.choice((1, 3, 10, 50)))
        error = res = None
        try:
            res = execute_plan(
                plan,
                ScriptedExecutor(FaultScript(faults)),
                RecoveryPolicy(),
                VirtualClock(),
                log,
                responder=approve_all if seed % 2 else no_response,
                human_timeout_ms=rng.choice((500, 5_000)),
            )
        except EngineError as exc:
            error = exc
        runs.append((seed, plan, res, log, error))
    return runs


def test_c3_every_run_terminates(fuzz_runs):
    with criterion(3):
        errors = [(seed, repr(err)) for seed, _, _, _, err in fuzz_runs if err is not None]
        assert errors == []
        stuck = [seed for seed, _, res, _, _ in fuzz_runs if not res.state.all_terminal()]
        assert stuck == []


def test_c3_transitions_within_bound(fuzz_runs):
    over = []
    for seed, _, _, log, _ in fuzz_runs:
        sizes, counts = {}, {}
        for rec in log.records:
            if rec.kind == "replan":
                sizes[rec.body["to_version"]] = len(rec.body["plan"]["nodes"])
            elif rec.kind == "transition":
                counts[rec.plan_version] = counts.get(rec.plan_version, 0) + 1
        for version, count in counts.items():
            if count > sizes[version] * NON_TERMINAL_COUNT:
                over.append((seed, version, count, sizes[version] * NON_TERMINAL_COUNT))
    with criterion(3):
        assert over == [], f"{len(over)} plan versions exceed |V|*6, e.g. (seed, version, count, bound) {over[:3]}"


# ---------------------------------------------------------------- 4. escalation fuzz


def test_c4_escalation_fuzz():
    with criterion(4):
        bad = []
        for seed in range(ESCALATION_SEQUENCES):
            out = escalation_fuzz(random.Random(seed))
            if out:
                bad.append((seed, out[:2]))
        assert bad == []


def test_c4_engine_traces_respect_ladder(fuzz_runs):
    with criterion(4):
        bad = [(seed, v[:2]) for seed, _, _, log, _ in fuzz_runs if (v := escalation_trace_violations(log.records))]
        assert bad == []


# ---------------------------------------------------------------- 5. join properties


def _complete(state, node, outcome=OK):
    dispatch(state, ReadySet((node,), state.round), 0)
    return apply_outcome(state, node, outcome, 0)


def test_c5_all_of_monotonicity():
    with criterion(5):
        for seed in range(JOIN_DAGS):
            rng = random.Random(seed)
            plan = random_plan(rng, 40, any_of_prob=0.0)
            state = ExecutionState.initial(plan)
            done: set = set()
            prev_ready: set = set()
            while True:
                indicator = {v for v in plan.nodes if join_holds(state, v)}
                assert indicator == {v for v in plan.nodes if set(plan.preds[v]) <= done}, seed
                assert prev_ready <= indicator, seed
                prev_ready = indicator
                ready = list(compute_ready_set(state).members)
                assert ready == oracle_all_of_ready(plan, done), seed
                if not ready:
                    break
                node = rng.choice(ready)
                _complete(state, node)
                done.add(node)
            assert done == plan.nodes


def _race(rng, k):
    """s -> candidates -> m. Returns (plan, script, durations, expected winner, deferred candidate)."""
    deferred = rng.random() < 0.4
    cands = [f"c{i}" for i in range(k)]
    config = {"s": cfg(), "m": cfg(join=JoinMode.ANY_OF)}
    edges = [(c, "m") for c in cands]
    durations = {"s": 100, "m": 100}
    script = {}
    winners = []
    for i, c in enumerate(cands):
        config[c] = cfg(any_of_group="g", side_effect=SideEffect.LOW_WRITE, timeout_ms=10_000)
        d = rng.choice((100, 200, 300, 400))
        durations[c] = d
        if deferred and i == k - 1:
            # behind a slow predecessor, so still pending when the race is decided
            config["slow"] = cfg(timeout_ms=10_000)
            edges += [("s", "slow"), ("slow", c)]
            durations["slow"] = 5_000
            continue
        edges.append(("s", c))
        if i > 0 and rng.random() < 0.4:
            script[c] = [{"op": "fail", "kind": "transient", "ms": rng.choice((50, 100))}]
        else:
            winners.append((d, c))
    if not winners:
        c = cands[0]
        script.pop(c, None)
        winners.append((durations[c], c))
    plan = make_plan("race", config, edges, CONTRACT)
    return plan, script, durations, min(winners)[1], cands


def test_c5_sibling_skip_in_every_race():
    with criterion(5):
        for seed in range(200):
            rng = random.Random(seed)
            plan, script, durations, winner, cands = _race(rng, rng.randint(2, 4))
            assert validate_plan(plan).ok
            log = WriteAheadLog()
            res = execute_plan(plan, ScriptedExecutor(FaultScript(script), durations=durations), RecoveryPolicy(),
                               VirtualClock(), log)
            st = res.state
            assert st.state_of(winner) is NodeState.EXECUTED, seed
            losers = [c for c in cands if c != winner]
            assert all(st.state_of(c) is NodeState.SKIPPED for c in losers), (seed, {c: st.state_of(c) for c in cands})
            skips = {r.body["node"]: r.body.get("by") for r in log.records
                     if r.kind == "transition" and r.body["trigger"] == "sibling_completed"}
            assert skips == {c: winner for c in losers}, seed
            assert st.state_of("m") is NodeState.EXECUTED


def test_c5_all_failed_group_fails_successor():
    with criterion(5):
        for seed in range(200):
            rng = random.Random(seed)
            k = rng.randint(2, 4)
            cands = [f"c{i}" for i in range(k)]
            config = {"s": cfg(), "m": cfg(join=JoinMode.ANY_OF), "t": cfg()}
            edges = [("m", "t")] + [("s", c) for c in cands] + [(c, "m") for c in cands]
            script = {}
            for c in cands:
                how = rng.choice(("structural", "exhausted", "timeout", "cancelled"))
                config[c] = cfg(any_of_group="g", retry_budget=0, timeout_ms=500)
                script[c] = {
                    "structural": [{"op": "fail", "kind": "missing dependency"}],
                    "exhausted": [{"op": "fail", "kind": "transient"}],
                    "timeout": [{"op": "hang", "ms": 2_000}],
                    "cancelled": [{"op": "fail", "kind": "approval_required"}],
                }[how]
            plan = make_plan("allfail", config, edges, CONTRACT)
            res = execute_plan(plan, ScriptedExecutor(FaultScript(script)),
                               RecoveryPolicy(levels=frozenset({RecoveryAction.LOCAL_RETRY})), VirtualClock(),
                               WriteAheadLog(), responder=no_response, human_timeout_ms=300)
            st = res.state
            assert all(st.state_of(c) in (NodeState.FAILED, NodeState.CANCELLED) for c in cands), seed
            assert st.state_of("m") is NodeState.FAILED, seed
            assert st.state_of("t") is NodeState.FAILED, seed


# ---------------------------------------------------------------- 6. replay determinism


def _check_replay(res, log, rng, samples=3):
    assert replay(log) == res.state
    assert replay(log, use_snapshots=False) == res.state
    # one streaming fold visits every prefix; each snapshot must agree with it
    snaps = {s.seq: s for s in log.snapshots}
    last = 0
    for seq, state in iter_replay(log.records):
        last = seq
        if seq in snaps:
            assert ExecutionState.from_dict(snaps[seq].state) == state
    assert last == log.last_seq
    lines = log.lines()
    for k in rng.sample(range(1, len(lines) + 1), min(samples, len(lines))):
        assert replay(lines[:k]) == replay(log, upto=k)


def test_c6_golden_replay(golden):
    res, log, path, _ = golden
    with criterion(6):
        assert replay(path) == res.state
        assert replay(path, use_snapshots=False) == res.state
        lines = path.read_text().splitlines()
        for k in range(1, len(lines) + 1):
            replay(lines[:k])
            assert replay(path, upto=k) == replay(lines[:k])
        _check_replay(res, log, random.Random(0))


def test_c6_fuzz_replay(fuzz_runs):
    with criterion(6):
        for seed, _, res, log, err in fuzz_runs:
            assert err is None, seed
            _check_replay(res, log, random.Random(seed))


# ---------------------------------------------------------------- 7. incremental ready set


def test_c7_incremental_equals_full():
    with criterion(7):
        for seed in range(INCREMENTAL_DAGS):
            rng = random.Random(seed)
            plan = random_plan(rng, 40)
            state = ExecutionState.initial(plan, log=WriteAheadLog(snapshot_every=None))
            mgr = RecoveryManager(state)
            ready = compute_ready_set(state)
            while ready.members:
                dispatch(state, ready, 0)
                running = state.nodes_in(NodeState.RUNNING)
                rng.shuffle(running)
                ready = ReadySet(tuple(m for m in ready.members if state.state_of(m) in (NodeState.PENDING, NodeState.READY)), 0)
                for n in running:
                    r = rng.random()
                    if r < 0.7:
                        outcome = OK
                    elif r < 0.85:
                        outcome = Outcome.fail(ErrorKind.TRANSIENT, "flaky")
                    else:
                        outcome = Outcome.fail(ErrorKind.STRUCTURAL, "broken")
                    ready = apply_outcome(state, n, outcome, 0, ready)
                    assert ready.members == compute_ready_set(state).members, seed
                for n in state.nodes_in(NodeState.FAILED_RETRYABLE):
                    rt = state.runtimes[n]
                    if rng.random() < 0.5 and rt.retries_used < rt.retry_budget:
                        mgr.attempt_retry(n, 0)
                        ready = update_ready_set_incremental(state, (), ready, requeued=(n,))
                    else:
                        before = set(state.newly_terminal)
                        mgr.exhaust(n, 0)
                        ready = update_ready_set_incremental(state, state.newly_terminal - before, ready)
                    assert ready.members == compute_ready_set(state).members, seed


# ---------------------------------------------------------------- 8. gain telescoping


def _perf_from_runs(doc, group):
    rows = [r for r in doc["per_task"] if r["group"] == group]
    return Fraction(sum(1 for r in rows if r["success"]), len(rows))


def test_c8_gain_telescoping():
    tasks = [t for tier in ("simple", "medium", "complex") for t in generate_tasks(tier, BENCH_TASKS_PER_TIER, BENCH_SEED)]
    start = time.perf_counter()
    report = run_bench(BENCH_GROUPS, tasks, BENCH_REPS, BENCH_SEED)
    elapsed = time.perf_counter() - start
    doc = report.to_doc()
    with criterion(8):
        assert len(tasks) == 30
        assert all(len([r for r in doc["per_task"] if r["group"] == g]) == 300 for g in BENCH_GROUPS)
        perf = {g: _perf_from_runs(doc, g) for g in BENCH_GROUPS}
        gains = report.gains
        assert gains.g_total == perf["G6"] - perf["G1"]
        adjacent = [perf[f"G{i + 1}"] - perf[f"G{i}"] for i in range(1, 6)]
        assert [gains.g_plan, gains.g_scaffold, gains.g_graph, gains.g_patch, gains.g_replan] == adjacent
        assert doc["gains"]["g_total"] == pytest.approx(float(perf["G6"] - perf["G1"]), abs=1e-12)
        assert elapsed < BENCH_RUNTIME_S


def test_c8_parallel_family():
    tasks = parallel_tasks(BENCH_TASKS_PER_TIER, BENCH_SEED)
    report = run_bench(["G1", "G2", "G3", "G4"], tasks, BENCH_REPS, BENCH_SEED)
    doc = report.to_doc()
    by_task = {t.task_id: t for t in tasks}
    with criterion(8):
        for row in doc["per_task"]:
            t = by_task[row["task"]]
            if row["group"] == "G4":
                assert row["rounds"] == longest_path_length(t.plan), row
            else:
                assert row["rounds"] == len(t.plan.nodes), row
        g_graph = _perf_from_runs(doc, "G4") - _perf_from_runs(doc, "G3")
        assert g_graph > 0


# ---------------------------------------------------------------- 9. validation fixtures


def _fixture(nodes, edges, **overrides):
    config = {n: overrides.get(n, cfg()) for n in nodes}
    return make_plan("fx", config, edges, CONTRACT)


VALIDATION_FIXTURES = {
    "acyclicity": lambda: _fixture("SABT", [("S", "A"), ("A", "B"), ("B", "A"), ("B", "T")]),
    # in a DAG every node reaches an entry and an exit, so an unreachable node needs a cycle
    "reachability": lambda: _fixture("STXY", [("S", "T"), ("X", "Y"), ("Y", "X")]),
    "join_consistency": lambda: _fixture(
        "sabm", [("s", "a"), ("s", "b"), ("a", "m"), ("b", "m")],
        a=cfg(any_of_group="g"), m=cfg(join=JoinMode.ANY_OF),
    ),
    "contract_wellformed": lambda: _fixture("ab", [("a", "b")], b=NodeConfig("act", OutputContract(()))),
    "side_effect_consistency": lambda: _fixture(
        "sabm", [("s", "a"), ("s", "b"), ("a", "m"), ("b", "m")],
        a=cfg(any_of_group="g", side_effect=SideEffect.HIGH_WRITE), b=cfg(any_of_group="g"), m=cfg(join=JoinMode.ANY_OF),
    ),
}


@pytest.mark.parametrize("check", list(VALIDATION_FIXTURES))
def test_c9_fixture_fails_exactly_its_check(check):
    report = validate_plan(VALIDATION_FIXTURES[check]())
    with criterion(9):
        assert report.failed_checks == {check}, sorted(report.failed_checks)


def test_c9_bugfix_plan_passes():
    with criterion(9):
        report = validate_plan(bugfix_plan())
        assert report.ok and report.failures == ()


if __name__ == "__main__":
    code = pytest.main([__file__, "-q"])
    print("\n".join(summary_lines()))
    sys.exit(code)
