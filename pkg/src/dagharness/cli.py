"""Command-line entry point: validate, run, replay, bench.

Exit codes:
  0  success
  1  plan failed validation
  2  plan or script could not be parsed
  3  run finished but the plan failed
  4  engine invariant violated (a bug)
  5  corrupt or gapped WAL
  64 usage error
"""

from __future__ import annotations

import argparse
import io
import json
import os
import select
import sys
from pathlib import Path
from typing import Optional, Sequence

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_PARSE = 2
EXIT_PLAN_FAILED = 3
EXIT_ENGINE_BUG = 4
EXIT_CORRUPT_LOG = 5
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _emit(args, doc: dict, text: str) -> None:
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(text)


def _load_plan(path: str):
    from dagharness.plan import parse_plan

    return parse_plan(Path(path).read_bytes())


def cmd_validate(args) -> int:
    from dagharness.plan import ParseError, validate_plan

    try:
        plan = _load_plan(args.plan)
    except (OSError, ParseError) as exc:
        _emit(args, {"ok": False, "error": str(exc)}, f"parse error: {exc}")
        return EXIT_PARSE
    report = validate_plan(plan)
    lines = [f"{plan.id} v{plan.version}: {'ok' if report.ok else 'INVALID'}"]
    lines += [f"  {f.check}: {f.subject}: {f.message}" for f in report.failures]
    _emit(args, report.to_doc(), "\n".join(lines))
    return EXIT_OK if report.ok else EXIT_INVALID


def terminal_responder(timeout_ms: int, stream=None, out=None):
    stream = stream if stream is not None else sys.stdin
    out = out if out is not None else sys.stderr

    def respond(node: str, clock: int):
        print(f"approve {node}? [y/N] (waiting up to {timeout_ms} ms)", file=out, flush=True)
        try:
            ready, _, _ = select.select([stream], [], [], timeout_ms / 1000)
        except (ValueError, OSError, io.UnsupportedOperation, TypeError):
            ready = [stream]
        if not ready:
            return None
        answer = stream.readline().strip().lower()
        if answer in ("y", "yes"):
            return ("approve", 0)
        if answer in ("n", "no"):
            return ("cancel", 0)
        return None

    return respond


def cmd_run(args) -> int:
    from dagharness.clock import VirtualClock, WallClock
    from dagharness.executor import FaultScript, ScriptedExecutor
    from dagharness.persistence import WriteAheadLog
    from dagharness.plan import ParseError, validate_plan
    from dagharness.recovery import ALL_LEVELS, RecoveryAction, RecoveryPolicy
    from dagharness.scheduler import EngineError, approve_all, execute_plan

    try:
        plan = _load_plan(args.plan)
        script = FaultScript.load(args.faults) if args.faults else FaultScript()
    except (OSError, ParseError, ValueError, KeyError) as exc:
        _emit(args, {"ok": False, "error": str(exc)}, f"parse error: {exc}")
        return EXIT_PARSE
    report = validate_plan(plan)
    if not report.ok:
        _emit(args, {"ok": False, "validation": report.to_doc()}, f"plan invalid: {sorted(report.failed_checks)}")
        return EXIT_INVALID

    run_id = args.run_id or plan.id
    wal_path = Path(args.wal) if args.wal else Path(args.out) / f"{run_id}.wal"
    responder = approve_all if args.approve_all else terminal_responder(args.human_timeout_ms)
    levels = ALL_LEVELS if args.recovery == "all" else frozenset(
        RecoveryAction(x) for x in args.recovery.split(",") if x
    )
    clock = WallClock() if args.wall_clock else VirtualClock()
    with WriteAheadLog(wal_path, snapshot_every=args.snapshot_n, wall=args.wall_clock) as log:
        try:
            result = execute_plan(
                plan,
                ScriptedExecutor(script, default_ms=args.default_ms),
                RecoveryPolicy(levels=levels) if levels else None,
                clock,
                log,
                responder=responder,
                human_timeout_ms=args.human_timeout_ms,
                approval_nodes=args.approval_node or (),
                time_cap_ms=args.time_cap_ms,
            )
        except EngineError as exc:
            _emit(args, {"ok": False, "engine_error": str(exc), "wal": str(wal_path)}, f"engine error: {exc}")
            return EXIT_ENGINE_BUG
    doc = result.summary()
    doc.update({"wal": str(wal_path), "run_id": run_id, "seed": args.seed})
    lines = [f"run {run_id}: plan {plan.id} versions {result.plan_versions}"]
    for i, members in enumerate(result.ready_sets, 1):
        lines.append(f"round {i}: |U|={len(members)} {{{', '.join(members)}}}")
    lines.append(f"rounds: {result.rounds}  cardinalities: {result.cardinalities}")
    lines.append("final states:")
    lines += [f"  {n}: {s}" for n, s in doc["final_states"].items()]
    lines.append(f"{'SUCCESS' if result.success else 'FAILED'}  wal: {wal_path}")
    _emit(args, doc, "\n".join(lines))
    return EXIT_OK if result.success else EXIT_PLAN_FAILED


def cmd_replay(args) -> int:
    from dagharness.persistence import CorruptRecord, SeqGap, read_wal, replay
    from dagharness.state import summarize

    try:
        records = read_wal(args.wal)
        from dagharness.persistence import load_snapshots

        state = replay(records, upto=args.upto, snapshots=load_snapshots(args.wal))
    except (CorruptRecord, SeqGap) as exc:
        _emit(args, {"ok": False, "error": str(exc), "seq": getattr(exc, "seq", None)}, f"corrupt log: {exc}")
        return EXIT_CORRUPT_LOG
    except (OSError, ValueError) as exc:
        _emit(args, {"ok": False, "error": str(exc)}, f"cannot replay: {exc}")
        return EXIT_CORRUPT_LOG
    seq = records[-1].seq if args.upto is None and records else args.upto
    doc = {
        "plan_id": state.plan.id,
        "plan_version": state.plan.version,
        "round": state.round,
        "seq": seq,
        "final_states": summarize(state),
    }
    lines = [f"{state.plan.id} v{state.plan.version} at seq {seq}, round {state.round}"]
    lines += [f"  {n}: {s}" for n, s in doc["final_states"].items()]
    _emit(args, doc, "\n".join(lines))
    return EXIT_OK


def cmd_bench(args) -> int:
    from dagharness.harness import generate_tasks, parallel_tasks, run_bench

    groups = [g.strip() for g in args.groups.split(",") if g.strip()]
    tiers = [t.strip() for t in args.tier.split(",") if t.strip()]
    tasks = []
    for tier in tiers:
        if tier == "parallel":
            tasks += parallel_tasks(args.count, args.seed)
        else:
            tasks += generate_tasks(tier, args.count, args.seed)
    report = run_bench(groups, tasks, args.reps, args.seed, metric=args.metric)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(report.to_json() + "\n", encoding="utf-8")
    if args.csv:
        (out / "cardinality.csv").write_text(report.cardinality_csv(), encoding="utf-8")
    doc = report.to_doc()
    lines = [f"{'group':<6}{'perf':>8}{'rounds':>10}"]
    for g, s in doc["groups"].items():
        lines.append(f"{g:<6}{s.get('perf', 0):>8.3f}{s.get('rounds_mean', 0):>10.2f}" + ("  (synthetic)" if s.get("synthetic") else ""))
    if doc["gains"]:
        lines.append("gains: " + ", ".join(f"{k}={v:+.3f}" for k, v in doc["gains"].items() if isinstance(v, float)))
    lines.append(f"report: {out / 'bench.json'}")
    summary = {k: doc[k] for k in ("groups", "gains", "config_hash", "metric")}
    summary["report"] = str(out / "bench.json")
    _emit(args, summary, "\n".join(lines))
    return EXIT_OK


def _default_seed() -> int:
    try:
        return int(os.environ.get("SGH_SEED", "0"))
    except ValueError:
        return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dagharness", description="Static-DAG execution harness")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a plan file")
    v.add_argument("plan")
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="execute a plan under a fault script")
    r.add_argument("plan")
    r.add_argument("--faults", help="fault script JSON")
    r.add_argument("--wal", help="WAL path (default: <out>/<run-id>.wal)")
    r.add_argument("--out", default=".", help="output directory")
    r.add_argument("--run-id")
    r.add_argument("--seed", type=int, default=_default_seed())
    clock = r.add_mutually_exclusive_group()
    clock.add_argument("--virtual-clock", action="store_true", default=True)
    clock.add_argument("--wall-clock", action="store_true")
    r.add_argument("--snapshot-n", type=int, default=50)
    r.add_argument("--human-timeout-ms", type=int, default=60_000)
    r.add_argument("--approve-all", action="store_true")
    r.add_argument("--approval-node", action="append", help="node that needs approval before completing")
    r.add_argument("--recovery", default="all", help="all, or comma list of local_retry,local_patch,request_replan")
    r.add_argument("--default-ms", type=int, default=100, help="simulated duration per attempt")
    r.add_argument("--time-cap-ms", type=int)
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("replay", help="rebuild state from a WAL")
    rp.add_argument("wal")
    rp.add_argument("--upto", type=int)
    rp.add_argument("--json", action="store_true")
    rp.set_defaults(func=cmd_replay)

    b = sub.add_parser("bench", help="run the group comparison bench")
    b.add_argument("--groups", required=True, help="comma list, e.g. G1,G2,G3,G4,G5,G6")
    b.add_argument("--tier", required=True, help="comma list of simple,medium,complex,parallel")
    b.add_argument("--count", type=int, default=10)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--seed", type=int, default=_default_seed())
    b.add_argument("--metric", choices=("success", "contract"), default="success")
    b.add_argument("--out", default=".")
    b.add_argument("--csv", action="store_true")
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "bench":
        from dagharness.harness import Group

        try:
            for g in args.groups.split(","):
                Group(g.strip())
            for t in args.tier.split(","):
                if t.strip() not in ("simple", "medium", "complex", "parallel"):
                    raise ValueError(t)
        except ValueError as exc:
            print(f"dagharness bench: error: bad value {exc}", file=sys.stderr)
            return EXIT_USAGE
    if args.command == "run" and args.snapshot_n < 1:
        print("dagharness run: error: --snapshot-n must be positive", file=sys.stderr)
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
