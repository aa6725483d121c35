"""Append-only NDJSON write-ahead log with per-line CRC32, snapshots, and replay.

Each line is a JSON object with sorted keys and compact separators. The ``crc``
field holds the CRC32 (8 lowercase hex digits) of the same object encoded
without the ``crc`` key.
"""

from __future__ import annotations

import json
import os
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Union

from dagharness.lifecycle import TERMINAL, NodeState
from dagharness.plan import Plan
from dagharness.state import CorruptRecord, ExecutionState

RECORD_KINDS = frozenset(
    {"transition", "dispatch", "outcome", "contract_report", "recovery_action", "replan", "late_outcome", "round_boundary"}
)
DEFAULT_SNAPSHOT_EVERY = 50


class SeqGap(Exception):
    def __init__(self, seq: int, expected: int):
        self.seq = seq
        self.expected = expected
        super().__init__(f"sequence gap: got seq {seq}, expected {expected}")


class IoFailure(Exception):
    def __init__(self, last_durable_seq: int, cause: BaseException):
        self.last_durable_seq = last_durable_seq
        super().__init__(f"WAL write failed after seq {last_durable_seq}: {cause}")


@dataclass(frozen=True)
class TraceRecord:
    seq: int
    clock: int
    plan_id: str
    plan_version: int
    kind: str
    body: dict
    wall: Optional[float] = None

    def to_doc(self) -> dict:
        doc = {
            "seq": self.seq,
            "clock": self.clock,
            "plan_id": self.plan_id,
            "plan_version": self.plan_version,
            "kind": self.kind,
            "body": self.body,
        }
        if self.wall is not None:
            doc["wall"] = self.wall
        return doc


def _canonical(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode_record(rec: TraceRecord) -> str:
    doc = rec.to_doc()
    body = _canonical(doc)
    doc["crc"] = f"{zlib.crc32(body.encode('utf-8')):08x}"
    return _canonical(doc)


def decode_record(line: str, expected_seq: int) -> TraceRecord:
    try:
        doc = json.loads(line)
        crc = doc.pop("crc")
    except (ValueError, KeyError, AttributeError, TypeError) as exc:
        raise CorruptRecord(expected_seq, f"unparseable line ({exc})") from None
    if f"{zlib.crc32(_canonical(doc).encode('utf-8')):08x}" != crc:
        raise CorruptRecord(doc.get("seq", expected_seq), "CRC mismatch")
    try:
        rec = TraceRecord(
            doc["seq"], doc["clock"], doc["plan_id"], doc["plan_version"], doc["kind"], doc["body"], doc.get("wall")
        )
    except KeyError as exc:
        raise CorruptRecord(doc.get("seq", expected_seq), f"missing {exc}") from None
    if rec.kind not in RECORD_KINDS:
        raise CorruptRecord(rec.seq, f"unknown kind {rec.kind!r}")
    return rec


@dataclass
class Snapshot:
    seq: int
    plan_version: int
    state: dict

    def to_doc(self) -> dict:
        return {"seq": self.seq, "plan_version": self.plan_version, "state": self.state}


def snapshot_path(wal_path: Union[str, Path], seq: int) -> Path:
    wal_path = Path(wal_path)
    run_id = wal_path.name[: -len(".wal")] if wal_path.name.endswith(".wal") else wal_path.name
    return wal_path.with_name(f"{run_id}.{seq}.snap")


class WriteAheadLog:
    """Single-writer log. With ``path=None`` records are kept in memory only.

    ``snapshot_every`` counts node-terminal transitions; every n-th one triggers
    a snapshot of the state just after that record was applied.
    """

    def __init__(
        self,
        path: Union[str, Path, None] = None,
        snapshot_every: Optional[int] = DEFAULT_SNAPSHOT_EVERY,
        wall: bool = False,
        fsync: bool = False,
    ):
        if snapshot_every is not None and snapshot_every < 1:
            raise ValueError("snapshot_every must be positive")
        self.path = Path(path) if path is not None else None
        self.snapshot_every = snapshot_every
        self.wall = wall
        self.fsync = fsync
        self.records: list[TraceRecord] = []
        self.snapshots: list[Snapshot] = []
        self._terminal_events = 0
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")

    @property
    def last_seq(self) -> int:
        return self.records[-1].seq if self.records else 0

    def append(self, kind: str, body: dict, clock: int, plan_id: str, plan_version: int) -> TraceRecord:
        if kind not in RECORD_KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        rec = TraceRecord(self.last_seq + 1, clock, plan_id, plan_version, kind, body, time.time() if self.wall else None)
        line = encode_record(rec)
        if self._fh is not None:
            try:
                self._fh.write(line + "\n")
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except OSError as exc:
                raise IoFailure(self.last_seq, exc) from exc
        # keep the decoded body so in-memory and on-disk replays see identical values
        stored = TraceRecord(rec.seq, rec.clock, rec.plan_id, rec.plan_version, kind, json.loads(line)["body"], rec.wall)
        self.records.append(stored)
        return stored

    def after_apply(self, rec: TraceRecord, state: ExecutionState) -> None:
        if rec.kind != "transition" or NodeState(rec.body["to"]) not in TERMINAL:
            return
        self._terminal_events += 1
        if self.snapshot_every and self._terminal_events % self.snapshot_every == 0:
            snap = Snapshot(rec.seq, state.plan.version, json.loads(json.dumps(state.to_dict())))
            self.snapshots.append(snap)
            if self.path is not None:
                snapshot_path(self.path, rec.seq).write_text(_canonical(snap.to_doc()) + "\n", encoding="utf-8")

    def lines(self) -> list[str]:
        return [encode_record(r) for r in self.records]

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_wal(source: Union[str, Path, Iterable[str]]) -> list[TraceRecord]:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(source)
    out: list[TraceRecord] = []
    for line in lines:
        if not line.strip():
            continue
        expected = len(out) + 1
        rec = decode_record(line, expected)
        if rec.seq != expected:
            raise SeqGap(rec.seq, expected)
        out.append(rec)
    return out


def load_snapshots(wal_path: Union[str, Path]) -> list[Snapshot]:
    wal_path = Path(wal_path)
    run_id = wal_path.name[: -len(".wal")] if wal_path.name.endswith(".wal") else wal_path.name
    snaps = []
    for p in wal_path.parent.glob(f"{run_id}.*.snap"):
        doc = json.loads(p.read_text(encoding="utf-8"))
        snaps.append(Snapshot(doc["seq"], doc["plan_version"], doc["state"]))
    return sorted(snaps, key=lambda s: s.seq)


def _records_of(log) -> tuple[list[TraceRecord], Optional[list[Snapshot]]]:
    if isinstance(log, WriteAheadLog):
        return list(log.records), log.snapshots
    if isinstance(log, (str, Path)):
        return read_wal(log), load_snapshots(log)
    items = list(log)
    records = items if all(isinstance(r, TraceRecord) for r in items) else read_wal(items)
    expected = 1
    for r in records:
        if r.seq != expected:
            raise SeqGap(r.seq, expected)
        expected += 1
    return records, None


def iter_replay(
    records: Iterable[TraceRecord],
    plan: Optional[Plan] = None,
    state: Optional[ExecutionState] = None,
    start: int = 0,
) -> Iterator[tuple[int, ExecutionState]]:
    """Fold records after ``start`` one at a time, yielding ``(seq, state)``.

    The same state object is mutated and yielded each time; copy it if needed.
    """
    if state is None and plan is not None:
        records = list(records)
        if not records or records[0].kind != "replan":
            state = ExecutionState.initial(plan)
    for rec in records:
        if rec.seq <= start:
            continue
        if state is None:
            if rec.kind != "replan":
                raise CorruptRecord(rec.seq, "log does not start with a plan record")
            state = ExecutionState.from_replan_record(rec.body)
            yield rec.seq, state
            continue
        if rec.plan_id != state.plan.id:
            raise CorruptRecord(rec.seq, f"plan id {rec.plan_id!r} does not match {state.plan.id!r}")
        state.apply_record(rec.kind, rec.body, rec.clock, seq=rec.seq)
        expected_version = rec.body["to_version"] if rec.kind == "replan" else state.plan.version
        if rec.plan_version != expected_version:
            raise CorruptRecord(rec.seq, f"record version {rec.plan_version} but plan version {state.plan.version}")
        yield rec.seq, state


def replay(
    log: Union[WriteAheadLog, str, Path, Iterable[Any]],
    upto: Optional[int] = None,
    plan: Optional[Plan] = None,
    snapshots: Optional[Iterable[Snapshot]] = None,
    use_snapshots: bool = True,
) -> ExecutionState:
    """Fold records (from the latest usable snapshot, if any) into an ExecutionState."""
    records, found = _records_of(log)
    if snapshots is None:
        snapshots = found
    limit = records[-1].seq if records and upto is None else (upto or 0)

    state: Optional[ExecutionState] = None
    start = 0
    if use_snapshots:
        usable = [s for s in (snapshots or ()) if s.seq <= limit]
        if usable:
            best = max(usable, key=lambda s: s.seq)
            state = ExecutionState.from_dict(best.state)
            start = best.seq
    for _, state in iter_replay(records[:limit], plan=plan if state is None else None, state=state, start=start):
        pass
    if state is None:
        if plan is None:
            raise ValueError("empty log: pass the plan to obtain its initial state")
        state = ExecutionState.initial(plan)
    return state


__all__ = [
    "CorruptRecord",
    "IoFailure",
    "SeqGap",
    "Snapshot",
    "TraceRecord",
    "WriteAheadLog",
    "iter_replay",
    "load_snapshots",
    "read_wal",
    "replay",
    "snapshot_path",
]
