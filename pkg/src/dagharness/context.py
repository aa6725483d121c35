"""Disjoint execution and diagnostic contexts with read instrumentation."""

from __future__ import annotations

from collections.abc import Mapping
from typing import Any, Iterator, Optional

EXEC_KEYS = frozenset({"inputs", "artifacts", "budget", "node"})
DIAG_KEYS = frozenset({"failure_history", "recovery_states", "plan_versions", "annotations"})


class ContextViolation(Exception):
    def __init__(self, reader: str, key: str):
        self.reader = reader
        self.key = key
        super().__init__(f"{reader} may not read {key!r}")


class GuardedView(Mapping):
    """Read-only view that records every key read and rejects keys outside its side."""

    def __init__(self, name: str, data: Mapping[str, Any], allowed: frozenset, extra: Optional[Mapping] = None):
        self.name = name
        self._data = dict(data)
        if extra:
            self._data.update(extra)
        self._allowed = allowed | frozenset(extra or ())
        self.reads: list[str] = []

    def __getitem__(self, key: str) -> Any:
        self.reads.append(key)
        if key not in self._allowed:
            raise ContextViolation(self.name, key)
        return self._data[key]

    def __iter__(self) -> Iterator[str]:
        return iter(k for k in self._data if k in self._allowed)

    def __len__(self) -> int:
        return sum(1 for k in self._data if k in self._allowed)

    def __contains__(self, key: object) -> bool:
        return key in self._allowed and key in self._data


class ContextPartition:
    def __init__(self, exec: Optional[Mapping[str, Any]] = None, diag: Optional[Mapping[str, Any]] = None):
        self.exec = dict(exec or {})
        self.diag = dict(diag or {})
        unknown = (set(self.exec) - EXEC_KEYS) | (set(self.diag) - DIAG_KEYS)
        if unknown:
            raise ValueError(f"keys outside the partition: {sorted(unknown)}")

    def exec_view(self) -> GuardedView:
        return GuardedView("executor", self.exec, EXEC_KEYS)

    def diag_view(self, failure_report: Optional[Mapping] = None) -> GuardedView:
        extra = {"failure": dict(failure_report)} if failure_report is not None else None
        return GuardedView("diagnoser", self.diag, DIAG_KEYS, extra)
