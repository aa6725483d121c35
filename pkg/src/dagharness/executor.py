"""Node actions, output contracts and the scripted fault-injecting executor."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Union

from dagharness.context import ContextViolation, GuardedView
from dagharness.plan import FIELD_TYPES, NodeConfig, NodeId, OutputContract, RuleKind, SideEffect, ValidationRule
from dagharness.recovery import ErrorKind, Failure, classify_error


class UnknownAction(Exception):
    pass


class UnknownPredicate(Exception):
    pass


def _non_empty(payload: Mapping) -> bool:
    return bool(payload)


def _tests_pass(payload: Mapping) -> bool:
    return payload.get("failed", 0) == 0


DEFAULT_PREDICATES: dict[str, Callable[[Mapping], bool]] = {
    "non_empty": _non_empty,
    "tests_pass": _tests_pass,
}


@dataclass(frozen=True)
class RuleResult:
    rule: str
    passed: bool

    def to_doc(self) -> dict:
        return {"rule": self.rule, "passed": self.passed}


def _lookup(payload: Mapping, dotted: str) -> tuple[bool, Any]:
    cur: Any = payload
    for part in dotted.split("."):
        if not isinstance(cur, Mapping) or part not in cur:
            return False, None
        cur = cur[part]
    return True, cur


def _evaluate(rule: ValidationRule, payload: Mapping, predicates: Mapping[str, Callable]) -> bool:
    if rule.kind is RuleKind.PREDICATE:
        fn = predicates.get(rule.name)
        if fn is None:
            raise UnknownPredicate(rule.name)
        return bool(fn(payload))
    present, value = _lookup(payload, rule.field)
    if rule.kind is RuleKind.FIELD_EXISTS:
        return present
    if not present:
        return False
    if rule.kind is RuleKind.FIELD_TYPE:
        return FIELD_TYPES[rule.type_name](value)
    return value in rule.values


def validate_contract(
    payload: Mapping, contract: OutputContract, predicates: Optional[Mapping[str, Callable]] = None
) -> list[RuleResult]:
    """Evaluate every rule, without short-circuiting."""
    predicates = DEFAULT_PREDICATES if predicates is None else predicates
    return [RuleResult(r.describe(), _evaluate(r, payload, predicates)) for r in contract.rules]


def conforming_payload(contract: OutputContract) -> dict:
    """Smallest payload that passes the structural rules of a contract."""
    samples = {"str": "ok", "int": 0, "float": 0.0, "number": 0, "bool": True, "list": [], "dict": {}}
    out: dict = {}

    def put(dotted: str, value: Any) -> None:
        parts = dotted.split(".")
        cur = out
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value

    for r in contract.rules:
        if r.kind is RuleKind.FIELD_EXISTS:
            if not _lookup(out, r.field)[0]:
                put(r.field, "ok")
        elif r.kind is RuleKind.FIELD_TYPE:
            put(r.field, samples[r.type_name])
        elif r.kind is RuleKind.ENUM and r.values:
            put(r.field, r.values[0])
    if not out:
        out["ok"] = True
    return out


# --------------------------------------------------------------------------- results and outcomes


@dataclass(frozen=True)
class ActionResult:
    """What an action returned, before the contract gate."""

    op: str  # succeed | fail | hang
    payload: Optional[dict] = None
    error: Optional[str] = None
    duration_ms: int = 100

    def __post_init__(self):
        if self.op not in ("succeed", "fail", "hang"):
            raise ValueError(f"unknown op {self.op!r}")


class OutcomeKind(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    RETRY = "retry"
    ESCALATE = "escalate"


@dataclass(frozen=True)
class NodeOutput:
    payload: dict
    produced_at: int
    validation: tuple[RuleResult, ...]
    validation_method: str

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.validation)


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    output: Optional[NodeOutput] = None
    failure: Optional[Failure] = None
    timed_out: bool = False
    validation: tuple[RuleResult, ...] = ()

    def __post_init__(self):
        if self.kind is OutcomeKind.SUCCESS and self.output is None:
            raise ValueError("success outcome needs an output")
        if self.kind is OutcomeKind.FAILURE and self.failure is None:
            raise ValueError("failure outcome needs an error kind")

    @classmethod
    def success(cls, output: NodeOutput) -> "Outcome":
        return cls(OutcomeKind.SUCCESS, output=output, validation=output.validation)

    @classmethod
    def fail(cls, kind: ErrorKind, detail: str = "", timed_out: bool = False, validation=()) -> "Outcome":
        return cls(OutcomeKind.FAILURE, failure=Failure(kind, detail), timed_out=timed_out, validation=tuple(validation))

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {"outcome": self.kind.value}
        if self.output is not None:
            doc["payload"] = self.output.payload
        if self.failure is not None:
            doc["error"] = self.failure.kind.value
            doc["detail"] = self.failure.detail
        if self.timed_out:
            doc["timed_out"] = True
        return doc


ESCALATE_ERRORS = ("approval_required", "escalate")


def finalize(
    result: ActionResult,
    config: NodeConfig,
    clock: int,
    predicates: Optional[Mapping[str, Callable]] = None,
) -> Outcome:
    """Turn a raw action result into an Outcome; success only if the contract holds."""
    if result.op == "hang":
        if result.duration_ms > config.timeout_ms:
            return Outcome.fail(ErrorKind.TRANSIENT, f"exceeded timeout of {config.timeout_ms} ms", timed_out=True)
        result = ActionResult("succeed", result.payload, None, result.duration_ms)
    if result.op == "fail":
        err = result.error or "structural"
        if err in ESCALATE_ERRORS:
            return Outcome(OutcomeKind.ESCALATE, failure=Failure(ErrorKind.TRANSIENT, err))
        if err == "retry":
            return Outcome(OutcomeKind.RETRY, failure=Failure(ErrorKind.TRANSIENT, err))
        return Outcome.fail(classify_error(err), err)
    payload = result.payload if result.payload is not None else conforming_payload(config.contract)
    report = tuple(validate_contract(payload, config.contract, predicates))
    if not all(r.passed for r in report):
        failed = "; ".join(r.rule for r in report if not r.passed)
        return Outcome.fail(ErrorKind.CONTRACT_VIOLATION, f"contract rule failed: {failed}", validation=report)
    return Outcome.success(NodeOutput(dict(payload), clock, report, config.contract.method.value))


# --------------------------------------------------------------------------- actions


Action = Callable[[GuardedView, dict], Union[ActionResult, dict]]


@dataclass
class RegisteredAction:
    fn: Action
    side_effect: SideEffect = SideEffect.READ_ONLY


class ActionRegistry:
    def __init__(self):
        self._actions: dict[str, RegisteredAction] = {}

    def register(self, name: str, fn: Action, side_effect: SideEffect = SideEffect.READ_ONLY) -> None:
        self._actions[name] = RegisteredAction(fn, side_effect)

    def resolve(self, name: str) -> RegisteredAction:
        try:
            return self._actions[name]
        except KeyError:
            raise UnknownAction(name) from None

    def __contains__(self, name: object) -> bool:
        return name in self._actions

    def names(self) -> list[str]:
        return sorted(self._actions)


def _as_result(value: Union[ActionResult, dict], default_ms: int) -> ActionResult:
    if isinstance(value, ActionResult):
        return value
    return ActionResult("succeed", dict(value), None, default_ms)


# --------------------------------------------------------------------------- fault scripts


@dataclass(frozen=True)
class ScriptOp:
    op: str
    payload: Optional[dict] = None
    kind: Optional[str] = None
    ms: Optional[int] = None


class FaultScript:
    """Per-node queues of scripted outcomes, consumed one per attempt.

    Keys are node ids, or ``node@action`` to script only attempts running that
    action (used to give a patched or fallback action its own behavior). An op
    may carry ``repeat`` to stand for that many consecutive copies.
    """

    def __init__(self, entries: Optional[Mapping[str, list]] = None):
        self.entries: dict[str, list[ScriptOp]] = {}
        for key, ops in (entries or {}).items():
            expanded: list[ScriptOp] = []
            for op in ops:
                op = dict(op)
                name = op.pop("op")
                repeat = op.pop("repeat", 1)
                unknown = set(op) - {"payload", "kind", "ms"}
                if name not in ("succeed", "fail", "hang") or unknown:
                    raise ValueError(f"bad fault script entry for {key}: {name} {sorted(unknown)}")
                expanded.extend([ScriptOp(name, op.get("payload"), op.get("kind"), op.get("ms"))] * repeat)
            self.entries[key] = expanded
        self.cursor: dict[str, int] = {}

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FaultScript":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_doc(self) -> dict:
        out = {}
        for key, ops in self.entries.items():
            out[key] = [
                {k: v for k, v in (("op", o.op), ("payload", o.payload), ("kind", o.kind), ("ms", o.ms)) if v is not None}
                for o in ops
            ]
        return out

    def next(self, node: NodeId, action: str) -> Optional[ScriptOp]:
        scoped = f"{node}@{action}"
        key = scoped if scoped in self.entries else node
        ops = self.entries.get(key)
        if not ops:
            return None
        i = self.cursor.get(key, 0)
        if i >= len(ops):
            return None
        self.cursor[key] = i + 1
        return ops[i]

    def reset(self) -> None:
        self.cursor.clear()


class ScriptedExecutor:
    """Deterministic mock executor driven by a FaultScript.

    When the script for a node is exhausted, a registered action is called if
    one exists; otherwise the node succeeds with a payload conforming to its
    contract.
    """

    def __init__(
        self,
        script: Optional[FaultScript] = None,
        registry: Optional[ActionRegistry] = None,
        durations: Optional[Mapping[NodeId, int]] = None,
        default_ms: int = 100,
    ):
        self.script = script or FaultScript()
        self.registry = registry
        self.durations = dict(durations or {})
        self.default_ms = default_ms

    def duration(self, node: NodeId) -> int:
        base = node.split(".")[0]
        return self.durations.get(node, self.durations.get(base, self.default_ms))

    def run(self, node: NodeId, config: NodeConfig, exec_view: GuardedView) -> ActionResult:
        ms = self.duration(node)
        op = self.script.next(node, config.action)
        if op is None:
            if self.registry is not None and config.action in self.registry:
                return _as_result(self.registry.resolve(config.action).fn(exec_view, dict(exec_view["inputs"])), ms)
            return ActionResult("succeed", None, None, ms)
        if op.op == "hang":
            return ActionResult("hang", op.payload, None, op.ms if op.ms is not None else 2 * config.timeout_ms)
        if op.op == "fail":
            return ActionResult("fail", None, op.kind or "structural", op.ms if op.ms is not None else ms)
        return ActionResult("succeed", op.payload, None, op.ms if op.ms is not None else ms)


class RegistryExecutor:
    """Executor that only calls registered actions."""

    def __init__(self, registry: ActionRegistry, default_ms: int = 100):
        self.registry = registry
        self.default_ms = default_ms

    def run(self, node: NodeId, config: NodeConfig, exec_view: GuardedView) -> ActionResult:
        action = self.registry.resolve(config.action)
        return _as_result(action.fn(exec_view, dict(exec_view["inputs"])), self.default_ms)


def execute_node(
    node: NodeId,
    config: NodeConfig,
    exec_context: GuardedView,
    executor: Any,
    clock: int = 0,
    predicates: Optional[Mapping[str, Callable]] = None,
) -> Outcome:
    """Run one attempt and pass the result through the contract gate."""
    result = executor.run(node, config, exec_context)
    return finalize(result, config, clock + result.duration_ms, predicates)


__all__ = [
    "ActionRegistry",
    "ActionResult",
    "ContextViolation",
    "DEFAULT_PREDICATES",
    "FaultScript",
    "NodeOutput",
    "Outcome",
    "OutcomeKind",
    "RegistryExecutor",
    "RuleResult",
    "ScriptedExecutor",
    "UnknownAction",
    "UnknownPredicate",
    "conforming_payload",
    "execute_node",
    "finalize",
    "validate_contract",
]
