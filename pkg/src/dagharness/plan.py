"""Execution plans: data model, structural validation, replanning and the JSON plan format."""

from __future__ import annotations

import hashlib
import heapq
import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from types import MappingProxyType
from typing import Any, Callable, Iterable, Mapping, Optional

NodeId = str
Edge = tuple[str, str]


class JoinMode(str, Enum):
    ALL_OF = "all_of"
    ANY_OF = "any_of"


class SideEffect(str, Enum):
    READ_ONLY = "read_only"
    LOW_WRITE = "low_write"
    HIGH_WRITE = "high_write"

    @property
    def rank(self) -> int:
        return _SIDE_EFFECT_RANK[self]


_SIDE_EFFECT_RANK = {SideEffect.READ_ONLY: 0, SideEffect.LOW_WRITE: 1, SideEffect.HIGH_WRITE: 2}


class ValidationMethod(str, Enum):
    SYNTACTIC = "syntactic"
    CODE_SEMANTIC = "code_semantic"
    EXTERNAL = "external"


class RuleKind(str, Enum):
    FIELD_EXISTS = "field_exists"
    FIELD_TYPE = "field_type"
    ENUM = "enum"
    PREDICATE = "predicate"


# type names accepted by field_type rules
FIELD_TYPES: dict[str, Callable[[Any], bool]] = {
    "str": lambda v: isinstance(v, str),
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "float": lambda v: isinstance(v, float),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "bool": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, list),
    "dict": lambda v: isinstance(v, dict),
}


class PlanError(Exception):
    pass


class ParseError(PlanError):
    """Malformed plan document. ``location`` is a line number or a field path."""

    def __init__(self, message: str, location: Any = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location is not None else message)


class MissingField(ParseError):
    pass


class DuplicateNodeId(ParseError):
    pass


class CycleDetected(PlanError):
    pass


class InvalidStructure(PlanError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__("replan refused: " + "; ".join(f.message for f in report.failures))


@dataclass(frozen=True)
class ValidationRule:
    kind: RuleKind
    field: Optional[str] = None
    type_name: Optional[str] = None
    values: tuple = ()
    name: Optional[str] = None

    def describe(self) -> str:
        if self.kind is RuleKind.FIELD_EXISTS:
            return f"field exists: {self.field}"
        if self.kind is RuleKind.FIELD_TYPE:
            return f"field type: {self.field} is {self.type_name}"
        if self.kind is RuleKind.ENUM:
            return f"field enum: {self.field} in {list(self.values)}"
        return f"predicate: {self.name}"

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is RuleKind.PREDICATE:
            doc["name"] = self.name
        else:
            doc["field"] = self.field
        if self.kind is RuleKind.FIELD_TYPE:
            doc["type"] = self.type_name
        if self.kind is RuleKind.ENUM:
            doc["values"] = list(self.values)
        return doc


def field_exists(name: str) -> ValidationRule:
    return ValidationRule(RuleKind.FIELD_EXISTS, field=name)


def field_type(name: str, type_name: str) -> ValidationRule:
    return ValidationRule(RuleKind.FIELD_TYPE, field=name, type_name=type_name)


def field_enum(name: str, values: Iterable[Any]) -> ValidationRule:
    return ValidationRule(RuleKind.ENUM, field=name, values=tuple(values))


def predicate(name: str) -> ValidationRule:
    return ValidationRule(RuleKind.PREDICATE, name=name)


@dataclass(frozen=True)
class OutputContract:
    rules: tuple[ValidationRule, ...]
    method: ValidationMethod = ValidationMethod.SYNTACTIC

    def to_doc(self) -> dict:
        return {"method": self.method.value, "rules": [r.to_doc() for r in self.rules]}


@dataclass(frozen=True)
class NodeConfig:
    action: str
    contract: OutputContract
    join: JoinMode = JoinMode.ALL_OF
    retry_budget: int = 2
    timeout_ms: int = 30_000
    side_effect: SideEffect = SideEffect.READ_ONLY
    any_of_group: Optional[str] = None

    def __post_init__(self):
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be non-negative")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")

    def to_doc(self, node: NodeId) -> dict:
        doc = {
            "id": node,
            "action": self.action,
            "join": self.join.value,
            "retry_budget": self.retry_budget,
            "timeout_ms": self.timeout_ms,
            "side_effect": self.side_effect.value,
            "contract": self.contract.to_doc(),
        }
        if self.any_of_group is not None:
            doc["any_of_group"] = self.any_of_group
        return doc


@dataclass(frozen=True)
class Plan:
    """An immutable plan version: a DAG over node ids plus per-node configuration."""

    id: str
    version: int
    nodes: frozenset
    edges: frozenset
    config: Mapping[NodeId, NodeConfig]
    plan_contract: OutputContract

    def __post_init__(self):
        object.__setattr__(self, "nodes", frozenset(self.nodes))
        object.__setattr__(self, "edges", frozenset(tuple(e) for e in self.edges))
        object.__setattr__(self, "config", MappingProxyType(dict(self.config)))
        if self.version < 1:
            raise ValueError("plan version must be >= 1")
        for u, v in self.edges:
            if u not in self.nodes or v not in self.nodes:
                raise ValueError(f"edge ({u}, {v}) references an unknown node")
        if set(self.config) != set(self.nodes):
            raise ValueError("config must be a total mapping over nodes")

    # frozen dataclasses hash every field by default; config is a mapping proxy
    def __hash__(self) -> int:
        return hash((self.id, self.version, self.nodes, self.edges))

    @cached_property
    def preds(self) -> Mapping[NodeId, tuple[NodeId, ...]]:
        out: dict[NodeId, list] = {n: [] for n in self.nodes}
        for u, v in self.edges:
            out[v].append(u)
        return MappingProxyType({n: tuple(sorted(ps)) for n, ps in out.items()})

    @cached_property
    def succs(self) -> Mapping[NodeId, tuple[NodeId, ...]]:
        out: dict[NodeId, list] = {n: [] for n in self.nodes}
        for u, v in self.edges:
            out[u].append(v)
        return MappingProxyType({n: tuple(sorted(ss)) for n, ss in out.items()})

    @cached_property
    def groups(self) -> Mapping[str, tuple[NodeId, ...]]:
        """any_of group id -> sorted member nodes."""
        out: dict[str, list] = {}
        for n in sorted(self.nodes):
            g = self.config[n].any_of_group
            if g is not None:
                out.setdefault(g, []).append(n)
        return MappingProxyType({g: tuple(ms) for g, ms in out.items()})

    def siblings(self, node: NodeId) -> tuple[NodeId, ...]:
        g = self.config[node].any_of_group
        if g is None:
            return ()
        return tuple(m for m in self.groups[g] if m != node)

    @property
    def entries(self) -> list[NodeId]:
        return sorted(n for n in self.nodes if not self.preds[n])

    @property
    def exits(self) -> list[NodeId]:
        return sorted(n for n in self.nodes if not self.succs[n])

    def structure_hash(self) -> str:
        blob = json.dumps([sorted(self.nodes), sorted(self.edges)]).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_doc(self) -> dict:
        return {
            "id": self.id,
            "version": self.version,
            "nodes": [self.config[n].to_doc(n) for n in sorted(self.nodes)],
            "edges": [list(e) for e in sorted(self.edges)],
            "plan_contract": self.plan_contract.to_doc(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2)


def make_plan(
    plan_id: str,
    config: Mapping[NodeId, NodeConfig],
    edges: Iterable[Edge],
    plan_contract: OutputContract,
    version: int = 1,
) -> Plan:
    return Plan(plan_id, version, frozenset(config), frozenset(edges), config, plan_contract)


# --------------------------------------------------------------------------- validation

CHECKS = (
    "acyclicity",
    "reachability",
    "join_consistency",
    "contract_wellformed",
    "side_effect_consistency",
)


@dataclass(frozen=True)
class ValidationFailure:
    check: str
    subject: Any
    message: str


@dataclass(frozen=True)
class ValidationReport:
    failures: tuple[ValidationFailure, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def failed_checks(self) -> set[str]:
        return {f.check for f in self.failures}

    def to_doc(self) -> dict:
        return {
            "ok": self.ok,
            "failures": [
                {"check": f.check, "subject": f.subject, "message": f.message} for f in self.failures
            ],
        }


def _kahn(nodes: Iterable[NodeId], preds: Mapping, succs: Mapping) -> list[NodeId]:
    indeg = {n: len(preds[n]) for n in nodes}
    heap = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for s in succs[n]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(heap, s)
    return order


def _check_rule(rule: ValidationRule, predicates: Optional[Mapping[str, Any]]) -> Optional[str]:
    if rule.kind is RuleKind.PREDICATE:
        if not rule.name:
            return "predicate rule without a name"
        if predicates is None or rule.name not in predicates:
            return f"unknown predicate {rule.name!r}"
        return None
    if not rule.field:
        return f"{rule.kind.value} rule without a field"
    if rule.kind is RuleKind.FIELD_TYPE and rule.type_name not in FIELD_TYPES:
        return f"unknown type {rule.type_name!r}"
    if rule.kind is RuleKind.ENUM and not rule.values:
        return "enum rule with no values"
    return None


def validate_plan(plan: Plan, predicates: Optional[Mapping[str, Any]] = None) -> ValidationReport:
    """Run the five structural checks in order and collect every failure.

    ``predicates`` is the registry that predicate rules resolve against; when
    omitted the executor's default registry is used.
    """
    if predicates is None:
        from dagharness.executor import DEFAULT_PREDICATES

        predicates = DEFAULT_PREDICATES
    failures: list[ValidationFailure] = []
    nodes = sorted(plan.nodes)
    preds, succs = plan.preds, plan.succs

    # 1. acyclicity
    order = _kahn(nodes, preds, succs)
    if len(order) < len(nodes):
        stuck = sorted(set(nodes) - set(order))
        failures.append(
            ValidationFailure("acyclicity", stuck, f"topological sort reached {len(order)} of {len(nodes)} nodes; cycle through {stuck}")
        )

    # 2. reachability: forward from entries, backward from exits
    def sweep(starts, nxt):
        seen = set(starts)
        queue = deque(starts)
        while queue:
            n = queue.popleft()
            for m in nxt[n]:
                if m not in seen:
                    seen.add(m)
                    queue.append(m)
        return seen

    from_entry = sweep(plan.entries, succs)
    to_exit = sweep(plan.exits, preds)
    for n in nodes:
        if n not in from_entry:
            failures.append(ValidationFailure("reachability", n, f"{n} is not reachable from any entry node"))
        if n not in to_exit:
            failures.append(ValidationFailure("reachability", n, f"{n} reaches no exit node"))

    # 3. join consistency
    for n in nodes:
        cfg = plan.config[n]
        ps = preds[n]
        if cfg.join is JoinMode.ANY_OF:
            if len(ps) < 2:
                failures.append(ValidationFailure("join_consistency", n, f"any_of node {n} has {len(ps)} candidate(s), needs >= 2"))
                continue
            groups = {plan.config[p].any_of_group for p in ps}
            if len(groups) != 1 or None in groups:
                failures.append(ValidationFailure("join_consistency", n, f"candidates of any_of node {n} must share one any_of_group"))
                continue
            (g,) = groups
            if set(plan.groups[g]) != set(ps):
                failures.append(ValidationFailure("join_consistency", n, f"group {g!r} must equal the candidate set of {n}"))
    for g, members in plan.groups.items():
        if len(members) < 2:
            failures.append(ValidationFailure("join_consistency", g, f"any_of group {g!r} has {len(members)} member(s), needs >= 2"))
            continue
        joins = {s for m in members for s in succs[m] if plan.config[s].join is JoinMode.ANY_OF}
        if not joins:
            failures.append(ValidationFailure("join_consistency", g, f"any_of group {g!r} feeds no any_of node"))

    # 4. contract well-formedness
    contracts = [(n, plan.config[n].contract) for n in nodes] + [("<plan>", plan.plan_contract)]
    for n, contract in contracts:
        if not contract.rules:
            failures.append(ValidationFailure("contract_wellformed", n, f"contract of {n} has no validation rule"))
        for rule in contract.rules:
            problem = _check_rule(rule, predicates)
            if problem:
                failures.append(ValidationFailure("contract_wellformed", n, f"{n}: {problem}"))

    # 5. side-effect consistency: any_of siblings would be dispatched speculatively
    for n in nodes:
        cfg = plan.config[n]
        if cfg.side_effect is SideEffect.HIGH_WRITE and cfg.any_of_group is not None:
            failures.append(
                ValidationFailure("side_effect_consistency", n, f"high_write node {n} is an any_of candidate (speculative dispatch)")
            )

    return ValidationReport(tuple(failures))


def topological_order(plan: Plan) -> list[NodeId]:
    """Kahn's sort with ties broken by ascending node id."""
    order = _kahn(sorted(plan.nodes), plan.preds, plan.succs)
    if len(order) < len(plan.nodes):
        raise CycleDetected(f"plan {plan.id} v{plan.version} contains a cycle")
    return order


def longest_path_length(plan: Plan) -> int:
    """Number of nodes on the longest path."""
    depth: dict[NodeId, int] = {}
    for n in topological_order(plan):
        depth[n] = 1 + max((depth[p] for p in plan.preds[n]), default=0)
    return max(depth.values(), default=0)


@dataclass(frozen=True)
class ReplanEvent:
    plan_id: str
    old_version: int
    new_version: int
    reason: str


def derive_replan(
    old: Plan,
    new_structure: tuple[Iterable[NodeId], Iterable[Edge], Mapping[NodeId, NodeConfig]],
    reason: str,
    predicates: Optional[Mapping[str, Any]] = None,
    emit: Optional[Callable[[ReplanEvent], None]] = None,
) -> Plan:
    nodes, edges, config = new_structure
    nodes = frozenset(nodes)
    try:
        candidate = Plan(old.id, old.version + 1, nodes, frozenset(edges), dict(config), old.plan_contract)
    except ValueError as exc:
        raise InvalidStructure(ValidationReport((ValidationFailure("acyclicity", None, str(exc)),))) from exc
    report = validate_plan(candidate, predicates)
    if not report.ok:
        raise InvalidStructure(report)
    if emit is not None:
        emit(ReplanEvent(old.id, old.version, candidate.version, reason))
    return candidate


# --------------------------------------------------------------------------- plan file format

_TOP_KEYS = {"id", "version", "nodes", "edges", "plan_contract"}
_NODE_KEYS = {"id", "action", "join", "any_of_group", "retry_budget", "timeout_ms", "side_effect", "contract"}
_NODE_REQUIRED = _NODE_KEYS - {"any_of_group"}
_CONTRACT_KEYS = {"method", "rules"}


def _require(doc: Mapping, keys: Iterable[str], where: str) -> None:
    for k in keys:
        if k not in doc:
            raise MissingField(f"missing field {k!r}", where)


def _reject_unknown(doc: Mapping, allowed: set, where: str) -> None:
    extra = sorted(set(doc) - allowed)
    if extra:
        raise ParseError(f"unknown field(s) {extra}", where)


def _enum(cls, value, where):
    try:
        return cls(value)
    except ValueError:
        raise ParseError(f"invalid value {value!r}", where) from None


def _int(value, where, minimum):
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ParseError(f"expected integer >= {minimum}, got {value!r}", where)
    return value


def _parse_rule(doc: Any, where: str) -> ValidationRule:
    if not isinstance(doc, dict):
        raise ParseError("rule must be an object", where)
    _require(doc, ["kind"], where)
    kind = _enum(RuleKind, doc["kind"], f"{where}.kind")
    allowed = {
        RuleKind.FIELD_EXISTS: {"kind", "field"},
        RuleKind.FIELD_TYPE: {"kind", "field", "type"},
        RuleKind.ENUM: {"kind", "field", "values"},
        RuleKind.PREDICATE: {"kind", "name"},
    }[kind]
    _reject_unknown(doc, allowed, where)
    _require(doc, sorted(allowed), where)
    if kind is RuleKind.PREDICATE:
        return predicate(doc["name"])
    if kind is RuleKind.FIELD_TYPE:
        return field_type(doc["field"], doc["type"])
    if kind is RuleKind.ENUM:
        if not isinstance(doc["values"], list):
            raise ParseError("values must be an array", f"{where}.values")
        return field_enum(doc["field"], doc["values"])
    return field_exists(doc["field"])


def _parse_contract(doc: Any, where: str) -> OutputContract:
    if not isinstance(doc, dict):
        raise ParseError("contract must be an object", where)
    _reject_unknown(doc, _CONTRACT_KEYS, where)
    _require(doc, ["method", "rules"], where)
    method = _enum(ValidationMethod, doc["method"], f"{where}.method")
    if not isinstance(doc["rules"], list):
        raise ParseError("rules must be an array", f"{where}.rules")
    rules = tuple(_parse_rule(r, f"{where}.rules[{i}]") for i, r in enumerate(doc["rules"]))
    return OutputContract(rules, method)


def plan_from_doc(doc: Any) -> Plan:
    if not isinstance(doc, dict):
        raise ParseError("plan document must be a JSON object", "$")
    _reject_unknown(doc, _TOP_KEYS, "$")
    _require(doc, ["id", "version", "nodes", "edges", "plan_contract"], "$")
    if not isinstance(doc["id"], str):
        raise ParseError("id must be a string", "$.id")
    version = _int(doc["version"], "$.version", 1)
    if not isinstance(doc["nodes"], list):
        raise ParseError("nodes must be an array", "$.nodes")
    config: dict[NodeId, NodeConfig] = {}
    for i, nd in enumerate(doc["nodes"]):
        where = f"$.nodes[{i}]"
        if not isinstance(nd, dict):
            raise ParseError("node must be an object", where)
        _reject_unknown(nd, _NODE_KEYS, where)
        _require(nd, sorted(_NODE_REQUIRED), where)
        nid = nd["id"]
        if not isinstance(nid, str) or not nid:
            raise ParseError("node id must be a non-empty string", f"{where}.id")
        if nid in config:
            raise DuplicateNodeId(f"duplicate node id {nid!r}", f"{where}.id")
        group = nd.get("any_of_group")
        if group is not None and not isinstance(group, str):
            raise ParseError("any_of_group must be a string", f"{where}.any_of_group")
        config[nid] = NodeConfig(
            action=str(nd["action"]),
            contract=_parse_contract(nd["contract"], f"{where}.contract"),
            join=_enum(JoinMode, nd["join"], f"{where}.join"),
            retry_budget=_int(nd["retry_budget"], f"{where}.retry_budget", 0),
            timeout_ms=_int(nd["timeout_ms"], f"{where}.timeout_ms", 1),
            side_effect=_enum(SideEffect, nd["side_effect"], f"{where}.side_effect"),
            any_of_group=group,
        )
    if not isinstance(doc["edges"], list):
        raise ParseError("edges must be an array", "$.edges")
    edges = []
    for i, e in enumerate(doc["edges"]):
        where = f"$.edges[{i}]"
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(x, str) for x in e)):
            raise ParseError("edge must be a [from, to] pair of node ids", where)
        for x in e:
            if x not in config:
                raise ParseError(f"edge references unknown node {x!r}", where)
        edges.append((e[0], e[1]))
    plan_contract = _parse_contract(doc["plan_contract"], "$.plan_contract")
    return Plan(doc["id"], version, frozenset(config), frozenset(edges), config, plan_contract)


def parse_plan(document: bytes | str) -> Plan:
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8: {exc}", "byte %d" % exc.start) from None
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return plan_from_doc(doc)


def with_config(plan: Plan, node: NodeId, cfg: NodeConfig) -> dict[NodeId, NodeConfig]:
    """Copy of the plan's config mapping with one entry replaced."""
    out = dict(plan.config)
    out[node] = cfg
    return out


__all__ = [
    "CHECKS",
    "CycleDetected",
    "DuplicateNodeId",
    "FIELD_TYPES",
    "InvalidStructure",
    "JoinMode",
    "MissingField",
    "NodeConfig",
    "OutputContract",
    "ParseError",
    "Plan",
    "ReplanEvent",
    "RuleKind",
    "SideEffect",
    "ValidationFailure",
    "ValidationMethod",
    "ValidationReport",
    "ValidationRule",
    "derive_replan",
    "field_enum",
    "field_exists",
    "field_type",
    "longest_path_length",
    "make_plan",
    "parse_plan",
    "plan_from_doc",
    "predicate",
    "topological_order",
    "validate_plan",
    "with_config",
]
