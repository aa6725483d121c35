"""Reference plans used by tests, the CLI samples and the bench."""

from __future__ import annotations

from dagharness.executor import FaultScript
from dagharness.plan import (
    JoinMode,
    NodeConfig,
    OutputContract,
    Plan,
    SideEffect,
    field_exists,
    make_plan,
)

BUGFIX_EDGES = (
    ("search_auth", "read_auth"),
    ("search_utils", "read_utils"),
    ("read_auth", "analyze"),
    ("read_utils", "analyze"),
    ("analyze", "fix_A"),
    ("analyze", "fix_B"),
    ("analyze", "update_docs"),
    ("fix_A", "run_tests"),
    ("fix_B", "run_tests"),
    ("run_tests", "report"),
    ("update_docs", "report"),
)


def bugfix_plan(plan_id: str = "bugfix", retry_budget: int = 2) -> Plan:
    """Ten-node bug-fix workflow: two parallel searches and reads, analysis,
    two alternative fixes joined by any_of, tests, docs and a final report."""

    def cfg(action, field="result", **kw):
        kw.setdefault("retry_budget", retry_budget)
        return NodeConfig(action=action, contract=OutputContract((field_exists(field),)), **kw)

    config = {
        "search_auth": cfg("search", "hits"),
        "search_utils": cfg("search", "hits"),
        "read_auth": cfg("read_file", "content"),
        "read_utils": cfg("read_file", "content"),
        "analyze": cfg("analyze", "root_cause"),
        "fix_A": cfg("write_fix", "patch", any_of_group="fix", side_effect=SideEffect.LOW_WRITE),
        "fix_B": cfg("write_fix", "patch", any_of_group="fix", side_effect=SideEffect.LOW_WRITE),
        "run_tests": cfg("run_tests", "passed", join=JoinMode.ANY_OF),
        "update_docs": cfg("update_docs", "docs", side_effect=SideEffect.LOW_WRITE),
        "report": cfg("report", "summary"),
    }
    return make_plan(plan_id, config, BUGFIX_EDGES, OutputContract((field_exists("summary"),)))


def bugfix_fault_script() -> FaultScript:
    return FaultScript({"fix_A": [{"op": "fail", "kind": "transient"}]})


BUGFIX_FAULT_DOC = {"fix_A": [{"op": "fail", "kind": "transient"}]}
