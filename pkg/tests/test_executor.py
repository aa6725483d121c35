import json

import pytest

from dagharness.context import ContextPartition, ContextViolation
from dagharness.executor import (
    ActionRegistry,
    ActionResult,
    FaultScript,
    OutcomeKind,
    RegistryExecutor,
    ScriptedExecutor,
    UnknownAction,
    UnknownPredicate,
    conforming_payload,
    execute_node,
    finalize,
    validate_contract,
)
from dagharness.plan import NodeConfig, OutputContract, field_enum, field_exists, field_type, predicate
from dagharness.recovery import ErrorKind

from helpers import CONTRACT


def view(**kw):
    base = {"inputs": {}, "artifacts": {}, "budget": {}, "node": "n"}
    base.update(kw)
    return ContextPartition(exec=base).exec_view()


class TestValidateContract:
    def test_all_rules_evaluated(self):
        contract = OutputContract((field_exists("a"), field_type("b", "int"), field_enum("c", ("x", "y"))))
        results = validate_contract({"a": 1, "b": "no", "c": "x"}, contract)
        assert [r.passed for r in results] == [True, False, True]

    def test_dotted_fields(self):
        contract = OutputContract((field_exists("tests.passed"), field_type("tests.count", "int")))
        assert all(r.passed for r in validate_contract({"tests": {"passed": True, "count": 3}}, contract))
        assert not validate_contract({"tests": 1}, contract)[0].passed

    def test_predicate(self):
        contract = OutputContract((predicate("tests_pass"),))
        assert validate_contract({"failed": 0}, contract)[0].passed
        assert not validate_contract({"failed": 2}, contract)[0].passed
        with pytest.raises(UnknownPredicate):
            validate_contract({}, OutputContract((predicate("nope"),)))

    def test_conforming_payload_passes(self):
        contract = OutputContract((field_exists("x.y"), field_type("n", "int"), field_enum("e", ("a", "b"))))
        assert all(r.passed for r in validate_contract(conforming_payload(contract), contract))


class TestFinalize:
    cfg = NodeConfig("act", CONTRACT, timeout_ms=1000)

    def test_success(self):
        out = finalize(ActionResult("succeed", {"result": 3}), self.cfg, 5)
        assert out.kind is OutcomeKind.SUCCESS and out.output.payload == {"result": 3}
        assert out.output.produced_at == 5

    def test_contract_violation(self):
        out = finalize(ActionResult("succeed", {"other": 1}), self.cfg, 0)
        assert out.kind is OutcomeKind.FAILURE and out.failure.kind is ErrorKind.CONTRACT_VIOLATION
        assert [r.passed for r in out.validation] == [False]

    def test_hang_past_timeout(self):
        out = finalize(ActionResult("hang", None, None, 1001), self.cfg, 0)
        assert out.timed_out and out.kind is OutcomeKind.FAILURE

    def test_hang_within_timeout_succeeds(self):
        assert finalize(ActionResult("hang", None, None, 1000), self.cfg, 0).kind is OutcomeKind.SUCCESS

    def test_approval_escalates(self):
        out = finalize(ActionResult("fail", None, "approval_required"), self.cfg, 0)
        assert out.kind is OutcomeKind.ESCALATE

    def test_error_classified(self):
        out = finalize(ActionResult("fail", None, "403 forbidden"), self.cfg, 0)
        assert out.failure.kind is ErrorKind.AUTH_ERROR

    def test_bad_op(self):
        with pytest.raises(ValueError):
            ActionResult("explode")


class TestScript:
    def test_ops_consumed_in_order_then_default(self):
        script = FaultScript({"n": [{"op": "fail", "kind": "transient"}, {"op": "succeed", "payload": {"result": 1}}]})
        ex = ScriptedExecutor(script)
        cfg = NodeConfig("act", CONTRACT)
        ops = [ex.run("n", cfg, view()).op for _ in range(3)]
        assert ops == ["fail", "succeed", "succeed"]

    def test_repeat(self):
        script = FaultScript({"n": [{"op": "fail", "kind": "x", "repeat": 3}]})
        assert [script.next("n", "a").op for _ in range(3)] == ["fail"] * 3
        assert script.next("n", "a") is None

    def test_scoped_entries(self):
        script = FaultScript({"n": [{"op": "fail"}], "n@a.patched": [{"op": "succeed"}]})
        assert script.next("n", "a.patched").op == "succeed"
        assert script.next("n", "a").op == "fail"

    def test_deterministic_after_reset(self):
        doc = {"n": [{"op": "fail", "kind": "t"}, {"op": "hang", "ms": 9}]}
        script = FaultScript(doc)
        first = [script.next("n", "a") for _ in range(3)]
        script.reset()
        assert [script.next("n", "a") for _ in range(3)] == first
        assert FaultScript(json.loads(json.dumps(script.to_doc()))).entries == script.entries

    def test_rejects_unknown_op(self):
        with pytest.raises(ValueError):
            FaultScript({"n": [{"op": "boom"}]})


class TestRegistry:
    def test_registered_action_runs(self):
        reg = ActionRegistry()
        reg.register("double", lambda ctx, inputs: {"result": 2 * inputs["a"]["result"]})
        out = execute_node("b", NodeConfig("double", CONTRACT), view(inputs={"a": {"result": 4}}), RegistryExecutor(reg))
        assert out.kind is OutcomeKind.SUCCESS and out.output.payload == {"result": 8}

    def test_unknown_action(self):
        with pytest.raises(UnknownAction):
            execute_node("b", NodeConfig("nope", CONTRACT), view(), RegistryExecutor(ActionRegistry()))

    def test_action_reading_diag_key_is_rejected(self):
        reg = ActionRegistry()
        reg.register("peek", lambda ctx, inputs: {"result": ctx["failure_history"]})
        with pytest.raises(ContextViolation):
            execute_node("b", NodeConfig("peek", CONTRACT), view(), RegistryExecutor(reg))

    def test_reads_are_recorded(self):
        v = view()
        v["budget"]
        assert v.reads == ["budget"]
