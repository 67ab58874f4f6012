from __future__ import annotations

import json
import time

import pytest
from conftest import CRASHING_TOOL, GOOD_TOOL, OUT_OF_RANGE_TOOL, empty_profile, grid_node, scripted_context

from geoflow.core import EventKind, StageLabel
from geoflow.errors import NodeFailed, ParameterError
from geoflow.executor import DiagnosticFeedback, revise_tool, run_node_loop, run_workflow
from geoflow.llm import Gateway, ScriptedBackend
from geoflow.planner import Port, WorkflowDAG, WorkflowNode
from geoflow.sandbox import ToolScript


def kinds(ctx, kind):
    return [e for e in ctx.ledger.events() if e.kind == kind]


@pytest.mark.parametrize("k", [0, 1, 3])
def test_k_failures_then_success_takes_k_rounds(tmp_path, k):
    ctx = scripted_context(tmp_path, [CRASHING_TOOL] * k + [GOOD_TOOL])
    record, report, rounds = run_node_loop(grid_node(), empty_profile(), ctx, max_rounds=k + 1)
    assert record.ok and report.passed and rounds == k
    assert len(kinds(ctx, EventKind.REVISION)) == k
    assert len(kinds(ctx, EventKind.EXECUTION)) == k + 1


def test_budget_exhaustion_raises_node_failed(tmp_path):
    ctx = scripted_context(tmp_path, [CRASHING_TOOL] * 3 + [GOOD_TOOL])
    with pytest.raises(NodeFailed) as info:
        run_node_loop(grid_node(), empty_profile(), ctx, max_rounds=3)
    assert info.value.rounds == 3 and not info.value.record.ok
    assert len(kinds(ctx, EventKind.REVISION)) == 2


def test_revision_prompt_carries_the_traceback(tmp_path):
    ctx = scripted_context(tmp_path, [CRASHING_TOOL, GOOD_TOOL])
    run_node_loop(grid_node(), empty_profile(), ctx, max_rounds=2)
    (rev,) = kinds(ctx, EventKind.REVISION)
    assert rev.payload["kind"] == "runtime_error" and "synthetic failure" in rev.payload["detail"]
    prompts = [e.payload["prompt"] for e in kinds(ctx, EventKind.LLM_CALL)]
    assert "synthetic failure" in prompts[1]


def test_validation_failure_drives_a_revision(tmp_path):
    ctx = scripted_context(tmp_path, [OUT_OF_RANGE_TOOL, GOOD_TOOL])
    _, report, rounds = run_node_loop(grid_node(), empty_profile(), ctx, max_rounds=2)
    assert rounds == 1 and report.passed
    (rev,) = kinds(ctx, EventKind.REVISION)
    assert rev.payload["kind"] == "validation_failure" and "out of logical range" in rev.payload["detail"]


def test_one_shot_never_revises(tmp_path):
    ctx = scripted_context(tmp_path, [OUT_OF_RANGE_TOOL], one_shot=True)
    record, report, rounds = run_node_loop(grid_node(), empty_profile(), ctx, max_rounds=5)
    assert record.ok and not report.passed and rounds == 0
    assert kinds(ctx, EventKind.REVISION) == []

    crashing = scripted_context(tmp_path / "b", [CRASHING_TOOL], one_shot=True)
    with pytest.raises(NodeFailed):
        run_node_loop(grid_node(), empty_profile(), crashing, max_rounds=5)


def test_node_spec_is_written(tmp_path):
    ctx = scripted_context(tmp_path, [GOOD_TOOL])
    run_node_loop(grid_node(), empty_profile(), ctx, max_rounds=1)
    spec = json.loads((ctx.workspace.node_dir("n1") / "node.json").read_text())
    assert spec["outputs"] == [{"name": "out", "kind": "ndvi", "path": "out.asc"}]


def test_bad_round_budget_is_rejected(tmp_path):
    with pytest.raises(ParameterError):
        run_node_loop(grid_node(), empty_profile(), scripted_context(tmp_path, []), max_rounds=0)


def test_revise_tool_rejects_mismatched_feedback():
    script = ToolScript("n1", 2, "print(1)")
    gw = Gateway(ScriptedBackend({}))
    for fb in (DiagnosticFeedback("n1", 1, "runtime_error", "x"), DiagnosticFeedback("n2", 2, "runtime_error", "x")):
        with pytest.raises(ParameterError):
            revise_tool(script, fb, gw)


def test_feedback_kind_is_checked():
    with pytest.raises(ParameterError):
        DiagnosticFeedback("n1", 1, "hunch", "x")


def _branchy_dag():
    a = WorkflowNode("a", "crash", (), (Port("x", "raster", "x.asc"),), {}, StageLabel.DATA_PREPARATION)
    b = WorkflowNode("b", "use x", (Port("x"),), (Port("y", "raster", "y.asc"),), {}, StageLabel.FEATURE_EXTRACTION)
    c = grid_node("c")
    return WorkflowDAG([a, b, c], [("a", "b")])


def test_failed_node_skips_descendants_but_not_siblings(tmp_path):
    ctx = scripted_context(tmp_path, [CRASHING_TOOL, GOOD_TOOL], max_rounds=1)
    result = run_workflow(_branchy_dag(), empty_profile(), ctx)
    assert {k: v.status for k, v in result.nodes.items()} == {"a": "failed", "b": "skipped", "c": "completed"}
    assert not result.succeeded
    skipped = kinds(ctx, EventKind.NODE_SKIPPED)
    assert [e.payload for e in skipped] == [{"node_id": "b", "because": "a"}]
    done = {e.stage: e.payload for e in kinds(ctx, EventKind.STAGE_DONE)}
    assert done[StageLabel.FEATURE_EXTRACTION]["completed"] == 1


def test_parallel_mode_runs_independent_nodes(tmp_path):
    nodes = [grid_node(f"n{i}") for i in range(3)]
    nodes = [WorkflowNode(n.node_id, n.purpose, n.inputs, (Port("out", "ndvi", "out.asc"),) if i == 0 else
                          (Port(f"out{i}", "raster", "out.asc"),), {}, n.stage) for i, n in enumerate(nodes)]
    slow = GOOD_TOOL.replace("import json", "import json, time\ntime.sleep(0.8)")
    # artifact names differ per node, so let the manifest name follow node.json
    slow = slow.replace('"name": "out"', '"name": json.load(open("node.json"))["outputs"][0]["name"]')
    ctx = scripted_context(tmp_path, [slow], strict=False, parallel=True, max_rounds=1)
    started = time.monotonic()
    result = run_workflow(WorkflowDAG(nodes, []), empty_profile(), ctx)
    elapsed = time.monotonic() - started
    assert result.succeeded and result.order == ["n0", "n1", "n2"]
    assert list(result.nodes) == ["n0", "n1", "n2"]
    assert elapsed < 2.0  # sequential would need at least 2.4s


def test_invalid_dag_is_refused(tmp_path):
    ctx = scripted_context(tmp_path, [])
    dag = WorkflowDAG([grid_node("a"), grid_node("b")], [("a", "b"), ("b", "a")])
    with pytest.raises(ParameterError, match="cycle"):
        run_workflow(dag, empty_profile(), ctx)


def test_diamond_with_a_failing_middle_node(tmp_path):
    def n(nid, ins, outs):
        return WorkflowNode(nid, nid, tuple(Port(i) for i in ins), tuple(Port(o, "raster", "out.asc") for o in outs),
                            {}, StageLabel.DATA_PREPARATION)

    dag = WorkflowDAG([n("a", [], ["out"]), n("b", ["out"], ["bo"]), n("c", ["out"], ["co"]),
                       n("d", ["bo", "co"], ["do"])], [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")])
    named = GOOD_TOOL.replace('"name": "out"', '"name": json.load(open("node.json"))["outputs"][0]["name"]')
    # topological order is a, b, c, d: b gets the crashing script
    ctx = scripted_context(tmp_path, [named, CRASHING_TOOL, named], max_rounds=1)
    result = run_workflow(dag, empty_profile(), ctx)
    assert {k: v.status for k, v in result.nodes.items()} == {
        "a": "completed", "b": "failed", "c": "completed", "d": "skipped"}
