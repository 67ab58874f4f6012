"""Coding agent and the per-node create / execute / check / revise loop."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from geoflow.core import EventKind, Ledger, StageLabel, TaskInstruction, Workspace
from geoflow.data_summary import DataProfile
from geoflow.errors import NodeFailed, ParameterError
from geoflow.llm import Gateway, PromptRegistry, extract_code, render_prompt
from geoflow.planner import WorkflowDAG, WorkflowNode, validate_dag
from geoflow.retrieval import DEFAULT_K, SearchResult, VectorIndex
from geoflow.sandbox import ExecutionRecord, SandboxConfig, ToolScript, execute_script
from geoflow.validation import (
    KEYVALUE_KINDS,
    ValidationReport,
    ValidationRule,
    default_rules_for,
    evaluate_rules,
)

log = logging.getLogger(__name__)

NODE_SPEC = "node.json"
FEEDBACK_EXCERPT = 4000


@dataclass(frozen=True)
class DiagnosticFeedback:
    node_id: str
    round: int
    kind: str
    detail: str
    suggested_focus: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("runtime_error", "validation_failure"):
            raise ParameterError(f"unknown feedback kind {self.kind!r}")
        if not self.detail.strip():
            raise ParameterError("feedback detail is empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "round": self.round,
            "kind": self.kind,
            "detail": self.detail,
            "suggested_focus": self.suggested_focus,
        }


class Checker:
    """Validation side of the loop. Pass/fail comes only from the rules; the
    optional LLM call adds a focus hint to the feedback."""

    def __init__(
        self,
        gateway: Gateway | None = None,
        use_llm: bool = False,
        registry: PromptRegistry | None = None,
    ) -> None:
        self.gateway = gateway
        self.use_llm = use_llm and gateway is not None
        self.registry = registry

    def rules_for(self, node: WorkflowNode) -> list[ValidationRule]:
        rules: list[ValidationRule] = []
        class_ids = node.params.get("class_ids")
        for out in node.outputs:
            rules.extend(default_rules_for(out.kind, artifact=out.name, class_ids=class_ids))
        for raw in node.params.get("rules", []) or []:
            rules.append(ValidationRule.from_dict(raw))
        return rules

    def check(self, record: ExecutionRecord, node: WorkflowNode, workdir: Path) -> ValidationReport:
        report = evaluate_rules(record.manifest, self.rules_for(node), workdir)
        if record.manifest_error:
            report.failures.insert(0, ("manifest", record.manifest_error))
            report.passed = False
        return report

    def feedback(
        self, record: ExecutionRecord, report: ValidationReport, node: WorkflowNode
    ) -> DiagnosticFeedback:
        if not record.ok:
            kind = "runtime_error"
            detail = (record.traceback or f"exit status {record.exit_status}")[-FEEDBACK_EXCERPT:]
        else:
            kind = "validation_failure"
            detail = report.summary()
        focus = None
        if self.use_llm:
            prompt = render_prompt(
                "checker_focus",
                {"node": json.dumps(node.to_dict(), indent=2), "feedback": detail},
                self.registry,
            )
            focus = self.gateway.ask("checker", prompt, stage=node.stage).strip() or None
        return DiagnosticFeedback(node.node_id, record.round, kind, detail, focus)


@dataclass
class ExecutionContext:
    """Services shared by every node of one run."""

    workspace: Workspace
    gateway: Gateway
    task: TaskInstruction | None = None
    index: VectorIndex | None = None
    checker: Checker = field(default_factory=Checker)
    registry: PromptRegistry | None = None
    max_rounds: int = 10
    one_shot: bool = False
    use_knowledge: bool = True
    use_tools: bool = True
    timeout: float = 300.0
    stage_timeouts: dict[str, float] = field(default_factory=dict)
    interpreter: tuple[str, ...] | None = None
    parallel: bool = False

    @property
    def ledger(self) -> Ledger:
        return self.workspace.ledger

    def sandbox_for(self, node: WorkflowNode) -> SandboxConfig:
        cfg = SandboxConfig(
            workdir=self.workspace.node_dir(node.node_id),
            timeout=self.stage_timeouts.get(node.stage.value, self.timeout),
            workspace_root=self.workspace.root,
        )
        if self.interpreter:
            cfg.interpreter = tuple(self.interpreter)
        return cfg


def _format_refs(hits: Sequence[SearchResult], index: VectorIndex | None, with_body: bool) -> str:
    if not hits or index is None:
        return "(none)"
    blocks = []
    for hit in hits:
        entry = index.get(hit.entry_id)
        text = f"- {entry.entry_id} ({entry.tier}): {entry.description}"
        if with_body and entry.body and entry.tier == "reference_script":
            text += f"\n```python\n{entry.body.strip()}\n```"
        blocks.append(text)
    return "\n".join(blocks)


def _commands(index: VectorIndex | None) -> str:
    if index is None:
        return "(none)"
    entries = index.entries("external_command")
    if not entries:
        return "(none)"
    return "\n".join(f"- {e.entry_id}: {e.description}\n  command: {e.body}" for e in entries)


def retrieve_for_node(
    node: WorkflowNode, ctx: ExecutionContext
) -> tuple[list[SearchResult], list[SearchResult]]:
    if ctx.index is None or len(ctx.index) == 0:
        return [], []
    query = f"{node.purpose} " + " ".join(o.kind for o in node.outputs)
    script_refs: list[SearchResult] = []
    knowledge_refs: list[SearchResult] = []
    if ctx.use_tools:
        script_refs = ctx.index.query(query, DEFAULT_K["reference_script"], "reference_script")
    if ctx.use_knowledge:
        knowledge_refs = ctx.index.query(query, DEFAULT_K["knowledge_chunk"], "knowledge_chunk")
    return script_refs, knowledge_refs


def synthesize_node_tool(
    node: WorkflowNode,
    profile: DataProfile,
    script_refs: Sequence[SearchResult],
    knowledge_refs: Sequence[SearchResult],
    gateway: Gateway,
    index: VectorIndex | None = None,
    task: TaskInstruction | None = None,
    registry: PromptRegistry | None = None,
    commands: str | None = None,
) -> ToolScript:
    if not node.outputs:
        raise ParameterError(f"node {node.node_id} declares no outputs")
    prompt = render_prompt(
        "synthesize_tool",
        {
            "task": task.text if task else node.purpose,
            "node": json.dumps(node.to_dict(), indent=2),
            "profile": profile.narrative or "(none)",
            "references": _format_refs(script_refs, index, with_body=True),
            "knowledge": _format_refs(knowledge_refs, index, with_body=False),
            "commands": commands if commands is not None else _commands(index),
        },
        registry,
    )
    body = extract_code(gateway.ask("coder", prompt, stage=node.stage))
    if not body.strip():
        body = "raise SystemExit('coding agent returned an empty script')\n"
    refs = tuple(h.entry_id for h in (*script_refs, *knowledge_refs))
    return ToolScript(node.node_id, 1, body, references=refs, prompt=prompt)


def revise_tool(
    script: ToolScript,
    feedback: DiagnosticFeedback,
    gateway: Gateway,
    node: WorkflowNode | None = None,
    registry: PromptRegistry | None = None,
) -> ToolScript:
    if feedback.node_id != script.node_id or feedback.round != script.round:
        raise ParameterError(
            f"feedback for {feedback.node_id} round {feedback.round} does not match "
            f"script {script.node_id} round {script.round}"
        )
    focus = f"\nChecker hint: {feedback.suggested_focus}\n" if feedback.suggested_focus else ""
    prompt = render_prompt(
        "revise_tool",
        {
            "node_id": script.node_id,
            "round": script.round,
            "node": json.dumps(node.to_dict(), indent=2) if node else script.node_id,
            "previous_body": script.body,
            "feedback_kind": feedback.kind,
            "feedback": feedback.detail,
            "focus_section": focus,
        },
        registry,
    )
    stage = node.stage if node else None
    body = extract_code(gateway.ask("coder", prompt, stage=stage))
    if not body.strip():
        body = "raise SystemExit('coding agent returned an empty revision')\n"
    return ToolScript(
        script.node_id, script.round + 1, body, script.interpreter, script.references, prompt=prompt
    )


def default_output_path(kind: str, name: str) -> str:
    if kind in KEYVALUE_KINDS:
        return f"{name}.json"
    return f"{name}.asc"


def write_node_spec(node: WorkflowNode, dag: WorkflowDAG | None, profile: DataProfile, ws: Workspace) -> dict:
    """Resolve the node's bindings to concrete paths and write ``node.json``."""
    workdir = ws.node_dir(node.node_id)
    ancestors = dag.ancestors(node.node_id) if dag is not None else set()
    inputs = []
    for port in node.inputs:
        resolved = None
        producer = dag.producer_of(port.name, ancestors) if dag is not None else None
        if producer is not None:
            out = next(o for o in dag.node(producer).outputs if o.name == port.name)
            resolved = str(ws.node_dir(producer) / (out.path or default_output_path(out.kind, out.name)))
        else:
            item = profile.resolve(port.name) or (port.path and profile.resolve(port.path))
            if item:
                resolved = item.path
        inputs.append({"name": port.name, "kind": port.kind, "path": resolved, "producer": producer})
    outputs = [
        {
            "name": o.name,
            "kind": o.kind,
            "path": o.path or default_output_path(o.kind, o.name),
        }
        for o in node.outputs
    ]
    spec = {
        "id": node.node_id,
        "purpose": node.purpose,
        "stage": node.stage.value,
        "inputs": inputs,
        "outputs": outputs,
        "params": node.params,
    }
    (workdir / NODE_SPEC).write_text(json.dumps(spec, indent=2, sort_keys=True), encoding="utf-8")
    return spec


@dataclass
class NodeOutcome:
    node_id: str
    status: str  # completed | failed | skipped
    record: ExecutionRecord | None = None
    report: ValidationReport | None = None
    debug_rounds: int = 0
    running_time: float = 0.0
    stage: StageLabel | None = None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "status": self.status,
            "stage": None if self.stage is None else self.stage.value,
            "debug_rounds": self.debug_rounds,
            "running_time_s": round(self.running_time, 6),
            "report": None if self.report is None else self.report.to_dict(),
            "exit_status": None if self.record is None else self.record.exit_status,
            "error": self.error,
        }


def run_node_loop(
    node: WorkflowNode,
    profile: DataProfile,
    ctx: ExecutionContext,
    max_rounds: int | None = None,
    dag: WorkflowDAG | None = None,
) -> tuple[ExecutionRecord, ValidationReport, int]:
    """Synthesize, execute, and check one node until it runs cleanly and
    passes validation, revising on every failure. Returns the final record,
    report and number of debug rounds; raises NodeFailed when the round
    budget runs out."""
    max_rounds = ctx.max_rounds if max_rounds is None else max_rounds
    if max_rounds < 1:
        raise ParameterError("max_rounds must be positive")
    if ctx.one_shot:
        max_rounds = 1
    ledger = ctx.ledger
    stage = node.stage
    ledger.emit(EventKind.NODE_STARTED, {"node_id": node.node_id, "purpose": node.purpose}, stage)
    write_node_spec(node, dag, profile, ctx.workspace)
    cfg = ctx.sandbox_for(node)
    script_refs, knowledge_refs = retrieve_for_node(node, ctx)
    script = synthesize_node_tool(
        node, profile, script_refs, knowledge_refs, ctx.gateway, ctx.index, ctx.task, ctx.registry,
        commands=_commands(ctx.index) if ctx.use_tools else "(none)",
    )
    record: ExecutionRecord | None = None
    report: ValidationReport | None = None
    for round_no in range(1, max_rounds + 1):
        ledger.emit(
            EventKind.TOOL_CREATED,
            {"node_id": node.node_id, "round": script.round, "references": list(script.references), "body": script.body},
            stage,
        )
        record = execute_script(script, cfg)
        ledger.emit(EventKind.EXECUTION, record.to_payload(), stage)
        report = ctx.checker.check(record, node, cfg.workdir)
        ledger.emit(EventKind.VALIDATION, {"node_id": node.node_id, "round": script.round, **report.to_dict()}, stage)
        if ctx.one_shot:
            # one-shot ablation: validation is recorded but never drives revision
            if record.ok:
                return record, report, 0
            break
        if record.ok and report.passed:
            return record, report, round_no - 1
        if round_no == max_rounds:
            break
        feedback = ctx.checker.feedback(record, report, node)
        script = revise_tool(script, feedback, ctx.gateway, node, ctx.registry)
        ledger.emit(
            EventKind.REVISION,
            {"node_id": node.node_id, "from_round": feedback.round, "to_round": script.round, **{
                "kind": feedback.kind, "detail": feedback.detail, "suggested_focus": feedback.suggested_focus}},
            stage,
        )
    raise NodeFailed(node.node_id, record, report, round_no)


@dataclass
class RunResult:
    order: list[str] = field(default_factory=list)
    nodes: dict[str, NodeOutcome] = field(default_factory=dict)
    stage_times: dict[str, float] = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return all(o.status == "completed" for o in self.nodes.values())

    @property
    def debug_rounds(self) -> int:
        return sum(o.debug_rounds for o in self.nodes.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "order": self.order,
            "nodes": {k: v.to_dict() for k, v in self.nodes.items()},
            "stage_times_s": {k: round(v, 6) for k, v in self.stage_times.items()},
            "succeeded": self.succeeded,
        }


def _run_one(node: WorkflowNode, profile: DataProfile, ctx: ExecutionContext, dag: WorkflowDAG) -> NodeOutcome:
    started = time.monotonic()
    try:
        record, report, rounds = run_node_loop(node, profile, ctx, dag=dag)
    except NodeFailed as exc:
        outcome = NodeOutcome(
            node.node_id, "failed", exc.record, exc.report, max(exc.rounds - 1, 0), stage=node.stage, error=str(exc)
        )
    else:
        outcome = NodeOutcome(node.node_id, "completed", record, report, rounds, stage=node.stage)
    outcome.running_time = time.monotonic() - started
    ctx.ledger.emit(EventKind.NODE_FINISHED, outcome.to_dict(), node.stage)
    return outcome


def run_workflow(dag: WorkflowDAG, profile: DataProfile, ctx: ExecutionContext) -> RunResult:
    """Run every node in deterministic topological order. A failed node
    marks its descendants skipped; unrelated branches still run."""
    report = validate_dag(dag, profile)
    if not report.ok:
        raise ParameterError("workflow is not a valid DAG: " + "; ".join(report.violations))
    result = RunResult(order=list(report.order))
    if ctx.parallel:
        _run_parallel(dag, profile, ctx, result)
    else:
        for node_id in report.order:
            if node_id in result.nodes:
                continue
            outcome = _run_one(dag.node(node_id), profile, ctx, dag)
            result.nodes[node_id] = outcome
            if outcome.status == "failed":
                _skip_descendants(dag, node_id, result, ctx)
    result.nodes = {nid: result.nodes[nid] for nid in report.order}
    for node_id in report.order:
        outcome = result.nodes[node_id]
        if outcome.stage is not None:
            key = outcome.stage.value
            result.stage_times[key] = result.stage_times.get(key, 0.0) + outcome.running_time
    for stage in StageLabel:
        members = [o for o in result.nodes.values() if o.stage == stage]
        if not members:
            continue
        ctx.ledger.emit(
            EventKind.STAGE_DONE,
            {
                "nodes": [o.node_id for o in members],
                "completed": sum(o.status == "completed" for o in members),
                "debug_rounds": sum(o.debug_rounds for o in members),
                "running_time_s": round(result.stage_times.get(stage.value, 0.0), 6),
            },
            stage,
        )
    return result


def _skip_descendants(dag: WorkflowDAG, failed: str, result: RunResult, ctx: ExecutionContext) -> None:
    for desc in sorted(dag.descendants(failed)):
        if desc in result.nodes:
            continue
        node = dag.node(desc)
        result.nodes[desc] = NodeOutcome(desc, "skipped", stage=node.stage, error=f"upstream node {failed} failed")
        ctx.ledger.emit(EventKind.NODE_SKIPPED, {"node_id": desc, "because": failed}, node.stage)


def _run_parallel(dag: WorkflowDAG, profile: DataProfile, ctx: ExecutionContext, result: RunResult) -> None:
    pending = {n.node_id for n in dag.nodes}
    running: dict[Future, str] = {}
    with ThreadPoolExecutor(max_workers=max(1, len(pending))) as pool:
        while pending or running:
            for node_id in sorted(pending):
                if node_id in result.nodes:
                    pending.discard(node_id)
                    continue
                preds = dag.predecessors(node_id)
                if all(result.nodes.get(p) and result.nodes[p].status == "completed" for p in preds):
                    pending.discard(node_id)
                    running[pool.submit(_run_one, dag.node(node_id), profile, ctx, dag)] = node_id
            if not running:
                break
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in done:
                node_id = running.pop(fut)
                outcome = fut.result()
                result.nodes[node_id] = outcome
                if outcome.status == "failed":
                    _skip_descendants(dag, node_id, result, ctx)
