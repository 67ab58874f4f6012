"""End-to-end run of one task: probe, plan, compile, execute."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from geoflow.config import EngineConfig
from geoflow.core import EventKind, StageLabel, TaskInstruction, Workspace, create_workspace
from geoflow.data_summary import DataProfile, summarize_data
from geoflow.errors import GeoflowError, SearchUnavailable
from geoflow.executor import Checker, ExecutionContext, RunResult, run_workflow
from geoflow.llm import CallBudget, Gateway, HttpBackend, PromptRegistry, ScriptedBackend
from geoflow.planner import (
    WorkflowDAG,
    aggregate_plans,
    compile_workflow,
    generate_candidate_plans,
    single_node_dag,
)
from geoflow.retrieval import (
    DEFAULT_K,
    CatalogEntry,
    SearchAdapter,
    SearchResult,
    VectorIndex,
    online_search,
)
from geoflow.sandbox import SandboxConfig

log = logging.getLogger(__name__)


def build_backend(cfg: EngineConfig, fixture: Path | str | None = None) -> Any:
    if cfg.backend == "scripted":
        path = fixture or cfg.fixture
        if path is None:
            raise GeoflowError("scripted backend needs a fixture file")
        backend = ScriptedBackend.from_file(path)
        if cfg.strict_fixture is not None:
            backend.strict = cfg.strict_fixture
        return backend
    if cfg.llm_endpoint:
        import os

        return HttpBackend(
            cfg.llm_endpoint,
            api_key=os.environ.get("GF_LLM_API_KEY"),
            model=cfg.llm_model,
            role_models=cfg.role_models,
        )
    return HttpBackend.from_env(role_models=cfg.role_models)


def load_index(cfg: EngineConfig, extra: Sequence[CatalogEntry] = ()) -> VectorIndex:
    index = VectorIndex()
    seen: set[str] = set()
    for directory in (cfg.catalog_dir, cfg.knowledge_dir):
        if directory and directory not in seen and Path(directory).is_dir():
            seen.add(directory)
            loaded = VectorIndex.load(directory)
            index.add(e for e in loaded.entries() if e.entry_id not in index)
    if extra:
        index.add(e for e in extra if e.entry_id not in index)
    return index


@dataclass
class PipelineResult:
    workspace: Workspace
    status: str  # completed | failed
    profile: DataProfile | None = None
    dag: WorkflowDAG | None = None
    run: RunResult | None = None
    error: str | None = None
    failed_phase: str | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "completed"

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.workspace.run_id,
            "status": self.status,
            "failed_phase": self.failed_phase,
            "error": self.error,
            "dag": None if self.dag is None else self.dag.to_dict(),
            "run": None if self.run is None else self.run.to_dict(),
        }


def run_task(
    task: TaskInstruction,
    data_pointers: Sequence[str],
    cfg: EngineConfig,
    run_id: str,
    base: Path | str | None = None,
    backend: Any = None,
    index: VectorIndex | None = None,
    search: SearchAdapter | None = None,
    registry: PromptRegistry | None = None,
) -> PipelineResult:
    """Run the full agent pipeline for one task in a fresh workspace.

    Agent-level failures (probe, planning, compile, node) are reported in the
    result rather than raised; filesystem errors still propagate.
    """
    ws = create_workspace(run_id, base if base is not None else cfg.workspace)
    ledger = ws.ledger
    if registry is None:
        registry = PromptRegistry.default(cfg.prompts_dir)
    result = PipelineResult(ws, "failed")
    phase = "setup"
    try:
        backend = backend if backend is not None else build_backend(cfg)
        gateway = Gateway(backend, CallBudget(cfg.max_calls), ledger, cfg.keep_transcripts)
        index = index if index is not None else load_index(cfg)
        (ws.root / "task.json").write_text(json.dumps(task.to_dict(), indent=2), encoding="utf-8")

        phase = "data_summary"
        probe_cfg = SandboxConfig(workdir=ws.profile_dir, timeout=cfg.node_timeout, workspace_root=ws.root)
        profile = summarize_data(
            task,
            list(data_pointers),
            gateway,
            probe_cfg,
            cfg.probe_attempts,
            ledger,
            registry,
            enabled=not cfg.disable_data_summary,
        )
        result.profile = profile

        phase = "planning"
        knowledge_hits: list[SearchResult] = []
        tool_hits: list[SearchResult] = []
        if not cfg.disable_knowledge:
            knowledge_hits = index.query(task.text, DEFAULT_K["knowledge_chunk"], "knowledge_chunk") if len(index) else []
            try:
                online_search(task.text, DEFAULT_K["knowledge_chunk"], search, ledger)
            except SearchUnavailable as exc:
                log.warning("online search unavailable: %s", exc)
        if not cfg.disable_tools and len(index):
            tool_hits = index.query(task.text, DEFAULT_K["reference_script"], "reference_script")
            tool_hits += index.query(task.text, DEFAULT_K["external_command"], "external_command")

        if cfg.disable_planner:
            dag = single_node_dag(task, profile)
            ledger.emit(EventKind.PLAN_SELECTED, {"ablated": True, "dag": dag.to_dict()})
        else:
            candidates = generate_candidate_plans(
                task, profile, knowledge_hits, tool_hits, cfg.n_candidates, gateway, index, ledger, registry
            )
            best = aggregate_plans(candidates, profile, index, cfg.merge_threshold, cfg.weights)
            ledger.emit(EventKind.PLAN_SELECTED, {"aggregated": best.to_dict()})
            phase = "workflow"
            dag = compile_workflow(best, profile, gateway, task, ledger, registry)
        result.dag = dag
        (ws.root / "dag.json").write_text(json.dumps(dag.to_dict(), indent=2), encoding="utf-8")

        phase = "execution"
        ctx = ExecutionContext(
            workspace=ws,
            gateway=gateway,
            task=task,
            index=index,
            checker=Checker(gateway, cfg.checker_llm, registry),
            registry=registry,
            # the budget counts revisions; the loop counts attempts
            max_rounds=cfg.max_debug_rounds + 1,
            one_shot=cfg.disable_checker,
            use_knowledge=not cfg.disable_knowledge,
            use_tools=not cfg.disable_tools,
            timeout=cfg.node_timeout,
            stage_timeouts=dict(cfg.stage_timeouts),
            parallel=cfg.parallel,
        )
        result.run = run_workflow(dag, profile, ctx)
        result.status = "completed" if result.run.succeeded else "failed"
        if not result.run.succeeded:
            failed = [k for k, v in result.run.nodes.items() if v.status == "failed"]
            result.error = f"node(s) failed: {', '.join(failed)}"
            result.failed_phase = phase
    except GeoflowError as exc:
        result.status = "failed"
        result.error = f"{type(exc).__name__}: {exc}"
        result.failed_phase = phase
        log.warning("run %s failed during %s: %s", run_id, phase, result.error)
    (ws.root / "report.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return result


def stage_nodes(dag: WorkflowDAG | None, stage: StageLabel) -> list[str]:
    if dag is None:
        return []
    return [n.node_id for n in dag.nodes if stage in n.covers()]
