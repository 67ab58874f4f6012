"""Planning and Workflow agents.

Candidate plans are generated independently, merged when semantically
similar, scored on data availability and logical rigor, and the winner is
compiled into a DAG of script nodes with explicit I/O bindings.
"""

from __future__ import annotations

import heapq
import json
import logging
import posixpath
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from geoflow.core import STAGES, EventKind, Ledger, StageLabel, TaskInstruction, check_identifier
from geoflow.data_summary import DataProfile
from geoflow.errors import CompileFailed, ParameterError, PlanningFailed
from geoflow.llm import Gateway, PromptRegistry, extract_json, render_prompt
from geoflow.retrieval import CatalogEntry, SearchResult, VectorIndex, cosine, embed

log = logging.getLogger(__name__)

MERGE_THRESHOLD = 0.85
AVAILABILITY_WEIGHT = 0.6
RIGOR_WEIGHT = 0.4


@dataclass(frozen=True)
class PlanStep:
    step_id: str
    description: str
    required_inputs: tuple[str, ...] = ()
    produced_outputs: tuple[str, ...] = ()
    stage: StageLabel = StageLabel.DATA_PREPARATION

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.step_id,
            "description": self.description,
            "inputs": list(self.required_inputs),
            "outputs": list(self.produced_outputs),
            "stage": self.stage.value,
        }


@dataclass(frozen=True)
class CandidatePlan:
    plan_id: str
    steps: tuple[PlanStep, ...]
    source_round: int = 1

    def __post_init__(self) -> None:
        if not self.steps:
            raise ParameterError(f"plan {self.plan_id} has no steps")
        ids = [s.step_id for s in self.steps]
        if len(set(ids)) != len(ids):
            raise ParameterError(f"plan {self.plan_id} repeats step ids")

    def to_dict(self) -> dict[str, Any]:
        return {
            "plan_id": self.plan_id,
            "source_round": self.source_round,
            "steps": [s.to_dict() for s in self.steps],
        }


@dataclass(frozen=True)
class PlanScore:
    availability: float
    rigor: float
    total: float

    @classmethod
    def weighted(
        cls, availability: float, rigor: float, weights: tuple[float, float] = (AVAILABILITY_WEIGHT, RIGOR_WEIGHT)
    ) -> PlanScore:
        return cls(availability, rigor, weights[0] * availability + weights[1] * rigor)


@dataclass(frozen=True)
class AggregatedPlan:
    plan: CandidatePlan
    score: PlanScore
    merged_from: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "plan": self.plan.to_dict(),
            "score": {
                "availability": self.score.availability,
                "rigor": self.score.rigor,
                "total": self.score.total,
            },
            "merged_from": list(self.merged_from),
        }


def parse_plan(doc: Any, plan_id: str, source_round: int = 1) -> CandidatePlan:
    """Build a CandidatePlan from the structured plan document."""
    if isinstance(doc, dict):
        raw_steps = doc.get("steps")
    else:
        raw_steps = doc
    if not isinstance(raw_steps, list) or not raw_steps:
        raise ValueError("plan document needs a non-empty 'steps' list")
    steps = []
    outputs_seen: set[str] = set()
    for pos, raw in enumerate(raw_steps, start=1):
        if not isinstance(raw, dict):
            raise ValueError(f"step {pos} is not an object")
        description = str(raw.get("description", "")).strip()
        if not description:
            raise ValueError(f"step {pos} has no description")
        stage = raw.get("stage", StageLabel.DATA_PREPARATION.value)
        try:
            stage = StageLabel(stage)
        except ValueError:
            raise ValueError(f"step {pos} has unknown stage {stage!r}") from None
        outputs = tuple(str(o) for o in raw.get("outputs", []))
        dupes = outputs_seen.intersection(outputs)
        if dupes:
            raise ValueError(f"output names repeated across steps: {sorted(dupes)}")
        outputs_seen.update(outputs)
        steps.append(
            PlanStep(
                str(raw.get("id", f"s{pos}")),
                description,
                tuple(str(i) for i in raw.get("inputs", [])),
                outputs,
                stage,
            )
        )
    try:
        return CandidatePlan(plan_id, tuple(steps), source_round)
    except ParameterError as exc:
        raise ValueError(str(exc)) from None


def _format_hits(hits: Sequence[SearchResult], catalog: VectorIndex | None) -> str:
    if not hits:
        return "(none)"
    lines = []
    for hit in hits:
        if catalog is not None and hit.entry_id in catalog:
            entry = catalog.get(hit.entry_id)
            lines.append(f"- [{entry.tier}] {entry.entry_id}: {entry.description}")
        else:
            lines.append(f"- {hit.entry_id}")
    return "\n".join(lines)


def generate_candidate_plans(
    task: TaskInstruction,
    profile: DataProfile,
    knowledge_hits: Sequence[SearchResult],
    tool_hits: Sequence[SearchResult],
    n: int,
    gateway: Gateway,
    catalog: VectorIndex | None = None,
    ledger: Ledger | None = None,
    registry: PromptRegistry | None = None,
) -> list[CandidatePlan]:
    if n < 1:
        raise ParameterError("n must be at least 1")
    context = {
        "task": task.text,
        "stages": ", ".join(s.value for s in task.stages),
        "profile": profile.narrative or "(no profile)",
        "knowledge": _format_hits(knowledge_hits, catalog),
        "tools": _format_hits(tool_hits, catalog),
        "n": n,
    }
    plans = []
    for i in range(1, n + 1):
        plan_id = f"p{i}"
        error = None
        for attempt in (1, 2):
            section = "" if error is None else f"\nYour previous answer could not be parsed: {error}\nReturn valid JSON."
            prompt = render_prompt(
                "plan_candidates", {**context, "candidate_index": i, "parse_error_section": section}, registry
            )
            text = gateway.ask("planner", prompt)
            try:
                plan = parse_plan(extract_json(text), plan_id, source_round=attempt)
            except ValueError as exc:
                error = str(exc)
                continue
            plans.append(plan)
            if ledger is not None:
                ledger.emit(EventKind.PLAN_CANDIDATE, {"plan": plan.to_dict(), "attempt": attempt})
            break
        else:
            log.warning("dropping candidate %s: %s", plan_id, error)
            if ledger is not None:
                ledger.emit(EventKind.PLAN_CANDIDATE, {"plan_id": plan_id, "dropped": True, "error": error})
    if not plans:
        raise PlanningFailed(f"none of the {n} candidate plans could be parsed")
    return plans


# aggregation


def _canonical(text: str) -> str:
    return " ".join(text.lower().split())


class _StepVectors:
    def __init__(self) -> None:
        self._cache: dict[str, Any] = {}

    def sim(self, a: PlanStep, b: PlanStep) -> float:
        return cosine(self.vec(a.description), self.vec(b.description))

    def vec(self, text: str) -> Any:
        key = _canonical(text)
        if key not in self._cache:
            self._cache[key] = embed(key)
        return self._cache[key]


def _greedy_pairs(a: CandidatePlan, b: CandidatePlan, vecs: _StepVectors) -> list[tuple[int, int, float]]:
    scored = [(vecs.sim(sa, sb), i, j) for i, sa in enumerate(a.steps) for j, sb in enumerate(b.steps)]
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for s, i, j in scored:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j, s))
    return pairs


def plan_similarity(a: CandidatePlan, b: CandidatePlan, vecs: _StepVectors | None = None) -> float:
    """Mean cosine over greedily matched step pairs (highest first)."""
    pairs = _greedy_pairs(a, b, vecs or _StepVectors())
    return sum(s for _, _, s in pairs) / len(pairs)


def merge_plans(members: Sequence[CandidatePlan], threshold: float, vecs: _StepVectors) -> CandidatePlan:
    """Union of steps, deduplicated by step similarity, ordered by earliest position."""
    members = sorted(members, key=lambda p: p.plan_id)
    if len(members) == 1:
        return members[0]
    ordered = sorted(
        ((pos, rank, step) for rank, plan in enumerate(members) for pos, step in enumerate(plan.steps)),
        key=lambda t: (t[0], t[1]),
    )
    kept: list[tuple[PlanStep, int]] = []
    for _, rank, step in ordered:
        # steps of one plan never absorb each other
        if any(r != rank and vecs.sim(step, k) >= threshold for k, r in kept):
            continue
        kept.append((step, rank))
    # resolve id and output collisions introduced by the union
    ids: set[str] = set()
    outputs: set[str] = set()
    final = []
    for step, _ in kept:
        sid = step.step_id
        n = 2
        while sid in ids:
            sid = f"{step.step_id}_{n}"
            n += 1
        ids.add(sid)
        produced = tuple(o for o in step.produced_outputs if o not in outputs)
        outputs.update(produced)
        final.append(PlanStep(sid, step.description, step.required_inputs, produced, step.stage))
    return CandidatePlan(members[0].plan_id, tuple(final), members[0].source_round)


def _catalog_commands(catalog: VectorIndex | Iterable[CatalogEntry] | None) -> set[str]:
    if catalog is None:
        return set()
    entries = catalog.entries("external_command") if isinstance(catalog, VectorIndex) else catalog
    return {e.entry_id for e in entries if e.tier == "external_command"}


def score_plan(
    plan: CandidatePlan,
    profile: DataProfile,
    catalog: VectorIndex | Iterable[CatalogEntry] | None = None,
    weights: tuple[float, float] = (AVAILABILITY_WEIGHT, RIGOR_WEIGHT),
) -> PlanScore:
    """availability: share of the plan's external inputs (not produced by any
    step) that resolve to profile items or model commands. rigor: share of
    steps whose every input is initial data or produced by an earlier step."""
    commands = _catalog_commands(catalog)

    def initial(name: str) -> bool:
        return profile.resolve(name) is not None or name in commands

    produced_anywhere = {o for s in plan.steps for o in s.produced_outputs}
    external = [i for s in plan.steps for i in s.required_inputs if i not in produced_anywhere]
    availability = sum(initial(i) for i in external) / len(external) if external else 1.0
    produced: set[str] = set()
    rigorous = 0
    for step in plan.steps:
        if all(i in produced or initial(i) for i in step.required_inputs):
            rigorous += 1
        produced.update(step.produced_outputs)
    rigor = rigorous / len(plan.steps)
    return PlanScore.weighted(availability, rigor, weights)


Scorer = Callable[[CandidatePlan, DataProfile, Any], PlanScore]


def aggregate_plans(
    candidates: Sequence[CandidatePlan],
    profile: DataProfile,
    catalog: VectorIndex | Iterable[CatalogEntry] | None = None,
    threshold: float = MERGE_THRESHOLD,
    weights: tuple[float, float] = (AVAILABILITY_WEIGHT, RIGOR_WEIGHT),
    scorer: Scorer | None = None,
) -> AggregatedPlan:
    if not candidates:
        raise ParameterError("no candidate plans to aggregate")
    ids = [c.plan_id for c in candidates]
    if len(set(ids)) != len(ids):
        raise ParameterError("candidate plan ids must be unique")
    vecs = _StepVectors()
    by_id = {c.plan_id: c for c in candidates}
    ordered = sorted(by_id)
    # connected components of the "similar enough" relation
    parent = {pid: pid for pid in ordered}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, a in enumerate(ordered):
        for b in ordered[i + 1 :]:
            if plan_similarity(by_id[a], by_id[b], vecs) >= threshold:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, list[str]] = {}
    for pid in ordered:
        groups.setdefault(find(pid), []).append(pid)

    if scorer is None:

        def scorer(plan: CandidatePlan, prof: DataProfile, cat: Any) -> PlanScore:
            return score_plan(plan, prof, cat, weights)

    best: AggregatedPlan | None = None
    for members in groups.values():
        merged = merge_plans([by_id[m] for m in members], threshold, vecs)
        candidate = AggregatedPlan(merged, scorer(merged, profile, catalog), tuple(members))
        if best is None or _rank_key(candidate) < _rank_key(best):
            best = candidate
    assert best is not None
    return best


def _rank_key(agg: AggregatedPlan) -> tuple[float, int, str]:
    return (-agg.score.total, len(agg.plan.steps), agg.plan.plan_id)


# workflow DAG


@dataclass(frozen=True)
class Port:
    name: str
    kind: str = "raster"
    path: str = ""

    def to_dict(self) -> dict[str, str]:
        return {"name": self.name, "kind": self.kind, "path": self.path}


@dataclass(frozen=True)
class WorkflowNode:
    node_id: str
    purpose: str
    inputs: tuple[Port, ...] = ()
    outputs: tuple[Port, ...] = ()
    params: dict[str, Any] = field(default_factory=dict, hash=False)
    stage: StageLabel = StageLabel.DATA_PREPARATION

    def covers(self) -> tuple[StageLabel, ...]:
        """Stages this node's outputs are scored against."""
        extra = self.params.get("covers") or []
        return (self.stage, *(StageLabel(s) for s in extra if s != self.stage.value))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.node_id,
            "purpose": self.purpose,
            "stage": self.stage.value,
            "inputs": [p.to_dict() for p in self.inputs],
            "outputs": [p.to_dict() for p in self.outputs],
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> WorkflowNode:
        def ports(items: Any, default_suffix: str) -> tuple[Port, ...]:
            out = []
            for item in items or []:
                if isinstance(item, str):
                    out.append(Port(item, "raster", ""))
                else:
                    out.append(Port(str(item["name"]), str(item.get("kind", "raster")), str(item.get("path", ""))))
            return tuple(out)

        node_id = str(raw.get("id") or raw.get("node_id") or "")
        check_identifier(node_id, "node id")
        return cls(
            node_id=node_id,
            purpose=str(raw.get("purpose", "")),
            inputs=ports(raw.get("inputs"), ""),
            outputs=ports(raw.get("outputs"), ""),
            params=dict(raw.get("params") or {}),
            stage=StageLabel(raw.get("stage", StageLabel.DATA_PREPARATION.value)),
        )


@dataclass
class WorkflowDAG:
    nodes: list[WorkflowNode] = field(default_factory=list)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def node(self, node_id: str) -> WorkflowNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def predecessors(self, node_id: str) -> list[str]:
        return sorted({u for u, v in self.edges if v == node_id})

    def descendants(self, node_id: str) -> set[str]:
        out: set[str] = set()
        stack = [node_id]
        while stack:
            cur = stack.pop()
            for u, v in self.edges:
                if u == cur and v not in out:
                    out.add(v)
                    stack.append(v)
        return out

    def ancestors(self, node_id: str) -> set[str]:
        out: set[str] = set()
        stack = [node_id]
        while stack:
            cur = stack.pop()
            for u, v in self.edges:
                if v == cur and u not in out:
                    out.add(u)
                    stack.append(u)
        return out

    def producer_of(self, name: str, among: Iterable[str] | None = None) -> str | None:
        allowed = None if among is None else set(among)
        for n in sorted(self.nodes, key=lambda n: n.node_id):
            if allowed is not None and n.node_id not in allowed:
                continue
            if any(o.name == name for o in n.outputs):
                return n.node_id
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"nodes": [n.to_dict() for n in self.nodes], "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> WorkflowDAG:
        nodes = [WorkflowNode.from_dict(n) for n in data.get("nodes", [])]
        if "edges" in data:
            edges = [(str(u), str(v)) for u, v in data["edges"]]
        else:
            edges = derive_edges(nodes)
        return cls(nodes, edges)


def derive_edges(nodes: Sequence[WorkflowNode]) -> list[tuple[str, str]]:
    """Producer -> consumer edges from output/input name matching."""
    producers: dict[str, list[str]] = {}
    for n in nodes:
        for o in n.outputs:
            producers.setdefault(o.name, []).append(n.node_id)
    edges = set()
    for n in nodes:
        for i in n.inputs:
            for p in producers.get(i.name, []):
                edges.add((p, n.node_id))
    return sorted(edges)


@dataclass
class DagReport:
    ok: bool
    violations: list[str]
    order: list[str]

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "violations": self.violations, "order": self.order}


def _find_cycle(remaining: set[str], succ: dict[str, list[str]]) -> list[str]:
    # every leftover node keeps a leftover predecessor, so walking backwards
    # always closes a loop (walking forwards can dead-end downstream of one)
    pred: dict[str, list[str]] = {n: [] for n in remaining}
    for u in remaining:
        for v in succ[u]:
            if v in remaining:
                pred[v].append(u)
    cur = min(remaining)
    seen: dict[str, int] = {}
    back: list[str] = []
    while cur not in seen:
        seen[cur] = len(back)
        back.append(cur)
        cur = min(pred[cur])
    loop = back[seen[cur] :][::-1]
    # rotate so the smallest id leads
    k = loop.index(min(loop))
    loop = loop[k:] + loop[:k]
    return loop + [loop[0]]


def topological_order(node_ids: Iterable[str], edges: Iterable[tuple[str, str]]) -> tuple[list[str], set[str]]:
    """Kahn's algorithm with smallest-id-first tie breaking. Returns the
    order and the set of nodes left over (non-empty iff there is a cycle)."""
    ids = set(node_ids)
    succ: dict[str, list[str]] = {n: [] for n in ids}
    indeg = {n: 0 for n in ids}
    for u, v in set(edges):
        if u in ids and v in ids:
            succ[u].append(v)
            indeg[v] += 1
    heap = [n for n in ids if indeg[n] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for v in succ[n]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    return order, ids - set(order)


def _escapes(path: str) -> bool:
    if not path:
        return False
    if path.startswith("/") or (len(path) > 1 and path[1] == ":"):
        return True
    norm = posixpath.normpath(path.replace("\\", "/"))
    return norm == ".." or norm.startswith("../")


def validate_dag(dag: WorkflowDAG, profile: DataProfile | None = None) -> DagReport:
    violations: list[str] = []
    ids = [n.node_id for n in dag.nodes]
    id_set = set(ids)
    for dup in sorted({i for i in ids if ids.count(i) > 1}):
        violations.append(f"duplicate node id: {dup}")
    for u, v in dag.edges:
        for end in (u, v):
            if end not in id_set:
                violations.append(f"edge references unknown node: {end}")

    order, leftover = topological_order(id_set, dag.edges)
    if leftover:
        succ: dict[str, list[str]] = {n: [] for n in id_set}
        for u, v in dag.edges:
            if u in id_set and v in id_set:
                succ[u].append(v)
        cycle = _find_cycle(leftover, succ)
        if len(cycle) == 3:
            violations.append(f"cycle: {cycle[0]}↔{cycle[1]}")
        else:
            violations.append("cycle: " + "→".join(cycle))

    seen_outputs: dict[str, str] = {}
    for node in sorted(dag.nodes, key=lambda n: n.node_id):
        for label, ports in (("input", node.inputs), ("output", node.outputs)):
            names = [p.name for p in ports]
            for dup in sorted({x for x in names if names.count(x) > 1}):
                violations.append(f"duplicate {label} name {dup} in node {node.node_id}")
        for out in node.outputs:
            if out.name in seen_outputs and seen_outputs[out.name] != node.node_id:
                violations.append(
                    f"output {out.name} declared by both {seen_outputs[out.name]} and {node.node_id}"
                )
            seen_outputs.setdefault(out.name, node.node_id)
            if _escapes(out.path):
                violations.append(f"output path escapes node directory: {out.path} (node {node.node_id})")
        if not node.inputs:
            continue
        ancestors = dag.ancestors(node.node_id) - {node.node_id}
        for inp in node.inputs:
            if profile is not None and (profile.resolve(inp.name) or (inp.path and profile.resolve(inp.path))):
                continue
            if dag.producer_of(inp.name, ancestors) is not None:
                continue
            violations.append(f"unbound input: {inp.name} (node {node.node_id})")

    return DagReport(not violations, violations, order)


def _initial_data(profile: DataProfile) -> str:
    if not profile.items:
        return "(none)"
    return "\n".join(f"- {i.name} ({i.modality}, {i.bands} band(s)): {i.path}" for i in profile.items)


def parse_workflow(doc: Any) -> WorkflowDAG:
    if not isinstance(doc, dict) or not isinstance(doc.get("nodes"), list):
        raise ValueError("workflow document needs a 'nodes' list")
    try:
        nodes = [WorkflowNode.from_dict(n) for n in doc["nodes"]]
    except (KeyError, TypeError, ValueError, ParameterError) as exc:
        raise ValueError(f"malformed node: {exc}") from None
    return WorkflowDAG(nodes, derive_edges(nodes))


def compile_workflow(
    plan: AggregatedPlan,
    profile: DataProfile,
    gateway: Gateway,
    task: TaskInstruction | None = None,
    ledger: Ledger | None = None,
    registry: PromptRegistry | None = None,
) -> WorkflowDAG:
    context = {
        "task": task.text if task else "",
        "plan": json.dumps(plan.plan.to_dict(), indent=2),
        "initial_data": _initial_data(profile),
    }
    problem = ""
    report: DagReport | None = None
    for attempt in (1, 2):
        section = "" if attempt == 1 else f"\nThe previous workflow was rejected:\n{problem}\nReturn a corrected workflow."
        prompt = render_prompt("compile_workflow", {**context, "repair_section": section}, registry)
        text = gateway.ask("workflow", prompt)
        try:
            dag = parse_workflow(extract_json(text))
        except ValueError as exc:
            problem = str(exc)
            report = DagReport(False, [problem], [])
            continue
        report = validate_dag(dag, profile)
        if ledger is not None:
            ledger.emit(
                EventKind.PLAN_SELECTED,
                {"workflow_attempt": attempt, "dag": dag.to_dict(), "report": report.to_dict()},
            )
        if report.ok:
            return dag
        problem = "\n".join(report.violations)
    raise CompileFailed(f"workflow could not be repaired: {problem}", report)


def single_node_dag(task: TaskInstruction, profile: DataProfile) -> WorkflowDAG:
    """Planner-ablated workflow: one node doing the whole task."""
    stages = task.stages
    node = WorkflowNode(
        node_id="task",
        purpose=task.text,
        inputs=tuple(Port(i.name, i.modality, i.path) for i in profile.items),
        outputs=(Port("result", "keyvalue", "result.json"),),
        params={"covers": [s.value for s in stages]},
        stage=stages[-1],
    )
    return WorkflowDAG([node], [])


def plan_stages(plan: CandidatePlan) -> list[StageLabel]:
    return [s for s in STAGES if any(step.stage == s for step in plan.steps)]
