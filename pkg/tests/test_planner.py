from __future__ import annotations

import json
import random
import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import greedy_plan_similarity, has_topological_order

from geoflow.core import EventKind, Ledger, StageLabel, TaskInstruction
from geoflow.data_summary import DataItem, DataProfile
from geoflow.errors import CompileFailed, ParameterError, PlanningFailed
from geoflow.llm import Gateway, ScriptedBackend
from geoflow.planner import (
    CandidatePlan,
    PlanScore,
    PlanStep,
    Port,
    WorkflowDAG,
    WorkflowNode,
    aggregate_plans,
    compile_workflow,
    generate_candidate_plans,
    parse_plan,
    plan_similarity,
    score_plan,
    single_node_dag,
    topological_order,
    validate_dag,
)
from geoflow.retrieval import CatalogEntry

DP, FE, GA = StageLabel
TASK = TaskInstruction("t", "map water extent", "water")


def plan(pid: str, *descriptions: str) -> CandidatePlan:
    return CandidatePlan(pid, tuple(PlanStep(f"s{i}", d) for i, d in enumerate(descriptions, 1)))


def profile(*names: str) -> DataProfile:
    return DataProfile([DataItem(f"/data/{n}.asc", "multispectral") for n in names])


# parsing


def test_parse_plan_reads_steps_and_stages():
    doc = {"steps": [
        {"id": "a", "description": "clip", "inputs": ["red"], "outputs": ["red_c"], "stage": "data_preparation"},
        {"description": "index", "inputs": ["red_c"], "outputs": ["ndwi"], "stage": "feature_extraction"},
    ]}
    p = parse_plan(doc, "p1")
    assert [s.step_id for s in p.steps] == ["a", "s2"]
    assert p.steps[1].stage == FE and p.steps[1].required_inputs == ("red_c",)


@pytest.mark.parametrize(
    "doc, needle",
    [
        ({"steps": []}, "non-empty"),
        ({"steps": [{"description": ""}]}, "no description"),
        ({"steps": [{"description": "x", "stage": "modelling"}]}, "unknown stage"),
        ({"steps": [{"description": "x", "outputs": ["o"]}, {"description": "y", "outputs": ["o"]}]}, "repeated"),
        ({"steps": [{"id": "a", "description": "x"}, {"id": "a", "description": "y"}]}, "repeats step ids"),
    ],
)
def test_parse_plan_rejects_bad_documents(doc, needle):
    with pytest.raises(ValueError, match=needle):
        parse_plan(doc, "p1")


def test_generate_reasks_once_then_drops(tmp_path):
    good = json.dumps({"steps": [{"description": "mask clouds"}]})
    backend = ScriptedBackend({"planner": ["not json", good, "nope", "still nope", good]})
    ledger = Ledger(tmp_path / "l.jsonl")
    plans = generate_candidate_plans(TASK, profile("green"), [], [], 3, Gateway(backend, ledger=ledger), ledger=ledger)
    assert [(p.plan_id, p.source_round) for p in plans] == [("p1", 2), ("p3", 1)]
    dropped = [e.payload for e in ledger.events() if e.kind == EventKind.PLAN_CANDIDATE and e.payload.get("dropped")]
    assert [d["plan_id"] for d in dropped] == ["p2"]
    prompts = [e.payload["prompt"] for e in ledger.events() if e.kind == EventKind.LLM_CALL]
    assert "could not be parsed" in prompts[1] and "could not be parsed" not in prompts[0]


def test_generate_fails_when_nothing_parses():
    backend = ScriptedBackend({"planner": ["x"]}, strict=False)
    with pytest.raises(PlanningFailed):
        generate_candidate_plans(TASK, profile(), [], [], 2, Gateway(backend))
    with pytest.raises(ParameterError):
        generate_candidate_plans(TASK, profile(), [], [], 0, Gateway(backend))


# similarity and aggregation


def test_similarity_matches_greedy_oracle():
    a = plan("a", "read the green band", "compute ndwi from green and nir", "threshold water")
    b = plan("b", "threshold the ndwi grid", "load bands", "report water area")
    want = greedy_plan_similarity([s.description for s in a.steps], [s.description for s in b.steps])
    assert plan_similarity(a, b) == pytest.approx(want, abs=1e-12)
    assert plan_similarity(a, a) == pytest.approx(1.0)


def test_dissimilar_plans_stay_separate_and_the_better_one_wins():
    sound = CandidatePlan("p1", (
        PlanStep("s1", "clip green and nir to the study area", ("green", "nir"), ("g", "n")),
        PlanStep("s2", "normalized difference water index", ("g", "n"), ("ndwi",), FE),
    ))
    cloudy = CandidatePlan("p2", (
        PlanStep("s1", "apply external cloud mask product", ("cloud_mask",), ("clear",)),
        PlanStep("s2", "count clear pixels per tile", ("clear",), ("counts",), GA),
    ))
    sim = greedy_plan_similarity(
        [s.description for s in sound.steps], [s.description for s in cloudy.steps])
    assert sim < 0.85
    best = aggregate_plans([cloudy, sound], profile("green", "nir"))
    assert best.merged_from == ("p1",)
    assert best.score == PlanScore(1.0, 1.0, 1.0)


def test_similar_plans_merge_into_one_group():
    a = plan("p1", "clip the bands", "compute the water index", "summarize water area")
    b = plan("p2", "clip the bands", "compute the water index", "summarize water area accordingly")
    agg = aggregate_plans([b, a], profile())
    assert agg.merged_from == ("p1", "p2")
    assert [s.description for s in agg.plan.steps] == [s.description for s in a.steps]


def test_score_weights_availability_and_rigor():
    p = CandidatePlan("p", (
        PlanStep("s1", "x", ("red", "dem"), ("a",)),
        PlanStep("s2", "y", ("a", "building_segmenter"), ("b",)),
        PlanStep("s3", "z", ("c",), ("d",)),
    ))
    tools = [CatalogEntry("building_segmenter", "external_command", "seg", "{python} m {input} {output}")]
    s = score_plan(p, profile("red"), tools)
    # external inputs: red, dem, building_segmenter, c -> 2 of 4 available
    assert s.availability == pytest.approx(0.5)
    assert s.rigor == pytest.approx(1 / 3)
    assert s.total == pytest.approx(0.6 * 0.5 + 0.4 / 3)


def test_rank_prefers_fewer_steps_then_plan_id():
    a = plan("p2", "alpha alpha")
    b = plan("p1", "omega omega")
    c = plan("p0", "gamma gamma", "delta delta")
    assert aggregate_plans([a, b, c], profile()).plan.plan_id == "p1"


def test_custom_scorer_is_used():
    a, b = plan("p1", "alpha"), plan("p2", "omega")
    best = aggregate_plans([a, b], profile(), scorer=lambda p, prof, cat: PlanScore(0, 0, float(p.plan_id == "p2")))
    assert best.plan.plan_id == "p2"


def test_aggregate_rejects_empty_and_duplicate_ids():
    with pytest.raises(ParameterError):
        aggregate_plans([], profile())
    with pytest.raises(ParameterError):
        aggregate_plans([plan("p", "a"), plan("p", "b")], profile())


words = st.sampled_from("clip mask band water index grid slope mean area class resample reproject".split())
description = st.lists(words, min_size=1, max_size=5).map(" ".join)
step_lists = st.lists(description, min_size=1, max_size=5)


@settings(max_examples=60, deadline=None)
@given(step_lists, st.integers(1, 6))
def test_identical_candidates_aggregate_to_themselves(descriptions, n):
    candidates = [plan(f"p{i}", *descriptions) for i in range(n)]
    agg = aggregate_plans(candidates, profile())
    assert agg.plan.steps == candidates[0].steps
    assert len(agg.merged_from) == n


@settings(max_examples=60, deadline=None)
@given(st.lists(step_lists, min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_candidate_order_does_not_change_the_result(step_sets, rnd):
    candidates = [plan(f"p{i}", *d) for i, d in enumerate(step_sets)]
    shuffled = list(candidates)
    rnd.shuffle(shuffled)
    assert aggregate_plans(shuffled, profile()) == aggregate_plans(candidates, profile())


# DAG validation


def node(nid: str, ins=(), outs=(), stage=DP) -> WorkflowNode:
    return WorkflowNode(nid, "p", tuple(Port(i) for i in ins), tuple(Port(o, path=f"{o}.asc") for o in outs),
                        stage=stage)


def test_two_cycle_is_reported_with_both_nodes():
    dag = WorkflowDAG([node("a", ["y"], ["x"]), node("b", ["x"], ["y"])], [("a", "b"), ("b", "a")])
    report = validate_dag(dag)
    assert not report.ok and "cycle: a↔b" in report.violations


def test_longer_cycle_lists_the_path():
    dag = WorkflowDAG([node("a"), node("b"), node("c")], [("a", "b"), ("b", "c"), ("c", "a")])
    assert "cycle: a→b→c→a" in validate_dag(dag).violations


def test_structural_violations():
    dag = WorkflowDAG(
        [node("a", outs=["x"]), node("a"), node("b", ins=["q"], outs=["x"]), node("c", outs=["../up"])],
        [("a", "zz")],
    )
    v = validate_dag(dag, profile()).violations
    assert "duplicate node id: a" in v
    assert "edge references unknown node: zz" in v
    assert "unbound input: q (node b)" in v
    assert "output x declared by both a and b" in v
    assert any(s.startswith("output path escapes node directory") for s in v)


def test_inputs_bind_to_profile_or_ancestors_only():
    dag = WorkflowDAG(
        [node("a", ["red"], ["c"]), node("b", ["c"], ["d"]), node("e", ["d"], ["f"])],
        [("a", "b")],
    )
    v = validate_dag(dag, profile("red")).violations
    assert v == ["unbound input: d (node e)"]


def test_valid_dag_gives_a_deterministic_order():
    dag = WorkflowDAG.from_dict({"nodes": [
        {"id": "fe", "inputs": ["r"], "outputs": ["f"], "stage": "feature_extraction"},
        {"id": "dp", "inputs": ["red"], "outputs": ["r"]},
        {"id": "ga", "inputs": ["f"], "outputs": [{"name": "s", "kind": "keyvalue", "path": "s.json"}],
         "stage": "geospatial_analysis"},
    ]})
    report = validate_dag(dag, profile("red"))
    assert report.ok and report.order == ["dp", "fe", "ga"]
    assert dag.edges == [("dp", "fe"), ("fe", "ga")]


def random_dag(rng: random.Random):
    n = rng.randint(1, 8)
    ids = list(string.ascii_lowercase[:n])
    rng.shuffle(ids)
    edges = sorted({(rng.choice(ids), rng.choice(ids)) for _ in range(rng.randint(0, 2 * n))})
    return ids, edges


def test_validator_agrees_with_permutation_oracle():
    rng = random.Random(11)
    for _ in range(60):
        ids, edges = random_dag(rng)
        report = validate_dag(WorkflowDAG([node(i) for i in ids], edges))
        acyclic = has_topological_order(ids, edges)
        assert report.ok == acyclic
        if acyclic:
            pos = {n: k for k, n in enumerate(report.order)}
            assert all(pos[u] < pos[v] for u, v in edges)
        else:
            assert any(v.startswith("cycle: ") for v in report.violations)


def test_topological_order_returns_leftovers():
    order, left = topological_order(["a", "b", "c"], [("a", "b"), ("b", "c"), ("c", "b")])
    assert order == ["a"] and left == {"b", "c"}


# compilation


GOOD_WORKFLOW = json.dumps({"nodes": [
    {"id": "prep", "inputs": ["green"], "outputs": [{"name": "g", "path": "g.asc"}]},
    {"id": "feat", "inputs": ["g"], "outputs": [{"name": "w", "path": "w.asc"}], "stage": "feature_extraction"},
]})
CYCLIC_WORKFLOW = json.dumps({"nodes": [
    {"id": "prep", "inputs": ["w"], "outputs": ["g"]},
    {"id": "feat", "inputs": ["g"], "outputs": ["w"]},
]})


def _agg():
    return aggregate_plans([plan("p1", "prepare")], profile("green"))


def test_compile_repairs_once(tmp_path):
    ledger = Ledger(tmp_path / "l.jsonl")
    backend = ScriptedBackend({"workflow": [CYCLIC_WORKFLOW, GOOD_WORKFLOW]})
    gw = Gateway(backend, ledger=ledger)
    dag = compile_workflow(_agg(), profile("green"), gw, TASK, ledger)
    assert [n.node_id for n in dag.nodes] == ["prep", "feat"]
    prompts = [e.payload["prompt"] for e in ledger.events() if e.kind == EventKind.LLM_CALL]
    assert "cycle: feat↔prep" in prompts[1]


def test_compile_gives_up_after_the_repair():
    backend = ScriptedBackend({"workflow": [CYCLIC_WORKFLOW, "{}"]})
    with pytest.raises(CompileFailed) as info:
        compile_workflow(_agg(), profile("green"), Gateway(backend))
    assert "nodes" in str(info.value)


def test_single_node_dag_covers_the_task_stages():
    dag = single_node_dag(TASK, profile("green", "nir"))
    (only,) = dag.nodes
    assert only.node_id == "task" and only.outputs == (Port("result", "keyvalue", "result.json"),)
    assert only.covers() == (GA, DP, FE)
    assert validate_dag(dag, profile("green", "nir")).ok
