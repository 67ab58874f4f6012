"""Benchmark harness: case bundles, stage-wise and end-to-end runners, metrics.

A case bundle is a directory holding ``case.json``, its input data, ground
truth under ``truth/<stage>/`` and scripted-backend fixtures under
``fixtures/`` (``full_pipeline.json`` plus one file per stage). Stage-wise
runs feed each stage the bundled ground truth of the stages before it;
end-to-end runs let every stage consume the agent's own upstream outputs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from geoflow.config import EngineConfig
from geoflow.core import (
    DOMAINS,
    STAGES,
    EventKind,
    LedgerEvent,
    StageLabel,
    TaskInstruction,
    load_ledger,
)
from geoflow.errors import CaseInvalid, GeoflowError, ParseError
from geoflow.pipeline import PipelineResult, build_backend, load_index, run_task
from geoflow.retrieval import CatalogEntry, VectorIndex
from geoflow.validation import ArtifactManifest, read_ascii_grid

log = logging.getLogger(__name__)

MODES = ("stage_wise", "end_to_end")
DEFAULT_REL_TOL = 0.01
DEFAULT_ABS_TOL = 1e-6
NOT_LOCALIZED = "not localized in designated storage"
NODE_EVENTS = frozenset(
    {EventKind.NODE_STARTED, EventKind.TOOL_CREATED, EventKind.EXECUTION, EventKind.VALIDATION,
     EventKind.REVISION, EventKind.NODE_FINISHED}
)


@dataclass(frozen=True)
class NumericExpect:
    name: str
    expected: float
    rel_tol: float = DEFAULT_REL_TOL
    abs_tol: float = DEFAULT_ABS_TOL

    def __post_init__(self) -> None:
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise CaseInvalid(f"tolerances for {self.name} must be positive")

    def allowed(self) -> float:
        return max(self.abs_tol, self.rel_tol * abs(self.expected))

    def holds(self, actual: float) -> bool:
        return math.isfinite(actual) and abs(actual - self.expected) <= self.allowed()


@dataclass(frozen=True)
class StageExpectation:
    metadata_expect: dict[str, Any] = field(default_factory=dict)
    numeric_expect: tuple[NumericExpect, ...] = ()
    location_expect: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not (self.metadata_expect or self.numeric_expect or self.location_expect):
            raise CaseInvalid("a stage expectation needs at least one check")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StageExpectation:
        numeric = tuple(
            NumericExpect(
                str(n["name"]),
                float(n["expected"]),
                float(n.get("rel_tol", DEFAULT_REL_TOL)),
                float(n.get("abs_tol", DEFAULT_ABS_TOL)),
            )
            for n in data.get("numeric_expect") or []
        )
        return cls(dict(data.get("metadata_expect") or {}), numeric, tuple(data.get("location_expect") or ()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "metadata_expect": self.metadata_expect,
            "numeric_expect": [dataclasses.asdict(n) for n in self.numeric_expect],
            "location_expect": list(self.location_expect),
        }


@dataclass
class BenchCase:
    case_id: str
    domain: str
    instruction: TaskInstruction
    inputs: list[Path]
    stage_specs: dict[StageLabel, StageExpectation]
    provided_tools: list[CatalogEntry] = field(default_factory=list)
    root: Path = Path(".")
    stage_inputs: dict[StageLabel, list[Path]] = field(default_factory=dict)

    def fixture_for(self, scope: str) -> Path:
        return self.root / "fixtures" / f"{scope}.json"

    def inputs_for(self, stage: StageLabel) -> list[Path]:
        if stage in self.stage_inputs:
            return self.stage_inputs[stage]
        if stage == STAGES[0]:
            return self.inputs
        raise CaseInvalid(f"{self.case_id}: no ground-truth inputs bundled for {stage.value}")


def load_case(root: Path | str) -> BenchCase:
    root = Path(root).resolve()
    try:
        data = json.loads((root / "case.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CaseInvalid(f"{root}: unreadable case.json ({exc})") from None

    def resolve(rel: str) -> Path:
        path = (root / rel).resolve()
        if not path.exists():
            raise CaseInvalid(f"{data.get('case_id', root.name)}: missing input file {path}")
        return path

    try:
        instruction = TaskInstruction.from_dict(data["instruction"])
        if data["domain"] not in DOMAINS:
            raise CaseInvalid(f"unknown domain {data['domain']!r}")
        specs = {StageLabel(k): StageExpectation.from_dict(v) for k, v in data["stage_specs"].items()}
        tools = [CatalogEntry.from_dict(t) for t in data.get("provided_tools") or []]
        case = BenchCase(
            case_id=data["case_id"],
            domain=data["domain"],
            instruction=instruction,
            inputs=[resolve(p) for p in data["inputs"]],
            stage_specs=specs,
            provided_tools=tools,
            root=root,
            stage_inputs={StageLabel(k): [resolve(p) for p in v] for k, v in (data.get("stage_inputs") or {}).items()},
        )
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, CaseInvalid):
            raise
        raise CaseInvalid(f"{root}: malformed case.json ({exc!r})") from None
    if instruction.stage_scope == "full_pipeline":
        missing = [s.value for s in STAGES if s not in specs]
        if missing:
            raise CaseInvalid(f"{case.case_id}: full-pipeline case lacks expectations for {', '.join(missing)}")
    return case


def load_cases(directory: Path | str) -> list[BenchCase]:
    """Every sub-directory holding a case.json, in case-id order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CaseInvalid(f"not a directory: {directory}")
    cases = [load_case(p.parent) for p in sorted(directory.glob("*/case.json"))]
    return sorted(cases, key=lambda c: c.case_id)


# scoring


@dataclass
class StageOutput:
    """What one node of a stage left behind."""

    node_id: str
    status: str
    workdir: Path
    manifest: ArtifactManifest | None = None
    error: str | None = None


@dataclass
class StageResult:
    case_id: str
    stage: StageLabel
    passed: bool
    fail_reasons: list[str] = field(default_factory=list)
    debug_rounds: int = 0
    running_time: float = 0.0

    def __post_init__(self) -> None:
        if self.passed != (not self.fail_reasons):
            raise ValueError("passed must hold exactly when there are no fail reasons")

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "stage": self.stage.value,
            "passed": self.passed,
            "fail_reasons": list(self.fail_reasons),
            "debug_rounds": self.debug_rounds,
            "running_time": self.running_time,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StageResult:
        return cls(
            data["case_id"],
            StageLabel(data["stage"]),
            data["passed"],
            list(data["fail_reasons"]),
            int(data["debug_rounds"]),
            float(data["running_time"]),
        )


def _artifact_stats(outputs: Sequence[StageOutput], name: str) -> tuple[dict[str, Any] | None, str | None]:
    """Stats of a named raster artifact, recomputed from the file itself."""
    for out in outputs:
        if out.manifest is None:
            continue
        art = out.manifest.artifact(name)
        if art is None:
            continue
        path = out.workdir / art.path
        if not path.exists():
            return None, f"artifact {name} listed but {NOT_LOCALIZED}"
        if art.kind != "raster":
            return dict(art.stats or {}), None
        try:
            grid = read_ascii_grid(path)
        except (ParseError, OSError) as exc:
            return None, f"artifact {name} unreadable: {exc}"
        return dataclasses.asdict(grid.stats), None
    return None, f"artifact {name} not in any manifest"


def _results(outputs: Sequence[StageOutput]) -> dict[str, Any] | None:
    merged: dict[str, Any] | None = None
    for out in outputs:
        if out.manifest is not None and isinstance(out.manifest.results, dict):
            merged = (merged or {}) | out.manifest.results
    return merged


def _first_raster(outputs: Sequence[StageOutput]) -> str | None:
    for out in outputs:
        if out.manifest is None:
            continue
        for art in out.manifest.artifacts:
            if art.kind == "raster":
                return art.name
    return None


def score_stage(
    outputs: Sequence[StageOutput],
    expect: StageExpectation,
    stage: StageLabel | None = None,
) -> tuple[bool, list[str]]:
    """All-must-pass scoring of one stage's outputs against its expectation."""
    reasons: list[str] = []
    if not outputs:
        return False, ["stage produced no outputs"]
    for out in outputs:
        if out.status != "completed":
            reasons.append(f"node {out.node_id} {out.status}" + (f": {out.error}" if out.error else ""))

    for rel in expect.location_expect:
        if not any((out.workdir / rel).exists() for out in outputs):
            reasons.append(f"{rel}: {NOT_LOCALIZED}")

    results = _results(outputs)
    if stage == StageLabel.GEOSPATIAL_ANALYSIS and results is None:
        reasons.append("results are not recorded as key-value pairs in the manifest")

    meta = dict(expect.metadata_expect)
    if meta:
        target = meta.pop("artifact", None) or _first_raster(outputs)
        stats: dict[str, Any] | None = None
        if target is not None:
            stats, problem = _artifact_stats(outputs, target)
            if problem:
                reasons.append(problem)
        for key, want in sorted(meta.items()):
            if key == "value_range":
                lo, hi = want
                if stats is None:
                    continue  # the missing artifact is already a reason
                if stats.get("min") is None:
                    reasons.append("value_range: no valid cells to check")
                elif stats["min"] < lo or stats["max"] > hi:
                    reasons.append(f"value_range: [{stats['min']:.6g}, {stats['max']:.6g}] outside [{lo}, {hi}]")
                continue
            if stats is not None and key in stats:
                have = stats[key]
            elif results is not None and key in results:
                have = results[key]
            else:
                if stats is not None or target is None:
                    reasons.append(f"metadata {key}: not found")
                continue
            if have != want:
                reasons.append(f"metadata {key}: expected {want!r}, got {have!r}")

    for num in expect.numeric_expect:
        artifact, _, stat = num.name.rpartition(".")
        if artifact and stat:
            stats, problem = _artifact_stats(outputs, artifact)
            if problem:
                reasons.append(f"{num.name}: {problem}")
                continue
            actual = (stats or {}).get(stat)
        else:
            # analysis values count only when reported as manifest key-value results
            actual = None if results is None else results.get(num.name)
        if not isinstance(actual, (int, float)) or isinstance(actual, bool):
            reasons.append(f"{num.name}: no numeric value reported")
            continue
        if not num.holds(float(actual)):
            reasons.append(
                f"{num.name}: expected {num.expected:.6g}, got {float(actual):.6g} (allowed ±{num.allowed():.3g})"
            )
    return not reasons, reasons


def stage_outputs(result: PipelineResult, stage: StageLabel) -> list[StageOutput]:
    """Collect the per-node outputs of one stage from a finished run."""
    if result.dag is None:
        return []
    outputs = []
    for node in result.dag.nodes:
        if stage not in node.covers():
            continue
        outcome = result.run.nodes.get(node.node_id) if result.run is not None else None
        workdir = result.workspace.nodes_dir / node.node_id
        manifest = None
        path = workdir / "manifest.json"
        if outcome is not None and outcome.status != "skipped" and path.exists():
            try:
                manifest = ArtifactManifest.load(path)
            except ParseError:
                manifest = None
        outputs.append(
            StageOutput(
                node.node_id,
                outcome.status if outcome is not None else "not run",
                workdir,
                manifest,
                None if outcome is None else outcome.error,
            )
        )
    return outputs


# ledger-derived metrics


def revision_count(events: Sequence[LedgerEvent], stage: StageLabel) -> int:
    return sum(1 for e in events if e.kind == EventKind.REVISION and e.stage == stage)


def stage_span(events: Sequence[LedgerEvent], stage: StageLabel) -> float:
    """Seconds between the first and last node event of a stage."""
    stamps = [e.ts_mono_ns for e in events if e.stage == stage and e.kind in NODE_EVENTS and e.ts_mono_ns]
    return (max(stamps) - min(stamps)) / 1e9 if stamps else 0.0


# metrics report


@dataclass
class StageMetrics:
    accuracy: float
    mean_debug_rounds: float | None = None
    max_debug_rounds: int | None = None
    mean_running_time: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


@dataclass
class MetricsReport:
    mode: str
    per_stage: dict[StageLabel, StageMetrics]
    n_cases: int
    results: list[StageResult] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for m in self.per_stage.values():
            if not 0 <= m.accuracy <= 1:
                raise ValueError("accuracy must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "n_cases": self.n_cases,
            "per_stage": {s.value: m.to_dict() for s, m in self.per_stage.items()},
            "results": [r.to_dict() for r in self.results],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MetricsReport:
        return cls(
            data["mode"],
            {StageLabel(k): StageMetrics(**v) for k, v in data["per_stage"].items()},
            int(data["n_cases"]),
            [StageResult.from_dict(r) for r in data.get("results", [])],
        )


def aggregate(mode: str, results: Sequence[StageResult], n_cases: int) -> MetricsReport:
    per_stage: dict[StageLabel, StageMetrics] = {}
    for stage in STAGES:
        rows = [r for r in results if r.stage == stage]
        if not rows:
            continue
        accuracy = sum(r.passed for r in rows) / len(rows)
        if mode == "end_to_end":
            per_stage[stage] = StageMetrics(accuracy)
        else:
            per_stage[stage] = StageMetrics(
                accuracy,
                sum(r.debug_rounds for r in rows) / len(rows),
                max(r.debug_rounds for r in rows),
                math.fsum(r.running_time for r in rows) / len(rows),
            )
    ordered = sorted(results, key=lambda r: (r.case_id, STAGES.index(r.stage)))
    return MetricsReport(mode, per_stage, n_cases, ordered)


# runners


RunFn = Callable[[], PipelineResult]


def _with_deadline(fn: RunFn, seconds: float) -> PipelineResult | None:
    """Run fn on a daemon thread; None when it overruns its wall-clock cap.
    An overrunning run is abandoned, not killed."""
    box: dict[str, Any] = {}

    def target() -> None:
        try:
            box["result"] = fn()
        except BaseException as exc:  # noqa: BLE001 - contained per case
            box["error"] = exc

    worker = threading.Thread(target=target, daemon=True)
    worker.start()
    worker.join(seconds)
    if worker.is_alive():
        return None
    if "error" in box:
        raise box["error"]
    return box["result"]


def _case_index(cfg: EngineConfig, case: BenchCase, base: VectorIndex | None) -> VectorIndex:
    index = VectorIndex()
    source = base.entries() if base is not None else load_index(cfg).entries()
    index.add(source)
    index.add(t for t in case.provided_tools if t.entry_id not in index)
    return index


def _execute(
    case: BenchCase,
    scope: str,
    pointers: Sequence[Path],
    cfg: EngineConfig,
    runs_base: Path,
    run_id: str,
    base_index: VectorIndex | None,
) -> tuple[PipelineResult | None, str | None]:
    stale = runs_base / "runs" / run_id
    if stale.exists():
        shutil.rmtree(stale)
    task = dataclasses.replace(case.instruction, stage_scope=scope)
    try:
        backend = build_backend(cfg, case.fixture_for(scope)) if cfg.backend == "scripted" else None
        index = _case_index(cfg, case, base_index)
        result = _with_deadline(
            lambda: run_task(task, [str(p) for p in pointers], cfg, run_id, runs_base, backend, index),
            cfg.case_timeout,
        )
    except (GeoflowError, OSError) as exc:
        log.warning("case %s (%s) errored: %s", case.case_id, scope, exc)
        return None, f"engine error: {exc}"
    if result is None:
        return None, f"case exceeded its {cfg.case_timeout:g} s wall-clock cap"
    return result, None


def _score(
    case: BenchCase, stage: StageLabel, result: PipelineResult | None, error: str | None
) -> StageResult:
    if result is None:
        return StageResult(case.case_id, stage, False, [error or "no result"])
    events = load_ledger(result.workspace)
    passed, reasons = score_stage(stage_outputs(result, stage), case.stage_specs[stage], stage)
    if not passed and result.error and result.failed_phase not in (None, "execution"):
        reasons.insert(0, f"{result.failed_phase} failed: {result.error}")
    return StageResult(case.case_id, stage, passed, reasons, revision_count(events, stage), stage_span(events, stage))


def run_stage_wise(
    cases: Sequence[BenchCase],
    cfg: EngineConfig,
    out: Path | str,
    index: VectorIndex | None = None,
) -> MetricsReport:
    """Run every stage of every case in isolation on ground-truth inputs."""
    out = Path(out)

    def one(case: BenchCase) -> list[StageResult]:
        rows = []
        for stage in STAGES:
            if stage not in case.stage_specs:
                continue
            try:
                pointers = case.inputs_for(stage)
            except CaseInvalid as exc:
                rows.append(StageResult(case.case_id, stage, False, [str(exc)]))
                continue
            result, error = _execute(case, stage.value, pointers, cfg, out, f"{case.case_id}-{stage.value}", index)
            rows.append(_score(case, stage, result, error))
        return rows

    return aggregate("stage_wise", _map_cases(one, cases, cfg.bench_workers), len(cases))


def run_end_to_end(
    cases: Sequence[BenchCase],
    cfg: EngineConfig,
    out: Path | str,
    index: VectorIndex | None = None,
) -> MetricsReport:
    """Run each case once through the whole pipeline and score every stage
    against its own ground truth."""
    out = Path(out)

    def one(case: BenchCase) -> list[StageResult]:
        result, error = _execute(case, "full_pipeline", case.inputs, cfg, out, f"{case.case_id}-e2e", index)
        return [_score(case, stage, result, error) for stage in STAGES if stage in case.stage_specs]

    return aggregate("end_to_end", _map_cases(one, cases, cfg.bench_workers), len(cases))


def _map_cases(fn: Callable[[BenchCase], list[StageResult]], cases: Sequence[BenchCase], workers: int) -> list[StageResult]:
    if workers <= 1:
        return [r for case in cases for r in fn(case)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(fn, cases))
    return [r for chunk in chunks for r in chunk]


# rendering


def render_table(report: MetricsReport) -> str:
    title = "stage-wise" if report.mode == "stage_wise" else "end-to-end"
    lines = [f"{title} evaluation over {report.n_cases} case(s)"]
    if report.mode == "stage_wise":
        header = f"{'stage':<22}{'accuracy %':>12}{'mean debug':>12}{'max debug':>11}{'mean time s':>13}"
    else:
        header = f"{'stage':<22}{'accuracy %':>12}"
    lines += [header, "-" * len(header)]
    for stage, m in report.per_stage.items():
        row = f"{stage.value:<22}{m.accuracy * 100:>12.2f}"
        if report.mode == "stage_wise":
            row += f"{m.mean_debug_rounds:>12.2f}{m.max_debug_rounds:>11d}{m.mean_running_time:>13.3f}"
        lines.append(row)
    failures = [r for r in report.results if not r.passed]
    if failures:
        lines += ["", "failures:"]
        lines += [f"  {r.case_id} / {r.stage.value}: {'; '.join(r.fail_reasons)}" for r in failures]
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, fmt: str = "table", out: Path | str | None = None) -> str:
    """Render the report as a text table or as JSON; with ``out``, also write
    both report.json and report.txt there."""
    if fmt not in ("table", "structured"):
        raise ValueError(f"unknown report format {fmt!r}")
    structured = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    table = render_table(report)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(structured, encoding="utf-8")
        (out / "report.txt").write_text(table, encoding="utf-8")
    return table if fmt == "table" else structured
