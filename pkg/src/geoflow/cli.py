"""Command-line entry point: ``geoflow run | bench | index | inspect``.

Exit codes: 0 success, 1 agent or harness failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

from geoflow.config import ABLATIONS, EngineConfig, resolve_config
from geoflow.core import TaskInstruction, load_ledger, open_workspace
from geoflow.errors import GeoflowError, ParameterError

log = logging.getLogger("geoflow")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _engine_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("engine")
    g.add_argument("--config", metavar="FILE", help="TOML config file (defaults < file < GF_* env < flags)")
    g.add_argument("--backend", choices=("scripted", "http"))
    g.add_argument("--fixture", metavar="FILE", help="scripted-backend response file (implies --backend scripted)")
    g.add_argument("--llm-endpoint", metavar="URL", help="OpenAI-compatible base URL (implies --backend http)")
    g.add_argument("--llm-model", metavar="NAME")
    g.add_argument("--max-calls", type=int)
    g.add_argument("--max-debug-rounds", type=int, help="revision budget per workflow node")
    g.add_argument("--probe-attempts", type=int)
    g.add_argument("--node-timeout", type=float, metavar="SECONDS")
    g.add_argument("--case-timeout", type=float, metavar="SECONDS")
    g.add_argument("--n-candidates", type=int)
    g.add_argument("--merge-threshold", type=float)
    g.add_argument("--catalog-dir", metavar="DIR")
    g.add_argument("--knowledge-dir", metavar="DIR")
    g.add_argument("--prompts-dir", metavar="DIR")
    g.add_argument("--workspace", metavar="DIR", help="base directory for run workspaces")
    g.add_argument("--parallel", action="store_const", const=True, help="run independent nodes concurrently")
    g.add_argument("--checker-llm", action="store_const", const=True, help="ask the checker role for a fix focus")
    for name in ABLATIONS:
        g.add_argument("--" + name.replace("_", "-"), action="store_const", const=True)
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _engine_flags()
    parser = argparse.ArgumentParser(prog="geoflow", description="LLM-driven Earth-observation workflow engine")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{run,bench,index,inspect}")

    run = sub.add_parser("run", parents=[common], help="run one task end to end")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--task", metavar="FILE", help="instruction text file (or TaskInstruction JSON)")
    src.add_argument("--case", metavar="DIR", help="bench case bundle: instruction, data and tools")
    run.add_argument("--data", nargs="+", metavar="PATH", default=[], help="input data files")
    run.add_argument("--domain", help="domain hint for a plain-text task")
    run.add_argument("--run-id", help="workspace id (default: timestamped)")

    bench = sub.add_parser("bench", parents=[common], help="evaluate a case corpus")
    bench.add_argument("--mode", choices=("stage", "e2e"), required=True)
    bench.add_argument("--cases", required=True, metavar="DIR")
    bench.add_argument("--out", default="bench-out", metavar="DIR")
    bench.add_argument("--format", choices=("table", "structured"), default="table")
    bench.add_argument("--workers", type=int, dest="bench_workers")

    index = sub.add_parser("index", parents=[common], help="build a retrieval catalog from a source tree")
    index.add_argument("--source", required=True, metavar="DIR")
    index.add_argument("--out", required=True, metavar="DIR")
    index.add_argument("--describe", action="store_true", help="describe scripts with the configured LLM backend")

    inspect = sub.add_parser("inspect", help="summarize a run workspace")
    inspect.add_argument("run_dir")
    inspect.add_argument("--events", action="store_true", help="print every ledger event")
    inspect.add_argument("-v", "--verbose", action="count", default=0)
    return parser


FLAG_FIELDS = (
    "backend", "fixture", "llm_endpoint", "llm_model", "max_calls", "max_debug_rounds", "probe_attempts",
    "node_timeout", "case_timeout", "n_candidates", "merge_threshold", "catalog_dir", "knowledge_dir",
    "prompts_dir", "workspace", "parallel", "checker_llm", "bench_workers", *ABLATIONS,
)


def config_from_args(args: argparse.Namespace, environ: dict[str, str] | None = None) -> EngineConfig:
    flags: dict[str, Any] = {k: getattr(args, k, None) for k in FLAG_FIELDS}
    backend = flags["backend"]
    if flags["fixture"] and flags["llm_endpoint"]:
        raise UsageError("--fixture and --llm-endpoint select different backends")
    if flags["fixture"]:
        if backend == "http":
            raise UsageError("--fixture needs the scripted backend, not --backend http")
        flags["backend"] = "scripted"
    if flags["llm_endpoint"]:
        if backend == "scripted":
            raise UsageError("--llm-endpoint needs the http backend, not --backend scripted")
        flags["backend"] = "http"
    try:
        return resolve_config(args.config, environ, flags)
    except (ParameterError, OSError) as exc:
        raise UsageError(str(exc)) from None


def _read_task(path: str, domain: str | None) -> TaskInstruction:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".json"):
        return TaskInstruction.from_dict(json.loads(text))
    return TaskInstruction(Path(path).stem or "task", text.strip(), domain, "full_pipeline")


def cmd_run(args: argparse.Namespace, cfg: EngineConfig) -> int:
    from geoflow.pipeline import build_backend, load_index, run_task
    from geoflow.retrieval import VectorIndex

    index: VectorIndex = load_index(cfg)
    fixture = cfg.fixture
    if args.case:
        from geoflow.bench import load_case

        case = load_case(args.case)
        task = case.instruction
        pointers = [str(p) for p in (args.data or case.inputs)]
        index.add(t for t in case.provided_tools if t.entry_id not in index)
        if cfg.backend == "scripted" and fixture is None:
            fixture = str(case.fixture_for("full_pipeline"))
    else:
        task = _read_task(args.task, args.domain)
        pointers = [str(Path(p).resolve()) for p in args.data]
    if not pointers:
        raise UsageError("no input data: pass --data")
    run_id = args.run_id or time.strftime("run-%Y%m%d-%H%M%S")
    backend = build_backend(cfg, fixture)
    result = run_task(task, pointers, cfg, run_id, cfg.workspace, backend, index)
    print(f"workspace: {result.workspace.root}")
    if result.run is not None:
        for node_id, outcome in result.run.nodes.items():
            print(f"  {node_id:<20} {outcome.status:<10} debug rounds {outcome.debug_rounds}")
    if result.ok:
        print("status: completed")
        return EXIT_OK
    print(f"status: failed during {result.failed_phase}: {result.error}")
    return EXIT_FAILED


def cmd_bench(args: argparse.Namespace, cfg: EngineConfig) -> int:
    from geoflow.bench import emit_report, load_cases, run_end_to_end, run_stage_wise

    if cfg.backend == "scripted" and args.fixture:
        raise UsageError("bench uses each case's own fixtures; drop --fixture")
    cases = load_cases(args.cases)
    out = Path(args.out)
    runner = run_stage_wise if args.mode == "stage" else run_end_to_end
    report = runner(cases, cfg, out)
    print(emit_report(report, args.format, out), end="")
    return EXIT_OK


def cmd_index(args: argparse.Namespace, cfg: EngineConfig) -> int:
    from geoflow.retrieval import VectorIndex, ingest_tree

    gateway = None
    if args.describe:
        from geoflow.llm import CallBudget, Gateway
        from geoflow.pipeline import build_backend

        gateway = Gateway(build_backend(cfg), CallBudget(cfg.max_calls))
    index = VectorIndex().add(ingest_tree(args.source, gateway))
    index.save(args.out)
    counts = Counter(e.tier for e in index.entries())
    print(f"indexed {len(index)} entries into {args.out}: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    ws = open_workspace(args.run_dir)
    events = load_ledger(ws)
    print(f"run {ws.run_id} at {ws.root}")
    report_path = ws.root / "report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text(encoding="utf-8"))
        line = f"status: {report['status']}"
        if report.get("failed_phase"):
            line += f" (failed during {report['failed_phase']}: {report.get('error')})"
        print(line)
    dag_path = ws.root / "dag.json"
    if dag_path.exists():
        dag = json.loads(dag_path.read_text(encoding="utf-8"))
        print(f"workflow: {len(dag['nodes'])} node(s)")
        for node in dag["nodes"]:
            ins = ", ".join(p["name"] for p in node.get("inputs", [])) or "-"
            outs = ", ".join(p["name"] for p in node.get("outputs", [])) or "-"
            print(f"  {node['id']:<20} [{node.get('stage') or '-'}] {ins} -> {outs}")
    kinds = Counter(str(e.kind) for e in events)
    print(f"ledger: {len(events)} event(s)")
    for kind, n in sorted(kinds.items()):
        print(f"  {kind:<18} {n}")
    if args.events:
        for e in events:
            print(f"{e.seq:>5} {str(e.kind):<16} {e.stage or '-':<20} {json.dumps(e.payload, sort_keys=True)[:160]}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "inspect":
            return cmd_inspect(args)
        cfg = config_from_args(args)
        handler = {"run": cmd_run, "bench": cmd_bench, "index": cmd_index}[args.command]
        return handler(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"geoflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GeoflowError, OSError, ValueError) as exc:
        print(f"geoflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
