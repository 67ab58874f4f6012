from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

from geoflow.core import StageLabel, create_workspace
from geoflow.data_summary import DataProfile
from geoflow.executor import Checker, ExecutionContext
from geoflow.llm import CallBudget, Gateway, ScriptedBackend
from geoflow.planner import Port, WorkflowNode

REPO = Path(__file__).resolve().parents[1]
CORPUS = REPO / "corpus"

# A node tool that writes a clean 2x3 NDVI grid and its manifest. Plain
# Python keeps each sandbox round cheap.
GOOD_TOOL = '''```python
import json
import sys
rows = [[0.1, 0.2, 0.3], [-0.4, -9999, 0.9]]
with open("out.asc", "w") as fh:
    fh.write("ncols 3\\nnrows 2\\nxllcorner 0\\nyllcorner 0\\ncellsize 1\\nNODATA_value -9999\\n")
    for r in rows:
        fh.write(" ".join(str(v) for v in r) + "\\n")
json.dump({"artifacts": [{"name": "out", "path": "out.asc", "kind": "raster"}], "results": None},
          open("manifest.json", "w"))
```'''

CRASHING_TOOL = '''```python
raise RuntimeError("synthetic failure")
```'''

# runs cleanly but writes an NDVI value outside [-1, 1]
OUT_OF_RANGE_TOOL = GOOD_TOOL.replace("0.9]", "1.5]")


def grid_node(node_id: str = "n1", kind: str = "ndvi", stage: StageLabel = StageLabel.FEATURE_EXTRACTION) -> WorkflowNode:
    return WorkflowNode(node_id, "write one grid", (), (Port("out", kind, "out.asc"),), {}, stage)


def scripted_context(
    tmp_path: Path,
    coder: list[str],
    *,
    strict: bool = True,
    run_id: str = "r1",
    **kwargs,
) -> ExecutionContext:
    ws = create_workspace(run_id, tmp_path)
    backend = ScriptedBackend({"coder": list(coder)}, strict=strict)
    gateway = Gateway(backend, CallBudget(500), ws.ledger)
    return ExecutionContext(workspace=ws, gateway=gateway, checker=Checker(), **kwargs)


def empty_profile() -> DataProfile:
    return DataProfile([])


def write_fixture(path: Path, queues: dict[str, list[str]], strict: bool = True) -> Path:
    path.write_text(json.dumps({"strict": strict, "queues": queues}), encoding="utf-8")
    return path


@pytest.fixture
def corpus_dir() -> Path:
    return CORPUS


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        terminalreporter.write_line(verdicts[number])
