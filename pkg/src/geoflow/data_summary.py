"""Data Summary agent: iterative probing of input data into a DataProfile."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from geoflow.core import EventKind, Ledger, StageLabel, TaskInstruction
from geoflow.errors import ParameterError, ProbeFailed
from geoflow.llm import Gateway, PromptRegistry, extract_code, render_prompt
from geoflow.sandbox import ExecutionRecord, SandboxConfig, ToolScript, execute_script

log = logging.getLogger(__name__)

MODALITIES = ("rgb", "multispectral", "sar", "ntl", "product", "tabular", "unknown")
PROFILE_NAME = "profile.json"
PROBE_NODE_ID = "probe"
FEEDBACK_EXCERPT = 4000


@dataclass
class DataItem:
    path: str
    modality: str = "unknown"
    rows: int = 0
    cols: int = 0
    bands: int = 0
    crs: str = "unknown"
    min: list[float | None] = field(default_factory=list)
    max: list[float | None] = field(default_factory=list)
    mean: list[float | None] = field(default_factory=list)
    nodata_fraction: list[float] = field(default_factory=list)
    temporal: tuple[str, str] | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return Path(self.path).stem

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": self.path,
            "modality": self.modality,
            "rows": self.rows,
            "cols": self.cols,
            "bands": self.bands,
            "crs": self.crs,
            "min": self.min,
            "max": self.max,
            "mean": self.mean,
            "nodata_fraction": self.nodata_fraction,
            "temporal": None if self.temporal is None else list(self.temporal),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DataItem:
        temporal = data.get("temporal")
        return cls(
            path=str(data["path"]),
            modality=data.get("modality", "unknown"),
            rows=data.get("rows", 0),
            cols=data.get("cols", 0),
            bands=data.get("bands", 0),
            crs=str(data.get("crs", "unknown")),
            min=list(data.get("min") or []),
            max=list(data.get("max") or []),
            mean=list(data.get("mean") or []),
            nodata_fraction=list(data.get("nodata_fraction") or []),
            temporal=None if temporal is None else (str(temporal[0]), str(temporal[1])),
            extra=dict(data.get("extra") or {}),
        )


def check_item(item: DataItem) -> list[str]:
    """Invariant violations of one probed item (empty when valid)."""
    problems = []
    if not Path(item.path).exists():
        problems.append(f"{item.path}: path does not exist")
    if item.modality not in MODALITIES:
        problems.append(f"{item.path}: unknown modality {item.modality!r}")
    for attr in ("rows", "cols", "bands"):
        value = getattr(item, attr)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            problems.append(f"{item.path}: {attr} must be a non-negative integer")
    if problems:
        return problems
    for attr in ("min", "max", "mean", "nodata_fraction"):
        if len(getattr(item, attr)) != item.bands:
            problems.append(f"{item.path}: {attr} needs one value per band ({item.bands})")
    if problems:
        return problems
    for b in range(item.bands):
        frac = item.nodata_fraction[b]
        if not isinstance(frac, (int, float)) or not 0 <= frac <= 1:
            problems.append(f"{item.path}: band {b} nodata_fraction {frac!r} outside [0,1]")
            continue
        lo, mid, hi = item.min[b], item.mean[b], item.max[b]
        if frac < 1:
            if None in (lo, mid, hi) or any(isinstance(v, float) and math.isnan(v) for v in (lo, mid, hi)):
                problems.append(f"{item.path}: band {b} has valid cells but no statistics")
            elif not lo - _slack(lo, hi) <= mid <= hi + _slack(lo, hi):
                problems.append(f"{item.path}: band {b} violates min <= mean <= max")
    return problems


def _slack(lo: float, hi: float) -> float:
    # a float mean of identical cells can land an ulp outside [min, max]
    return 1e-9 * max(1.0, abs(lo), abs(hi))


@dataclass
class DataProfile:
    items: list[DataItem]
    narrative: str = ""

    def item_names(self) -> dict[str, DataItem]:
        names: dict[str, DataItem] = {}
        for item in self.items:
            names.setdefault(item.name, item)
            names.setdefault(Path(item.path).name, item)
        return names

    def resolve(self, name: str) -> DataItem | None:
        """Look up an initial datum by file stem, file name, or full path."""
        for item in self.items:
            if name in (item.name, Path(item.path).name, item.path):
                return item
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"items": [i.to_dict() for i in self.items], "narrative": self.narrative}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DataProfile:
        return cls([DataItem.from_dict(i) for i in data.get("items", [])], data.get("narrative", ""))


@dataclass
class ProbeAttempt:
    round: int
    script: ToolScript
    record: ExecutionRecord
    outcome: str
    problems: list[str] = field(default_factory=list)


def generate_probe_script(
    task: TaskInstruction,
    data_pointers: list[str],
    gateway: Gateway,
    prior_feedback: str | None = None,
    round: int = 1,
    registry: PromptRegistry | None = None,
) -> ToolScript:
    if not data_pointers:
        raise ParameterError("no data pointers to probe")
    feedback_section = ""
    if prior_feedback:
        feedback_section = (
            "\nThe previous probing script failed. Traceback / problems:\n"
            f"{prior_feedback[-FEEDBACK_EXCERPT:]}\n"
        )
    prompt = render_prompt(
        "probe_script",
        {
            "task": task.text,
            "pointers": "\n".join(data_pointers),
            "round": round,
            "feedback_section": feedback_section,
        },
        registry,
    )
    text = gateway.ask("data_summary", prompt, stage=StageLabel.DATA_PREPARATION)
    body = extract_code(text)
    if not body.strip():
        body = "raise SystemExit('empty probing script')\n"
    return ToolScript(PROBE_NODE_ID, round, body, prompt=prompt)


def _read_profile(path: Path) -> tuple[list[DataItem] | None, list[str]]:
    if not path.exists():
        return None, [f"{PROFILE_NAME} was not written"]
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        items = [DataItem.from_dict(d) for d in data["items"]]
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        return None, [f"{PROFILE_NAME} is malformed: {exc}"]
    if not items:
        return None, [f"{PROFILE_NAME} lists no items"]
    problems = [p for item in items for p in check_item(item)]
    return (None, problems) if problems else (items, [])


def run_probe_loop(
    task: TaskInstruction,
    data_pointers: list[str],
    gateway: Gateway,
    sandbox: SandboxConfig,
    max_attempts: int = 5,
    ledger: Ledger | None = None,
    registry: PromptRegistry | None = None,
) -> tuple[list[DataItem], list[ProbeAttempt]]:
    """Generate, run, and re-generate probing scripts until ``profile.json``
    parses and every item satisfies the DataItem invariants."""
    if max_attempts < 1:
        raise ParameterError("max_attempts must be positive")
    pointers = [str(Path(p).resolve()) for p in data_pointers]
    missing = [p for p in pointers if not Path(p).exists()]
    if missing:
        raise ParameterError(f"data pointers do not exist: {missing}")
    cfg = SandboxConfig(
        workdir=sandbox.workdir,
        interpreter=sandbox.interpreter,
        timeout=sandbox.timeout,
        env_allowlist=sandbox.env_allowlist,
        workspace_root=sandbox.workspace_root,
        extra_env={**sandbox.extra_env, "GF_DATA_POINTERS": "\n".join(pointers)},
    )
    profile_path = Path(cfg.workdir) / PROFILE_NAME
    attempts: list[ProbeAttempt] = []
    feedback = None
    for round_no in range(1, max_attempts + 1):
        script = generate_probe_script(task, pointers, gateway, feedback, round_no, registry)
        profile_path.unlink(missing_ok=True)
        record = execute_script(script, cfg)
        if record.ok:
            items, problems = _read_profile(profile_path)
        else:
            items, problems = None, [record.traceback or f"exit status {record.exit_status}"]
        outcome = "parsed" if items is not None else "failed"
        attempts.append(ProbeAttempt(round_no, script, record, outcome, problems))
        if ledger is not None:
            ledger.emit(
                EventKind.PROBE_ATTEMPT,
                {"round": round_no, "outcome": outcome, "problems": problems, "exit_status": record.exit_status},
                StageLabel.DATA_PREPARATION,
            )
        if items is not None:
            return items, attempts
        feedback = "\n".join(problems)
    raise ProbeFailed(f"data probing failed after {max_attempts} attempt(s)", attempts)


def render_items(items: list[DataItem]) -> str:
    """Deterministic plain-text profile, used when the LLM summary is ablated."""
    lines = []
    for item in items:
        lines.append(
            f"- {item.path}: modality={item.modality}, size={item.rows}x{item.cols}, "
            f"bands={item.bands}, crs={item.crs}"
        )
        for b in range(min(item.bands, len(item.min))):
            frac = item.nodata_fraction[b] if b < len(item.nodata_fraction) else None
            lines.append(
                f"  band {b + 1}: min={item.min[b]}, max={item.max[b]}, "
                f"mean={item.mean[b]}, nodata_fraction={frac}"
            )
        if item.temporal:
            lines.append(f"  temporal: {item.temporal[0]} .. {item.temporal[1]}")
    return "\n".join(lines)


def distill_profile(
    items: list[DataItem], gateway: Gateway | None, registry: PromptRegistry | None = None
) -> str:
    if not items:
        raise ParameterError("cannot distill an empty profile")
    if gateway is None:
        return render_items(items)
    prompt = render_prompt("distill_profile", {"items": render_items(items)}, registry)
    return gateway.ask("data_summary", prompt, stage=StageLabel.DATA_PREPARATION).strip()


def passthrough_profile(data_pointers: list[str]) -> DataProfile:
    """Profile used when the Data Summary agent is disabled: paths only."""
    items = [DataItem(path=str(Path(p).resolve())) for p in data_pointers]
    narrative = "Input files (not inspected):\n" + "\n".join(f"- {i.path}" for i in items)
    return DataProfile(items, narrative)


def summarize_data(
    task: TaskInstruction,
    data_pointers: list[str],
    gateway: Gateway,
    sandbox: SandboxConfig,
    max_attempts: int = 5,
    ledger: Ledger | None = None,
    registry: PromptRegistry | None = None,
    enabled: bool = True,
) -> DataProfile:
    if not enabled:
        profile = passthrough_profile(data_pointers)
    else:
        items, _ = run_probe_loop(task, data_pointers, gateway, sandbox, max_attempts, ledger, registry)
        profile = DataProfile(items, distill_profile(items, gateway, registry))
    out = Path(sandbox.workdir) / PROFILE_NAME
    if enabled and out.exists():
        shutil.copyfile(out, Path(sandbox.workdir) / "profile.raw.json")
    out.write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return profile
