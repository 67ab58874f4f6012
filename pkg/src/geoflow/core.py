"""Domain types, workspace layout, and the append-only run ledger."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from geoflow.errors import LedgerCorrupt, ParameterError, WorkspaceError

log = logging.getLogger(__name__)

_SAFE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.\-]{0,127}$")


class StrEnum(str, Enum):
    def __str__(self) -> str:
        return self.value


class StageLabel(StrEnum):
    DATA_PREPARATION = "data_preparation"
    FEATURE_EXTRACTION = "feature_extraction"
    GEOSPATIAL_ANALYSIS = "geospatial_analysis"


STAGES: tuple[StageLabel, ...] = tuple(StageLabel)

STAGE_SCOPES = ("data_preparation", "feature_extraction", "geospatial_analysis", "full_pipeline")

DOMAINS = ("urban", "agriculture", "vegetation", "water", "soil", "economy", "snow")


class EventKind(StrEnum):
    PROBE_ATTEMPT = "probe_attempt"
    PLAN_CANDIDATE = "plan_candidate"
    PLAN_SELECTED = "plan_selected"
    NODE_STARTED = "node_started"
    TOOL_CREATED = "tool_created"
    EXECUTION = "execution"
    VALIDATION = "validation"
    REVISION = "revision"
    STAGE_DONE = "stage_done"
    # transport and bookkeeping events
    LLM_CALL = "llm_call"
    SEARCH = "search"
    NODE_FINISHED = "node_finished"
    NODE_SKIPPED = "node_skipped"


def check_identifier(value: str, what: str = "identifier") -> str:
    if not isinstance(value, str) or not _SAFE_ID.match(value):
        raise ParameterError(f"invalid {what}: {value!r}")
    return value


@dataclass(frozen=True)
class TaskInstruction:
    id: str
    text: str
    domain_hint: str | None = None
    stage_scope: str = "full_pipeline"

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ParameterError("task text is empty")
        if self.stage_scope not in STAGE_SCOPES:
            raise ParameterError(f"unknown stage_scope {self.stage_scope!r}")

    @property
    def stages(self) -> tuple[StageLabel, ...]:
        if self.stage_scope == "full_pipeline":
            return STAGES
        return (StageLabel(self.stage_scope),)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "domain_hint": self.domain_hint,
            "stage_scope": self.stage_scope,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TaskInstruction:
        return cls(
            id=str(data["id"]),
            text=str(data["text"]),
            domain_hint=data.get("domain_hint"),
            stage_scope=data.get("stage_scope", "full_pipeline"),
        )


@dataclass(frozen=True)
class LedgerEvent:
    """One ledger record. ``seq`` and timestamps are filled in on append."""

    kind: EventKind
    payload: dict[str, Any] = field(default_factory=dict)
    stage: StageLabel | None = None
    run_id: str = ""
    seq: int = 0
    ts_wall: str = ""
    ts_mono_ns: int = 0

    def to_line(self) -> str:
        record = {
            "seq": self.seq,
            "ts_wall": self.ts_wall,
            "ts_mono_ns": self.ts_mono_ns,
            "stage": None if self.stage is None else self.stage.value,
            "kind": self.kind.value,
            "payload": self.payload,
        }
        return json.dumps(record, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_record(cls, record: dict[str, Any], run_id: str = "") -> LedgerEvent:
        stage = record.get("stage")
        return cls(
            kind=EventKind(record["kind"]),
            payload=record.get("payload") or {},
            stage=None if stage is None else StageLabel(stage),
            run_id=run_id,
            seq=int(record["seq"]),
            ts_wall=record["ts_wall"],
            ts_mono_ns=int(record["ts_mono_ns"]),
        )


def read_ledger(path: Path, run_id: str = "") -> tuple[list[LedgerEvent], int]:
    """Parse a ledger file, returning ``(events, dropped_torn_lines)``."""
    if not path.exists():
        return [], 0
    raw = path.read_text(encoding="utf-8")
    lines = raw.split("\n")
    # a well-formed file ends with "\n", leaving one empty trailing element
    if lines and lines[-1] == "":
        lines.pop()
        torn_candidate = False
    else:
        torn_candidate = True
    events: list[LedgerEvent] = []
    warnings = 0
    for index, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            events.append(LedgerEvent.from_record(json.loads(line), run_id))
        except (ValueError, KeyError, TypeError) as exc:
            is_last = index == len(lines) - 1
            if is_last and (torn_candidate or _looks_torn(line)):
                warnings += 1
                log.warning("dropping torn trailing ledger line in %s", path)
                continue
            raise LedgerCorrupt(f"corrupt ledger {path} at line {index + 1}: {exc}") from exc
    events.sort(key=lambda e: e.seq)
    return events, warnings


def _looks_torn(line: str) -> bool:
    return not line.rstrip().endswith("}")


class Ledger:
    """Single-writer JSON Lines ledger."""

    def __init__(self, path: Path, run_id: str = "", durable: bool = True) -> None:
        self.path = path
        self.run_id = run_id
        self.durable = durable
        self._lock = threading.Lock()
        self._seq = self._recover()

    def _recover(self) -> int:
        if not self.path.exists():
            self.path.touch()
            return 0
        events, dropped = read_ledger(self.path, self.run_id)
        if dropped:
            # cut the torn tail so later appends stay line-aligned
            raw = self.path.read_bytes()
            cut = raw.rfind(b"\n") + 1
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)
        return events[-1].seq if events else 0

    @property
    def last_seq(self) -> int:
        return self._seq

    def append(self, event: LedgerEvent) -> int:
        with self._lock:
            seq = self._seq + 1
            stamped = LedgerEvent(
                kind=event.kind,
                payload=event.payload,
                stage=event.stage,
                run_id=self.run_id,
                seq=seq,
                ts_wall=datetime.now(timezone.utc).isoformat(),
                ts_mono_ns=time.monotonic_ns(),
            )
            line = stamped.to_line() + "\n"
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()
                    if self.durable:
                        os.fsync(fh.fileno())
            except OSError as exc:
                raise WorkspaceError(f"ledger write failed: {exc}") from exc
            self._seq = seq
            return seq

    def emit(
        self,
        kind: EventKind,
        payload: dict[str, Any] | None = None,
        stage: StageLabel | None = None,
    ) -> int:
        return self.append(LedgerEvent(kind=kind, payload=payload or {}, stage=stage))

    def events(self) -> list[LedgerEvent]:
        return read_ledger(self.path, self.run_id)[0]


@dataclass
class Workspace:
    root: Path
    run_id: str
    node_dirs: dict[str, Path] = field(default_factory=dict)
    _ledger: Ledger | None = field(default=None, repr=False, compare=False)

    @property
    def ledger_path(self) -> Path:
        return self.root / "ledger.jsonl"

    @property
    def profile_dir(self) -> Path:
        return self.root / "profile"

    @property
    def nodes_dir(self) -> Path:
        return self.root / "nodes"

    @property
    def ledger(self) -> Ledger:
        if self._ledger is None:
            self._ledger = Ledger(self.ledger_path, self.run_id)
        return self._ledger

    def node_dir(self, node_id: str) -> Path:
        """Return (creating on first use) the private directory of ``node_id``."""
        check_identifier(node_id, "node id")
        if node_id in self.node_dirs:
            return self.node_dirs[node_id]
        path = (self.nodes_dir / node_id).resolve()
        if not is_within(path, self.root):
            raise WorkspaceError(f"node directory escapes workspace: {node_id}")
        path.mkdir(parents=True, exist_ok=True)
        self.node_dirs[node_id] = path
        return path

    def relative(self, path: Path | str) -> str:
        p = Path(path)
        try:
            return p.resolve().relative_to(self.root).as_posix()
        except ValueError:
            return str(p)


def is_within(path: Path, root: Path) -> bool:
    try:
        Path(os.path.normpath(path)).resolve().relative_to(Path(root).resolve())
    except ValueError:
        return False
    return True


def create_workspace(run_id: str, base: Path | str) -> Workspace:
    check_identifier(run_id, "run id")
    base = Path(base)
    root = base / "runs" / run_id
    if root.exists():
        raise WorkspaceError(f"run exists: {root}")
    try:
        (root / "nodes").mkdir(parents=True)
        (root / "profile").mkdir()
        (root / "ledger.jsonl").touch()
    except OSError as exc:
        raise WorkspaceError(str(exc)) from exc
    return Workspace(root=root.resolve(), run_id=run_id)


def open_workspace(root: Path | str) -> Workspace:
    root = Path(root).resolve()
    if not (root / "ledger.jsonl").exists():
        raise WorkspaceError(f"not a run directory: {root}")
    ws = Workspace(root=root, run_id=root.name)
    if ws.nodes_dir.exists():
        for child in sorted(ws.nodes_dir.iterdir()):
            if child.is_dir():
                ws.node_dirs[child.name] = child
    return ws


def append_event(ws: Workspace, event: LedgerEvent) -> int:
    return ws.ledger.append(event)


def load_ledger(ws: Workspace) -> list[LedgerEvent]:
    events, _ = read_ledger(ws.ledger_path, ws.run_id)
    return events


TIMING_KEYS = frozenset({"latency_s", "wall_time_s", "running_time_s", "elapsed_s"})


def canonical_events(events: Iterable[LedgerEvent]) -> list[str]:
    """Ledger lines with timestamps and timing payload keys removed."""

    def strip(value: Any) -> Any:
        if isinstance(value, dict):
            return {k: strip(v) for k, v in value.items() if k not in TIMING_KEYS}
        if isinstance(value, list):
            return [strip(v) for v in value]
        return value

    out = []
    for ev in events:
        record = {
            "seq": ev.seq,
            "stage": None if ev.stage is None else ev.stage.value,
            "kind": ev.kind.value,
            "payload": strip(ev.payload),
        }
        out.append(json.dumps(record, sort_keys=True, ensure_ascii=False))
    return out
