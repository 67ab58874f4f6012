"""Child-process execution of synthesized tool scripts.

Isolation is limited to: cwd set to the node directory, an environment
allowlist, a wall-clock timeout, and killing the whole process group on
timeout. Scripts can still reach absolute paths and the network.
"""

from __future__ import annotations

import os
import shutil
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from geoflow.errors import ParameterError, ParseError, SandboxMisconfigured
from geoflow.validation import ArtifactManifest

TAIL_BYTES = 16 * 1024
KILL_GRACE = 2.0
MANIFEST_NAME = "manifest.json"

DEFAULT_ENV_ALLOWLIST = (
    "PATH",
    "HOME",
    "LANG",
    "LC_ALL",
    "TMPDIR",
    "PYTHONPATH",
    "VIRTUAL_ENV",
    "SYSTEMROOT",
)


@dataclass(frozen=True)
class ToolScript:
    node_id: str
    round: int
    body: str
    interpreter: tuple[str, ...] = (sys.executable,)
    references: tuple[str, ...] = ()
    prompt: str = ""

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ParameterError(f"empty script body for node {self.node_id}")
        if self.round < 1:
            raise ParameterError("script round is 1-based")

    @property
    def filename(self) -> str:
        return f"tool_r{self.round}"


@dataclass
class SandboxConfig:
    workdir: Path
    interpreter: tuple[str, ...] = (sys.executable,)
    timeout: float = 300.0
    env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST
    workspace_root: Path | None = None
    extra_env: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ParameterError("sandbox timeout must be positive")


@dataclass
class ExecutionRecord:
    node_id: str
    round: int
    exit_status: int
    stdout_tail: str
    stderr_tail: str
    wall_time: float
    timed_out: bool = False
    traceback: str | None = None
    manifest: ArtifactManifest | None = None
    manifest_error: str | None = None

    @property
    def ok(self) -> bool:
        return self.exit_status == 0 and not self.timed_out

    def to_payload(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "round": self.round,
            "exit_status": self.exit_status,
            "timed_out": self.timed_out,
            "wall_time_s": round(self.wall_time, 6),
            "stdout_tail": self.stdout_tail[-2000:],
            "stderr_tail": self.stderr_tail[-2000:],
            "traceback": self.traceback,
            "manifest": None if self.manifest is None else self.manifest.to_dict(),
            "manifest_error": self.manifest_error,
        }


def _tail(path: Path) -> str:
    with open(path, "rb") as fh:
        fh.seek(0, os.SEEK_END)
        size = fh.tell()
        fh.seek(max(0, size - TAIL_BYTES))
        return fh.read().decode("utf-8", errors="replace")


def extract_traceback(stderr: str) -> str | None:
    marker = "Traceback (most recent call last):"
    idx = stderr.rfind(marker)
    if idx >= 0:
        return stderr[idx:].strip()
    lines = [ln for ln in stderr.strip().splitlines() if ln.strip()]
    return "\n".join(lines[-20:]) if lines else None


def _command(interpreter: tuple[str, ...], script: str) -> list[str]:
    if any("{script}" in part for part in interpreter):
        return [part.replace("{script}", script) for part in interpreter]
    return [*interpreter, script]


def execute_script(script: ToolScript, cfg: SandboxConfig) -> ExecutionRecord:
    workdir = Path(cfg.workdir)
    if not workdir.is_dir():
        raise SandboxMisconfigured(f"workdir does not exist: {workdir}")
    interpreter = cfg.interpreter or script.interpreter
    if shutil.which(interpreter[0]) is None:
        raise SandboxMisconfigured(f"interpreter not found: {interpreter[0]}")

    (workdir / script.filename).write_text(script.body, encoding="utf-8")
    manifest_path = workdir / MANIFEST_NAME
    manifest_path.unlink(missing_ok=True)

    env = {k: os.environ[k] for k in cfg.env_allowlist if k in os.environ}
    env["WORKSPACE"] = str(cfg.workspace_root or workdir)
    env["GF_NODE_ID"] = script.node_id
    env.update(cfg.extra_env)

    out_path = workdir / f"{script.filename}.stdout"
    err_path = workdir / f"{script.filename}.stderr"
    timed_out = False
    started = time.monotonic()
    with open(out_path, "wb") as out, open(err_path, "wb") as err:
        try:
            proc = subprocess.Popen(
                _command(tuple(interpreter), script.filename),
                cwd=workdir,
                env=env,
                stdout=out,
                stderr=err,
                stdin=subprocess.DEVNULL,
                start_new_session=True,
            )
        except OSError as exc:
            raise SandboxMisconfigured(f"cannot start interpreter: {exc}") from exc
        try:
            exit_status = proc.wait(timeout=cfg.timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            try:
                exit_status = proc.wait(timeout=KILL_GRACE)
            except subprocess.TimeoutExpired:
                proc.kill()
                exit_status = proc.wait()
    wall = time.monotonic() - started

    stderr_tail = _tail(err_path)
    record = ExecutionRecord(
        node_id=script.node_id,
        round=script.round,
        exit_status=exit_status if exit_status != 0 or not timed_out else -signal.SIGKILL,
        stdout_tail=_tail(out_path),
        stderr_tail=stderr_tail,
        wall_time=wall,
        timed_out=timed_out,
    )
    if timed_out:
        record.traceback = f"timed out after {cfg.timeout:g}s and was terminated"
    elif exit_status != 0:
        record.traceback = extract_traceback(stderr_tail) or f"exited with status {exit_status}"
    if manifest_path.exists():
        try:
            record.manifest = ArtifactManifest.load(manifest_path)
        except ParseError as exc:
            record.manifest_error = str(exc)
    return record
