"""Engine configuration: defaults, config file, ``GF_*`` environment, flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli

from geoflow.errors import ParameterError

BACKENDS = ("scripted", "http")
ABLATIONS = ("disable_data_summary", "disable_planner", "disable_checker", "disable_knowledge", "disable_tools")


@dataclass
class EngineConfig:
    backend: str = "scripted"
    fixture: str | None = None
    strict_fixture: bool | None = None
    llm_endpoint: str | None = None
    llm_model: str = "default"
    role_models: dict[str, str] = field(default_factory=dict)

    max_calls: int = 200
    max_debug_rounds: int = 10
    probe_attempts: int = 5
    node_timeout: float = 300.0
    stage_timeouts: dict[str, float] = field(default_factory=dict)
    case_timeout: float = 900.0

    n_candidates: int = 3
    merge_threshold: float = 0.85
    availability_weight: float = 0.6
    rigor_weight: float = 0.4

    disable_data_summary: bool = False
    disable_planner: bool = False
    disable_checker: bool = False
    disable_knowledge: bool = False
    disable_tools: bool = False

    checker_llm: bool = False
    keep_transcripts: bool = True
    parallel: bool = False
    bench_workers: int = 1

    catalog_dir: str | None = None
    knowledge_dir: str | None = None
    prompts_dir: str | None = None
    workspace: str = "geoflow-work"

    def validate(self) -> EngineConfig:
        if self.backend not in BACKENDS:
            raise ParameterError(f"unknown backend {self.backend!r}")
        if self.max_debug_rounds < 0:
            raise ParameterError("max_debug_rounds must be non-negative")
        for name in ("max_calls", "probe_attempts", "n_candidates", "bench_workers"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        for name in ("node_timeout", "case_timeout"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if not 0 < self.merge_threshold <= 1:
            raise ParameterError("merge_threshold must be in (0, 1]")
        return self

    @property
    def weights(self) -> tuple[float, float]:
        return (self.availability_weight, self.rigor_weight)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(EngineConfig)}


def _coerce(name: str, value: Any) -> Any:
    default = getattr(EngineConfig(), name)
    ftype = _FIELDS[name].type
    if isinstance(value, str):
        if isinstance(default, bool) or "bool" in str(ftype):
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ParameterError(f"{name}: expected a boolean, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, dict):
            pairs = [p.split("=", 1) for p in value.split(",") if p.strip()]
            return {k.strip(): v.strip() for k, v in pairs}
    return value


def overlay(base: EngineConfig, values: Mapping[str, Any], source: str = "config") -> EngineConfig:
    updates = {}
    for key, value in values.items():
        name = key.replace("-", "_")
        if name not in _FIELDS:
            raise ParameterError(f"unknown {source} key {key!r}")
        if value is None:
            continue
        try:
            updates[name] = _coerce(name, value)
        except ValueError as exc:
            raise ParameterError(f"{source} key {key}: {exc}") from None
    return dataclasses.replace(base, **updates)


def from_file(path: Path | str) -> dict[str, Any]:
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    flat: dict[str, Any] = {}
    for key, value in data.items():
        # sections ([budgets], [ablation], ...) are flattened
        if isinstance(value, dict) and key.replace("-", "_") not in _FIELDS:
            flat.update(value)
        else:
            flat[key] = value
    return flat


def from_env(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for name in _FIELDS:
        key = f"GF_{name.upper()}"
        if key in environ:
            out[name] = environ[key]
    if "GF_LLM_ENDPOINT" in environ:
        out["llm_endpoint"] = environ["GF_LLM_ENDPOINT"]
    if "GF_LLM_MODEL" in environ:
        out["llm_model"] = environ["GF_LLM_MODEL"]
    return out


def resolve_config(
    config_file: Path | str | None = None,
    environ: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
) -> EngineConfig:
    """defaults, then file, then environment, then flags; the last one wins."""
    cfg = EngineConfig()
    if config_file is not None:
        cfg = overlay(cfg, from_file(config_file), "config file")
    cfg = overlay(cfg, from_env(environ), "environment")
    if flags:
        cfg = overlay(cfg, flags, "flag")
    return cfg.validate()
