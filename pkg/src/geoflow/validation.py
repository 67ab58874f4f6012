"""Deterministic result checks: ESRI ASCII grids, manifests, and rules."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from geoflow.errors import ParameterError, ParseError

NORMALIZED_INDICES = frozenset({"ndvi", "ndwi", "ndsi", "nbr", "ndbi", "mndwi", "evi2", "normalized_index"})
CLASSIFICATION_KINDS = frozenset({"classification", "class_map", "landcover", "mask", "binary_mask", "segmentation"})
KEYVALUE_KINDS = frozenset({"keyvalue", "results", "statistics", "table"})

RULE_KINDS = ("value_range", "invalid_fraction_max", "artifact_exists", "metadata_match", "keyvalue_tolerance")
DEFAULT_INVALID_FRACTION_MAX = 0.99

_HEADER_KEYS = {
    "ncols",
    "nrows",
    "xllcorner",
    "yllcorner",
    "xllcenter",
    "yllcenter",
    "cellsize",
    "nodata_value",
}


@dataclass(frozen=True)
class RasterStats:
    rows: int
    cols: int
    min: float | None
    max: float | None
    mean: float | None
    nodata_fraction: float
    nodata_value: float = -9999.0
    crs: str = "unknown"
    bands: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "bands": self.bands,
            "min": self.min,
            "max": self.max,
            "mean": self.mean,
            "nodata_fraction": self.nodata_fraction,
            "crs": self.crs,
        }


@dataclass
class AsciiGrid:
    header: dict[str, float]
    values: np.ndarray
    stats: RasterStats

    @property
    def nodata(self) -> float:
        return self.stats.nodata_value

    def cell(self, row: int, col: int) -> float | None:
        """Value at (row, col), north row first; ``None`` for NODATA."""
        value = float(self.values[row, col])
        if value == self.nodata or math.isnan(value):
            return None
        return value

    def valid_mask(self) -> np.ndarray:
        return (self.values != self.nodata) & ~np.isnan(self.values)


def _parse_header(lines: list[str]) -> tuple[dict[str, float], int]:
    header: dict[str, float] = {}
    index = 0
    while index < len(lines):
        parts = lines[index].split()
        if not parts:
            index += 1
            continue
        key = parts[0].lower()
        if not key[0].isalpha():
            break
        if key not in _HEADER_KEYS:
            raise ParseError(f"unknown header key {parts[0]!r}", index + 1)
        if len(parts) != 2:
            raise ParseError(f"header line needs exactly one value: {lines[index]!r}", index + 1)
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise ParseError(f"non-numeric header value {parts[1]!r}", index + 1) from None
        index += 1
    for required in ("ncols", "nrows", "cellsize"):
        if required not in header:
            raise ParseError(f"missing header key {required}", index + 1)
    if not ({"xllcorner", "xllcenter"} & header.keys() and {"yllcorner", "yllcenter"} & header.keys()):
        raise ParseError("missing lower-left corner keys", index + 1)
    for key in ("ncols", "nrows"):
        if header[key] != int(header[key]) or header[key] <= 0:
            raise ParseError(f"{key} must be a positive integer", index + 1)
    header.setdefault("nodata_value", -9999.0)
    return header, index


def _sidecar_crs(path: Path) -> str:
    prj = path.with_suffix(".prj")
    if prj.exists():
        text = prj.read_text(encoding="utf-8").strip()
        if text:
            return text
    return "unknown"


def read_ascii_grid(path: Path | str) -> AsciiGrid:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError(f"not a text grid: {exc}") from None
    header, first = _parse_header(lines)
    nrows, ncols = int(header["nrows"]), int(header["ncols"])
    values = np.empty((nrows, ncols), dtype=np.float64)
    row = 0
    for lineno in range(first, len(lines)):
        parts = lines[lineno].split()
        if not parts:
            continue
        if row >= nrows:
            raise ParseError(f"more than {nrows} data rows", lineno + 1)
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} values, found {len(parts)}", lineno + 1)
        try:
            values[row] = [float(p) for p in parts]
        except ValueError:
            bad = next(p for p in parts if not _is_number(p))
            raise ParseError(f"non-numeric cell {bad!r}", lineno + 1) from None
        row += 1
    if row != nrows:
        raise ParseError(f"expected {nrows} data rows, found {row}", len(lines))
    stats = grid_stats(values, header["nodata_value"], _sidecar_crs(path))
    return AsciiGrid(header, values, stats)


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def grid_stats(values: np.ndarray, nodata: float, crs: str = "unknown") -> RasterStats:
    """Single pass over the cells: count, min, max, and a compensated sum."""
    rows, cols = values.shape
    valid = values[(values != nodata) & ~np.isnan(values)]
    n = valid.size
    if n == 0:
        return RasterStats(rows, cols, None, None, None, 1.0, nodata, crs)
    total = math.fsum(valid.tolist())
    return RasterStats(
        rows,
        cols,
        float(valid.min()),
        float(valid.max()),
        total / n,
        (rows * cols - n) / (rows * cols),
        nodata,
        crs,
    )


def write_ascii_grid(
    path: Path | str,
    values: np.ndarray,
    nodata: float = -9999.0,
    cellsize: float = 30.0,
    xll: float = 0.0,
    yll: float = 0.0,
    crs: str | None = None,
    fmt: str = "%.10g",
) -> Path:
    path = Path(path)
    values = np.asarray(values, dtype=np.float64)
    rows, cols = values.shape
    out = [
        f"ncols {cols}",
        f"nrows {rows}",
        f"xllcorner {xll:g}",
        f"yllcorner {yll:g}",
        f"cellsize {cellsize:g}",
        f"NODATA_value {nodata:g}",
    ]
    for r in range(rows):
        out.append(" ".join(fmt % v for v in values[r]))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    if crs:
        path.with_suffix(".prj").write_text(crs + "\n", encoding="utf-8")
    return path


# manifests


@dataclass
class Artifact:
    name: str
    path: str
    kind: str
    stats: dict[str, Any] | None = None


@dataclass
class ArtifactManifest:
    artifacts: list[Artifact] = field(default_factory=list)
    results: dict[str, Any] | None = None

    def artifact(self, name: str) -> Artifact | None:
        for a in self.artifacts:
            if a.name == name:
                return a
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "artifacts": [
                {"name": a.name, "path": a.path, "kind": a.kind, "stats": a.stats} for a in self.artifacts
            ],
            "results": self.results,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ArtifactManifest:
        if not isinstance(data, dict):
            raise ParseError("manifest must be a JSON object")
        artifacts = []
        for item in data.get("artifacts") or []:
            if not isinstance(item, dict) or "name" not in item or "path" not in item:
                raise ParseError(f"malformed artifact entry: {item!r}")
            kind = item.get("kind", "raster")
            if kind not in ("raster", "table", "keyvalue"):
                raise ParseError(f"unknown artifact kind {kind!r}")
            artifacts.append(Artifact(str(item["name"]), str(item["path"]), kind, item.get("stats")))
        results = data.get("results")
        if results is not None and not isinstance(results, dict):
            raise ParseError("manifest results must be an object or null")
        return cls(artifacts, results)

    @classmethod
    def load(cls, path: Path | str) -> ArtifactManifest:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ParseError(f"manifest is not valid JSON: {exc}") from None
        return cls.from_dict(data)


# rules


@dataclass(frozen=True)
class ValidationRule:
    rule_id: str
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        p = self.params
        if self.kind not in RULE_KINDS:
            raise ParameterError(f"unknown rule kind {self.kind!r}")
        if self.kind == "value_range":
            _require(self, "artifact", "lo", "hi")
            if p["lo"] > p["hi"]:
                raise ParameterError(f"{self.rule_id}: lo > hi")
        elif self.kind == "invalid_fraction_max":
            _require(self, "artifact", "threshold")
            if not 0 <= p["threshold"] <= 1:
                raise ParameterError(f"{self.rule_id}: threshold outside [0,1]")
        elif self.kind == "artifact_exists":
            _require(self, "artifact")
        elif self.kind == "metadata_match":
            _require(self, "artifact")
            if not set(p) & {"crs", "rows", "cols", "bands"}:
                raise ParameterError(f"{self.rule_id}: nothing to match")
        elif self.kind == "keyvalue_tolerance":
            _require(self, "key", "expected")

    def to_dict(self) -> dict[str, Any]:
        return {"rule_id": self.rule_id, "kind": self.kind, "params": self.params}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ValidationRule:
        return cls(data["rule_id"], data["kind"], dict(data.get("params") or {}))


def _require(rule: ValidationRule, *names: str) -> None:
    missing = [n for n in names if n not in rule.params]
    if missing:
        raise ParameterError(f"rule {rule.rule_id} ({rule.kind}) missing params: {missing}")


def load_rules(path: Path | str) -> list[ValidationRule]:
    return [ValidationRule.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


@dataclass
class ValidationReport:
    passed: bool
    failures: list[tuple[str, str]] = field(default_factory=list)
    checked: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"pass": self.passed, "failures": [list(f) for f in self.failures], "checked": self.checked}

    def summary(self) -> str:
        if self.passed:
            return f"all {self.checked} rule(s) passed"
        return "\n".join(f"- {rid}: {msg}" for rid, msg in self.failures)


def default_rules_for(
    semantic_kind: str, artifact: str | None = None, class_ids: Iterable[int] | None = None
) -> list[ValidationRule]:
    kind = semantic_kind.lower()
    name = artifact or semantic_kind
    exists = ValidationRule(f"{name}.exists", "artifact_exists", {"artifact": name})
    if kind in NORMALIZED_INDICES:
        return [
            ValidationRule(f"{name}.range", "value_range", {"artifact": name, "lo": -1.0, "hi": 1.0}),
            ValidationRule(
                f"{name}.invalid",
                "invalid_fraction_max",
                {"artifact": name, "threshold": DEFAULT_INVALID_FRACTION_MAX},
            ),
            exists,
        ]
    if kind in CLASSIFICATION_KINDS:
        ids = sorted(class_ids) if class_ids else [0, 1]
        return [
            ValidationRule(
                f"{name}.classes",
                "value_range",
                {"artifact": name, "lo": ids[0], "hi": ids[-1], "integer": True},
            ),
            ValidationRule(
                f"{name}.invalid",
                "invalid_fraction_max",
                {"artifact": name, "threshold": DEFAULT_INVALID_FRACTION_MAX},
            ),
            exists,
        ]
    if kind in KEYVALUE_KINDS:
        return [ValidationRule(f"{name}.results", "artifact_exists", {"artifact": "results"})]
    return [exists]


class _StatsCache:
    def __init__(self, manifest: ArtifactManifest, workdir: Path) -> None:
        self.manifest = manifest
        self.workdir = workdir
        self._cache: dict[str, tuple[dict[str, Any] | None, AsciiGrid | None]] = {}

    def file(self, artifact: Artifact) -> Path:
        p = Path(artifact.path)
        return p if p.is_absolute() else self.workdir / p

    def stats(self, artifact: Artifact) -> tuple[dict[str, Any] | None, AsciiGrid | None]:
        if artifact.name not in self._cache:
            grid = None
            stats = artifact.stats
            path = self.file(artifact)
            if artifact.kind == "raster" and path.is_file():
                try:
                    grid = read_ascii_grid(path)
                except ParseError:
                    grid = None
                else:
                    stats = grid.stats.to_dict()
            self._cache[artifact.name] = (stats, grid)
        return self._cache[artifact.name]


def _close(actual: float, expected: float, rel_tol: float, abs_tol: float) -> bool:
    return abs(actual - expected) <= max(abs_tol, rel_tol * abs(expected))


def _check(rule: ValidationRule, cache: _StatsCache) -> str | None:
    """Return a failure message, or ``None`` when the rule holds."""
    p = rule.params
    manifest = cache.manifest
    if rule.kind == "keyvalue_tolerance":
        results = manifest.results or {}
        if p["key"] not in results:
            return f"result key {p['key']!r} missing"
        actual = results[p["key"]]
        expected = p["expected"]
        if isinstance(expected, str) or isinstance(actual, str):
            return None if str(actual) == str(expected) else f"{p['key']}={actual!r}, expected {expected!r}"
        if not _close(float(actual), float(expected), p.get("rel_tol", 0.01), p.get("abs_tol", 1e-6)):
            return f"{p['key']}={actual} deviates from expected {expected}"
        return None

    name = p["artifact"]
    if rule.kind == "artifact_exists" and name == "results":
        if manifest.results:
            key = p.get("key")
            if key is not None and key not in manifest.results:
                return f"result key {key!r} missing"
            return None
        return "artifact missing: no key-value results"
    artifact = manifest.artifact(name)
    if artifact is None:
        return f"artifact missing: {name}"
    if rule.kind == "artifact_exists":
        if artifact.kind == "keyvalue" or cache.file(artifact).exists():
            return None
        return f"artifact missing: {name} ({artifact.path} not on disk)"

    stats, grid = cache.stats(artifact)
    if stats is None:
        return f"no statistics for artifact {name}"
    if rule.kind == "invalid_fraction_max":
        frac = float(stats.get("nodata_fraction", 0.0))
        if frac > p["threshold"]:
            return f"invalid fraction {frac:.4f} exceeds {p['threshold']}"
        return None
    if rule.kind == "value_range":
        lo, hi = p["lo"], p["hi"]
        vmin, vmax = stats.get("min"), stats.get("max")
        if vmin is None or vmax is None:
            return f"{name} has no valid cells to range-check"
        if vmin < lo or vmax > hi:
            return f"out of logical range: [{vmin}, {vmax}] not within [{lo}, {hi}]"
        if p.get("integer"):
            if grid is not None:
                cells = grid.values[grid.valid_mask()]
                if not np.all(cells == np.round(cells)):
                    return f"{name} has non-integer class values"
            elif vmin != int(vmin) or vmax != int(vmax):
                return f"{name} has non-integer class values"
        return None
    if rule.kind == "metadata_match":
        problems = []
        for key in ("crs", "rows", "cols", "bands"):
            if key in p and stats.get(key) != p[key]:
                problems.append(f"{key}={stats.get(key)!r} (expected {p[key]!r})")
        return "metadata mismatch: " + ", ".join(problems) if problems else None
    raise AssertionError(rule.kind)


def evaluate_rules(
    manifest: ArtifactManifest | None, rules: list[ValidationRule], workdir: Path | str
) -> ValidationReport:
    """Evaluate every rule (no short-circuit). A missing manifest fails every
    artifact-bound rule rather than passing vacuously."""
    manifest = manifest or ArtifactManifest()
    cache = _StatsCache(manifest, Path(workdir))
    failures = []
    for rule in rules:
        message = _check(rule, cache)
        if message is not None:
            failures.append((rule.rule_id, message))
    return ValidationReport(not failures, failures, len(rules))
