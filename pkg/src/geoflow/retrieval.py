"""Tool and knowledge retrieval over a brute-force cosine index.

The fallback embedder hashes lowercase alphanumeric tokens with 64-bit FNV-1a
into 256 buckets and L2-normalizes the count vector, so rankings are
reproducible across machines. Any other embedder can be plugged in as long as
it returns unit vectors of the same dimension.
"""

from __future__ import annotations

import json
import logging
import math
import re
import sys
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import numpy as np

from geoflow.core import EventKind, Ledger
from geoflow.errors import DuplicateEntry, ParameterError, SearchUnavailable

log = logging.getLogger(__name__)

DIMS = 256
FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

TIERS = ("function_tool", "reference_script", "knowledge_chunk", "external_command")
DEFAULT_K = {"reference_script": 5, "function_tool": 5, "knowledge_chunk": 8, "external_command": 5}

_TOKEN = re.compile(r"[^\W_]+")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def bucket_counts(text: str) -> np.ndarray:
    counts = np.zeros(DIMS, dtype=np.int64)
    for token in tokenize(text):
        counts[fnv1a_64(token.encode("utf-8")) % DIMS] += 1
    return counts


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    # integer bucket counts from the fallback embedder; enables exact tie handling
    counts: tuple[int, ...] | None = None

    @property
    def dims(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def is_zero(self) -> bool:
        return not any(self.values)


def embed(text: str) -> EmbeddingVector:
    counts = bucket_counts(text)
    norm = math.sqrt(int(np.dot(counts, counts)))
    if norm == 0:
        values = np.zeros(DIMS)
    else:
        values = counts / norm
    return EmbeddingVector(tuple(float(v) for v in values), tuple(int(c) for c in counts))


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.is_zero() or b.is_zero():
        return 0.0
    if a.counts is not None and b.counts is not None:
        dot = sum(x * y for x, y in zip(a.counts, b.counts) if x and y)
        na = sum(x * x for x in a.counts)
        nb = sum(y * y for y in b.counts)
        return dot / (math.sqrt(na) * math.sqrt(nb))
    return float(np.dot(a.as_array(), b.as_array()))


# chunking


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    ordinal: int
    text: str
    char_span: tuple[int, int]


_PARAGRAPH = re.compile(r"\n\s*\n")
_SENTENCE = re.compile(r"[.!?](?=\s)|\n")


def _snap(text: str, start: int, end: int, max_chars: int) -> int:
    """Move ``end`` back to the last paragraph, else sentence, boundary inside
    the final 20% of the window; returns ``end`` unchanged if none exists."""
    zone_start = start + math.ceil(0.8 * max_chars)
    window = text[zone_start:end]
    best = None
    for m in _PARAGRAPH.finditer(window):
        best = zone_start + m.end()
    if best is None:
        for m in _SENTENCE.finditer(window):
            best = zone_start + m.end()
    if best is None or best <= start:
        return end
    return best


def chunk_document(text: str, max_chars: int, overlap: int, doc_id: str = "doc") -> list[Chunk]:
    if max_chars <= 0:
        raise ParameterError("max_chars must be positive")
    if overlap < 0 or overlap >= max_chars:
        raise ParameterError("overlap must satisfy 0 <= overlap < max_chars")
    chunks: list[Chunk] = []
    n = len(text)
    start = 0
    while start < n:
        end = min(start + max_chars, n)
        if end < n:
            snapped = _snap(text, start, end, max_chars)
            # a snap must still leave forward progress after the overlap
            if snapped - overlap > start:
                end = snapped
        chunks.append(Chunk(doc_id, len(chunks), text[start:end], (start, end)))
        if end >= n:
            break
        start = end - overlap
    return chunks


# catalog and index


@dataclass
class CatalogEntry:
    entry_id: str
    tier: str
    description: str
    body: str = ""
    provenance: str = ""
    embedding: EmbeddingVector | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.tier not in TIERS:
            raise ParameterError(f"unknown tier {self.tier!r}")
        if not self.description or not self.description.strip():
            raise ParameterError(f"entry {self.entry_id} has an empty description")
        if self.tier == "external_command":
            if "{input}" not in self.body or "{output}" not in self.body:
                raise ParameterError(
                    f"external command {self.entry_id} needs {{input}} and {{output}} placeholders"
                )

    def to_dict(self, with_embedding: bool = True) -> dict[str, Any]:
        data: dict[str, Any] = {
            "entry_id": self.entry_id,
            "tier": self.tier,
            "description": self.description,
            "body": self.body,
            "provenance": self.provenance,
        }
        if self.metadata:
            data["metadata"] = self.metadata
        if with_embedding and self.embedding is not None:
            data["embedding"] = list(self.embedding.values)
            if self.embedding.counts is not None:
                data["counts"] = list(self.embedding.counts)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CatalogEntry:
        embedding = None
        if data.get("embedding") is not None:
            counts = data.get("counts")
            embedding = EmbeddingVector(
                tuple(float(v) for v in data["embedding"]),
                None if counts is None else tuple(int(c) for c in counts),
            )
        return cls(
            entry_id=str(data["entry_id"]),
            tier=data["tier"],
            description=data["description"],
            body=data.get("body", ""),
            provenance=data.get("provenance", ""),
            embedding=embedding,
            metadata=data.get("metadata") or {},
        )

    def command(self, input_path: str, output_path: str, **params: Any) -> str:
        params.setdefault("python", sys.executable)
        return self.body.format(input=input_path, output=output_path, **params)


@dataclass(frozen=True)
class SearchResult:
    entry_id: str
    score: float
    rank: int


class Embedder(Protocol):
    def __call__(self, text: str) -> EmbeddingVector: ...


class VectorIndex:
    """Exhaustive cosine index. Rebuilds swap the matrices atomically."""

    def __init__(self, embedder: Embedder = embed) -> None:
        self.embedder = embedder
        self._entries: dict[str, CatalogEntry] = {}
        self._order: list[str] = []
        self._matrix = np.zeros((0, DIMS))
        self._counts: np.ndarray | None = np.zeros((0, DIMS), dtype=np.int64)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def get(self, entry_id: str) -> CatalogEntry:
        return self._entries[entry_id]

    def entries(self, tier: str | None = None) -> list[CatalogEntry]:
        return [e for e in (self._entries[i] for i in self._order) if tier is None or e.tier == tier]

    def add(self, entries: Iterable[CatalogEntry]) -> VectorIndex:
        entries = list(entries)
        seen = set(self._entries)
        for entry in entries:
            if entry.entry_id in seen:
                raise DuplicateEntry(entry.entry_id)
            seen.add(entry.entry_id)
        for entry in entries:
            if entry.embedding is None:
                entry.embedding = self.embedder(entry.description)
        with self._lock:
            for entry in entries:
                self._entries[entry.entry_id] = entry
                self._order.append(entry.entry_id)
            all_entries = [self._entries[i] for i in self._order]
            self._matrix = np.array([e.embedding.values for e in all_entries], dtype=np.float64).reshape(
                -1, DIMS
            )
            if all(e.embedding.counts is not None for e in all_entries):
                self._counts = np.array(
                    [e.embedding.counts for e in all_entries], dtype=np.int64
                ).reshape(-1, DIMS)
            else:
                self._counts = None
            self._tiers = np.array([e.tier for e in all_entries])
            self._ids = np.array(self._order)
        return self

    def query(self, query_text: str, k: int, tier_filter: str | None = None) -> list[SearchResult]:
        if k <= 0:
            raise ParameterError("k must be positive")
        if tier_filter is not None and tier_filter not in TIERS:
            raise ParameterError(f"unknown tier {tier_filter!r}")
        with self._lock:
            matrix, counts, ids = self._matrix, self._counts, list(self._order)
            tiers = self._tiers if ids else np.array([])
        if not ids:
            return []
        q = self.embedder(query_text)
        mask = np.ones(len(ids), dtype=bool) if tier_filter is None else tiers == tier_filter
        rows = np.flatnonzero(mask)
        if rows.size == 0:
            return []
        exact = counts is not None and q.counts is not None
        if exact:
            qc = np.asarray(q.counts, dtype=np.int64)
            dots = counts[rows] @ qc
            norms = np.einsum("ij,ij->i", counts[rows], counts[rows])
            qn = int(qc @ qc)
            with np.errstate(divide="ignore", invalid="ignore"):
                scores = np.where(
                    (norms > 0) & (qn > 0), dots / (np.sqrt(norms) * math.sqrt(qn or 1)), 0.0
                )
        else:
            scores = matrix[rows] @ q.as_array()
        take = min(k, rows.size)
        # float prefilter, then exact ordering of everything near the cut
        kth = np.partition(-scores, take - 1)[take - 1]
        near = np.flatnonzero(-scores <= kth + 1e-9)
        if exact:

            def key(i: int) -> tuple[Fraction, str]:
                d = int(dots[i])
                n = int(norms[i])
                if n == 0 or qn == 0:
                    return (Fraction(0), ids[rows[i]])
                sign = 1 if d > 0 else -1 if d < 0 else 0
                return (-sign * Fraction(d * d, n), ids[rows[i]])

        else:

            def key(i: int) -> tuple[float, str]:  # type: ignore[misc]
                return (-float(scores[i]), ids[rows[i]])

        ordered = sorted(near.tolist(), key=key)[:take]
        return [
            SearchResult(ids[rows[i]], float(scores[i]), rank)
            for rank, i in enumerate(ordered, start=1)
        ]

    def save(self, directory: Path | str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for tier in TIERS:
            members = self.entries(tier)
            path = directory / f"{tier}.jsonl"
            if not members:
                path.unlink(missing_ok=True)
                continue
            with open(path, "w", encoding="utf-8") as fh:
                for entry in members:
                    fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, directory: Path | str, embedder: Embedder = embed) -> VectorIndex:
        index = cls(embedder)
        directory = Path(directory)
        entries: list[CatalogEntry] = []
        for tier in TIERS:
            path = directory / f"{tier}.jsonl"
            if path.exists():
                entries.extend(load_catalog(path))
        return index.add(entries)


def index_add(entries: Iterable[CatalogEntry], index: VectorIndex | None = None) -> VectorIndex:
    return (index or VectorIndex()).add(entries)


def query_top_k(
    index: VectorIndex, query_text: str, k: int, tier_filter: str | None = None
) -> list[SearchResult]:
    return index.query(query_text, k, tier_filter)


def load_catalog(path: Path | str) -> list[CatalogEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(CatalogEntry.from_dict(json.loads(line)))
    return entries


# script descriptions

MAX_DESCRIPTION_WORDS = 60


def describe_script(body: str, gateway: Any, registry: Any = None) -> str:
    from geoflow.llm import render_prompt

    if not body or not body.strip():
        raise ParameterError("cannot describe an empty script")
    prompt = render_prompt("describe_script", {"body": body, "max_words": MAX_DESCRIPTION_WORDS}, registry)
    text = gateway.ask("coder", prompt).strip()
    words = text.split()
    if len(words) > MAX_DESCRIPTION_WORDS:
        text = " ".join(words[:MAX_DESCRIPTION_WORDS])
    return text


def _docstring_summary(body: str, fallback: str) -> str:
    m = re.search(r'^\s*(?:"""|\'\'\')(.*?)(?:"""|\'\'\')', body, re.S)
    if m and m.group(1).strip():
        return m.group(1).strip().splitlines()[0]
    for line in body.splitlines():
        if line.strip().startswith("#") and line.strip("# ").strip():
            return line.strip("# ").strip()
    return fallback


def ingest_tree(
    root: Path | str,
    gateway: Any = None,
    max_chars: int = 1200,
    overlap: int = 150,
) -> list[CatalogEntry]:
    """Turn a directory of scripts, documents and catalog files into entries.

    ``*.py`` files become reference scripts (described by the gateway when one
    is given, else by their docstring); ``*.md``/``*.txt`` documents are
    chunked into knowledge entries; ``*.jsonl`` files are read as catalogs.
    """
    root = Path(root)
    entries: list[CatalogEntry] = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        slug = re.sub(r"[^A-Za-z0-9_.\-]+", "_", rel)
        if path.suffix == ".py":
            body = path.read_text(encoding="utf-8")
            if not body.strip():
                continue
            if gateway is not None:
                desc = describe_script(body, gateway)
            else:
                desc = _docstring_summary(body, path.stem.replace("_", " "))
            entries.append(CatalogEntry(f"script:{slug}", "reference_script", desc, body, rel))
        elif path.suffix in (".md", ".txt"):
            text = path.read_text(encoding="utf-8")
            for chunk in chunk_document(text, max_chars, overlap, doc_id=rel):
                if not chunk.text.strip():
                    continue
                entries.append(
                    CatalogEntry(
                        f"doc:{slug}#{chunk.ordinal}",
                        "knowledge_chunk",
                        chunk.text,
                        chunk.text,
                        rel,
                        metadata={"char_span": list(chunk.char_span)},
                    )
                )
        elif path.suffix == ".jsonl":
            entries.extend(load_catalog(path))
    return entries


# online branch


@dataclass(frozen=True)
class WebResult:
    title: str
    url: str
    snippet: str


class SearchAdapter(Protocol):
    enabled: bool

    def search(self, query: str, k: int) -> list[WebResult]: ...


class DisabledSearch:
    enabled = False

    def search(self, query: str, k: int) -> list[WebResult]:
        return []


class FixtureSearch:
    enabled = True

    def __init__(self, results: Sequence[WebResult] | Callable[[str], Sequence[WebResult]]) -> None:
        self._results = results

    def search(self, query: str, k: int) -> list[WebResult]:
        results = self._results(query) if callable(self._results) else self._results
        return list(results)[:k]


def online_search(
    query: str, k: int, adapter: SearchAdapter | None = None, ledger: Ledger | None = None
) -> list[WebResult]:
    """Query the online branch. Transport failures raise SearchUnavailable,
    which callers treat as non-fatal."""
    adapter = adapter or DisabledSearch()
    if not adapter.enabled:
        if ledger is not None:
            ledger.emit(EventKind.SEARCH, {"query": query, "marker": "search_disabled", "results": 0})
        return []
    try:
        results = adapter.search(query, k)[:k]
    except SearchUnavailable:
        raise
    except Exception as exc:  # adapters wrap arbitrary transports
        if ledger is not None:
            ledger.emit(EventKind.SEARCH, {"query": query, "marker": "search_unavailable", "error": str(exc)})
        raise SearchUnavailable(str(exc)) from exc
    if ledger is not None:
        ledger.emit(EventKind.SEARCH, {"query": query, "marker": "ok", "results": len(results)})
    return results
