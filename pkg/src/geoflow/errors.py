"""Exception hierarchy shared across the engine."""

from __future__ import annotations

from typing import Any


class GeoflowError(Exception):
    """Base class for all engine errors."""


class ParameterError(GeoflowError, ValueError):
    pass


class WorkspaceError(GeoflowError):
    pass


class LedgerCorrupt(GeoflowError):
    pass


# gateway


class BudgetExhausted(GeoflowError):
    pass


class BackendUnavailable(GeoflowError):
    pass


class BackendRejected(GeoflowError):
    def __init__(self, status: int, excerpt: str) -> None:
        super().__init__(f"backend rejected request ({status}): {excerpt}")
        self.status = status
        self.excerpt = excerpt


class FixtureExhausted(GeoflowError):
    pass


class TemplateError(GeoflowError, KeyError):
    def __init__(self, placeholder: str) -> None:
        super().__init__(placeholder)
        self.placeholder = placeholder

    def __str__(self) -> str:
        return f"missing placeholder value: {self.placeholder}"


# retrieval


class DuplicateEntry(GeoflowError):
    pass


class SearchUnavailable(GeoflowError):
    pass


# validation


class ParseError(GeoflowError):
    def __init__(self, message: str, line: int | None = None) -> None:
        text = message if line is None else f"line {line}: {message}"
        super().__init__(text)
        self.line = line


# agents


class ProbeFailed(GeoflowError):
    def __init__(self, message: str, attempts: list[Any]) -> None:
        super().__init__(message)
        self.attempts = attempts


class PlanningFailed(GeoflowError):
    pass


class CompileFailed(GeoflowError):
    def __init__(self, message: str, report: Any = None) -> None:
        super().__init__(message)
        self.report = report


class SandboxMisconfigured(GeoflowError):
    pass


class NodeFailed(GeoflowError):
    def __init__(self, node_id: str, record: Any, report: Any, rounds: int) -> None:
        super().__init__(f"node {node_id} failed after {rounds} round(s)")
        self.node_id = node_id
        self.record = record
        self.report = report
        self.rounds = rounds


# bench


class CaseInvalid(GeoflowError):
    pass
