"""Chat-completion gateway shared by all five agent roles.

Two backends are provided: :class:`ScriptedBackend` replays canned responses
per role (deterministic tests and fixtures) and :class:`HttpBackend` speaks the
OpenAI-compatible ``/chat/completions`` wire schema.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Protocol

import httpx

from geoflow.core import EventKind, Ledger, StageLabel
from geoflow.errors import (
    BackendRejected,
    BackendUnavailable,
    BudgetExhausted,
    FixtureExhausted,
    ParameterError,
    TemplateError,
)

log = logging.getLogger(__name__)

ROLES = ("data_summary", "planner", "workflow", "coder", "checker")
SPEAKERS = ("system", "user", "assistant")

DEFAULT_TEMPERATURE = {
    "data_summary": 0.0,
    "planner": 0.7,
    "workflow": 0.0,
    "coder": 0.0,
    "checker": 0.0,
}

TRANSIENT_STATUS = frozenset({408, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class ChatRequest:
    role_tag: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.role_tag not in ROLES:
            raise ParameterError(f"unknown role_tag {self.role_tag!r}")
        if not self.messages:
            raise ParameterError("chat request needs at least one message")
        for speaker, _ in self.messages:
            if speaker not in SPEAKERS:
                raise ParameterError(f"unknown speaker {speaker!r}")
        if self.temperature < 0:
            raise ParameterError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ParameterError("max_output_tokens must be positive")

    @classmethod
    def build(
        cls,
        role_tag: str,
        user: str,
        system: str | None = None,
        temperature: float | None = None,
        max_output_tokens: int = 4096,
    ) -> ChatRequest:
        messages: list[tuple[str, str]] = []
        if system:
            messages.append(("system", system))
        messages.append(("user", user))
        if temperature is None:
            temperature = DEFAULT_TEMPERATURE.get(role_tag, 0.0)
        return cls(role_tag, tuple(messages), temperature, max_output_tokens)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    backend_id: str
    latency: float = 0.0
    usage: tuple[int, int] | None = None
    retries: int = 0


class CallBudget:
    """Thread-safe counter of LLM calls, with optional per-role caps."""

    def __init__(self, max_calls: int = 200, per_role_caps: dict[str, int] | None = None) -> None:
        if max_calls < 0:
            raise ParameterError("max_calls must be non-negative")
        self.max_calls = max_calls
        self.per_role_caps = dict(per_role_caps or {})
        self.calls_used = 0
        self.role_calls: dict[str, int] = {}
        self._lock = threading.Lock()

    def reserve(self, role_tag: str) -> None:
        with self._lock:
            if self.calls_used >= self.max_calls:
                raise BudgetExhausted(f"call budget of {self.max_calls} exhausted")
            cap = self.per_role_caps.get(role_tag)
            used = self.role_calls.get(role_tag, 0)
            if cap is not None and used >= cap:
                raise BudgetExhausted(f"call cap of {cap} for role {role_tag} exhausted")
            self.calls_used += 1
            self.role_calls[role_tag] = used + 1

    @property
    def remaining(self) -> int:
        return self.max_calls - self.calls_used


class Backend(Protocol):
    backend_id: str

    def complete(self, req: ChatRequest) -> ChatResponse: ...


class ScriptedBackend:
    """Replays canned responses FIFO per role.

    In non-strict mode an exhausted queue keeps returning its last response.
    """

    backend_id = "scripted"

    def __init__(self, queues: dict[str, list[str]], strict: bool = True) -> None:
        unknown = set(queues) - set(ROLES)
        if unknown:
            raise ParameterError(f"fixture names unknown roles: {sorted(unknown)}")
        self.strict = strict
        self._queues = {role: deque(items) for role, items in queues.items()}
        self._last: dict[str, str] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path | str) -> ScriptedBackend:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data.get("queues", {}), bool(data.get("strict", True)))

    def remaining(self, role_tag: str) -> int:
        return len(self._queues.get(role_tag, ()))

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            queue = self._queues.get(req.role_tag)
            if queue:
                text = queue.popleft()
                self._last[req.role_tag] = text
            elif self.strict:
                raise FixtureExhausted(f"no scripted response left for role {req.role_tag}")
            else:
                text = self._last.get(req.role_tag, "")
        return ChatResponse(text=text, backend_id=self.backend_id)


class HttpBackend:
    """OpenAI-compatible chat completions over HTTP with exponential backoff."""

    backend_id = "http"

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        model: str = "default",
        role_models: dict[str, str] | None = None,
        max_retries: int = 3,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        timeout: float = 120.0,
        sleep: Callable[[float], None] = time.sleep,
        client: httpx.Client | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.role_models = dict(role_models or {})
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.timeout = timeout
        self._sleep = sleep
        self._client = client

    @classmethod
    def from_env(cls, **kwargs: Any) -> HttpBackend:
        endpoint = os.environ.get("GF_LLM_ENDPOINT")
        if not endpoint:
            raise BackendUnavailable("GF_LLM_ENDPOINT is not set")
        return cls(
            endpoint,
            api_key=os.environ.get("GF_LLM_API_KEY"),
            model=os.environ.get("GF_LLM_MODEL", "default"),
            **kwargs,
        )

    def _url(self) -> str:
        url = self.endpoint.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        return url

    def payload(self, req: ChatRequest) -> dict[str, Any]:
        return {
            "model": self.role_models.get(req.role_tag, self.model),
            "messages": [{"role": s, "content": t} for s, t in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }

    def complete(self, req: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self.payload(req)
        client = self._client or httpx.Client(timeout=self.timeout)
        retries = 0
        delay = self.backoff_base
        last_error = "no attempt made"
        started = time.monotonic()
        try:
            while True:
                try:
                    resp = client.post(self._url(), json=body, headers=headers)
                except httpx.TransportError as exc:
                    last_error = f"transport error: {exc}"
                else:
                    if resp.status_code == 200:
                        return self._parse(resp, retries, time.monotonic() - started)
                    if resp.status_code not in TRANSIENT_STATUS:
                        raise BackendRejected(resp.status_code, resp.text[:500])
                    last_error = f"status {resp.status_code}"
                if retries >= self.max_retries:
                    raise BackendUnavailable(f"gave up after {retries} retries: {last_error}")
                log.warning("chat completion failed (%s); retrying in %.1fs", last_error, delay)
                self._sleep(delay)
                delay *= self.backoff_factor
                retries += 1
        finally:
            if self._client is None:
                client.close()

    def _parse(self, resp: httpx.Response, retries: int, latency: float) -> ChatResponse:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"unparseable completion body: {exc}") from exc
        usage = None
        if isinstance(data.get("usage"), dict):
            u = data["usage"]
            usage = (int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
        return ChatResponse(
            text=text or "",
            backend_id=self.backend_id,
            latency=latency,
            usage=usage,
            retries=retries,
        )


def http_complete(
    req: ChatRequest, endpoint: str, credentials: str | None = None, **kwargs: Any
) -> ChatResponse:
    return HttpBackend(endpoint, api_key=credentials, **kwargs).complete(req)


def record_usage(
    resp: ChatResponse,
    ledger: Ledger | None,
    role_tag: str | None = None,
    stage: StageLabel | None = None,
    prompt: str | None = None,
) -> None:
    if ledger is None:
        return
    payload: dict[str, Any] = {
        "role_tag": role_tag,
        "backend_id": resp.backend_id,
        "usage": None,
        "latency_s": round(resp.latency, 6),
        "retries": resp.retries,
    }
    if resp.usage is not None:
        payload["usage"] = {"prompt_tokens": resp.usage[0], "output_tokens": resp.usage[1]}
        payload["prompt_tokens"] = resp.usage[0]
    if prompt is not None:
        payload["prompt"] = prompt
        payload["response"] = resp.text
    ledger.emit(EventKind.LLM_CALL, payload, stage)


class Gateway:
    """Budgeted, ledger-logged access to one backend."""

    def __init__(
        self,
        backend: Backend,
        budget: CallBudget | None = None,
        ledger: Ledger | None = None,
        keep_transcripts: bool = True,
    ) -> None:
        self.backend = backend
        self.budget = budget or CallBudget()
        self.ledger = ledger
        self.keep_transcripts = keep_transcripts

    def complete(
        self,
        req: ChatRequest,
        budget: CallBudget | None = None,
        stage: StageLabel | None = None,
    ) -> ChatResponse:
        (budget or self.budget).reserve(req.role_tag)
        started = time.monotonic()
        resp = self.backend.complete(req)
        if not resp.latency:
            resp = ChatResponse(
                text=resp.text,
                backend_id=resp.backend_id,
                latency=time.monotonic() - started,
                usage=resp.usage,
                retries=resp.retries,
            )
        prompt = "\n\n".join(text for _, text in req.messages) if self.keep_transcripts else None
        record_usage(resp, self.ledger, req.role_tag, stage, prompt)
        return resp

    def ask(self, role_tag: str, prompt: str, stage: StageLabel | None = None, **kwargs: Any) -> str:
        return self.complete(ChatRequest.build(role_tag, prompt, **kwargs), stage=stage).text


# prompt templates

_PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


class PromptRegistry:
    """Templates keyed by id; loaded from the packaged ``prompts/`` directory
    and optionally overridden from a user directory."""

    def __init__(self, templates: dict[str, str] | None = None) -> None:
        self.templates: dict[str, str] = dict(templates or {})

    @classmethod
    def default(cls, override_dir: Path | str | None = None) -> PromptRegistry:
        reg = cls()
        pkg = resources.files("geoflow") / "prompts"
        for item in pkg.iterdir():
            if item.name.endswith(".txt"):
                reg.templates[item.name[:-4]] = item.read_text(encoding="utf-8")
        if override_dir is not None:
            reg.load_dir(override_dir)
        return reg

    def load_dir(self, path: Path | str) -> None:
        for file in sorted(Path(path).glob("*.txt")):
            self.templates[file.stem] = file.read_text(encoding="utf-8")

    def register(self, template_id: str, text: str) -> None:
        self.templates[template_id] = text

    def render(self, template_id: str, context: dict[str, Any]) -> str:
        try:
            template = self.templates[template_id]
        except KeyError:
            raise ParameterError(f"unknown prompt template {template_id!r}") from None
        return render_text(template, context)


def _stringify(value: Any) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, indent=2, sort_keys=True, ensure_ascii=False, default=str)


def render_text(template: str, context: dict[str, Any]) -> str:
    for name in _PLACEHOLDER.findall(template):
        if name not in context:
            raise TemplateError(name)
    return _PLACEHOLDER.sub(lambda m: _stringify(context[m.group(1)]), template)


_DEFAULT_REGISTRY: PromptRegistry | None = None


def render_prompt(template_id: str, context: dict[str, Any], registry: PromptRegistry | None = None) -> str:
    global _DEFAULT_REGISTRY
    if registry is None:
        if _DEFAULT_REGISTRY is None:
            _DEFAULT_REGISTRY = PromptRegistry.default()
        registry = _DEFAULT_REGISTRY
    return registry.render(template_id, context)


# response parsing helpers used by the agents

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.S)


def extract_code(text: str) -> str:
    """Return the first fenced code block, or the whole text when unfenced."""
    m = _FENCE.search(text)
    body = m.group(2) if m else text
    return body.strip("\n") + "\n" if body.strip() else ""


def extract_json(text: str) -> Any:
    """Parse a JSON document from a response, tolerating fences and prose."""
    for m in _FENCE.finditer(text):
        try:
            return json.loads(m.group(2))
        except ValueError:
            continue
    stripped = text.strip()
    try:
        return json.loads(stripped)
    except ValueError:
        pass
    start = min((i for i in (stripped.find("{"), stripped.find("[")) if i >= 0), default=-1)
    if start < 0:
        raise ValueError("no JSON document found in response")
    decoder = json.JSONDecoder()
    value, _ = decoder.raw_decode(stripped[start:])
    return value
