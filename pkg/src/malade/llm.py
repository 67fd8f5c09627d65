"""Text-completion backends: a scripted test double and an HTTP chat-completions client."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import requests

from .messages import ToolCall, render_tool_call

logger = logging.getLogger(__name__)

RETRIABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


class BackendError(RuntimeError):
    def __init__(self, message: str, *, status: int | None = None, retriable: bool = False, attempts: int = 1):
        super().__init__(message)
        self.status = status
        self.retriable = retriable
        self.attempts = attempts


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.2
    seed: int | None = 0
    max_tokens: int = 1024


@dataclass(frozen=True)
class BackendRequest:
    system_prompt: str
    turns: tuple[tuple[str, str], ...]
    tool_schemas: tuple[dict[str, Any], ...] = ()
    sampling: Sampling = field(default_factory=Sampling)

    def __post_init__(self) -> None:
        if not self.turns:
            raise ValueError("a backend request needs at least one turn")

    @property
    def last(self) -> str:
        return self.turns[-1][1]

    def full_text(self) -> str:
        return "\n".join([self.system_prompt, *(content for _, content in self.turns)])


class Backend(Protocol):
    def complete(self, request: BackendRequest) -> str | None: ...


# --------------------------------------------------------------------------- scripted


MATCH_KINDS = ("EXACT", "SUBSTRING", "SEQUENCE-INDEX")


@dataclass(frozen=True)
class ScriptEntry:
    """One canned reply.

    EXACT and SUBSTRING compare against the newest turn; SEQUENCE-INDEX
    against the backend's request counter. ``scope`` strings must all occur
    somewhere in the request (system prompt or any turn). When ``response`` is
    a list, the trial number picks the element (cycling).
    """

    kind: str
    pattern: str | int
    response: str | tuple[str, ...]
    scope: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in MATCH_KINDS:
            raise ValueError(f"unknown matcher kind {self.kind!r}")
        if self.kind == "SEQUENCE-INDEX" and not isinstance(self.pattern, int):
            raise ValueError("SEQUENCE-INDEX matcher needs an integer index")
        if self.kind != "SEQUENCE-INDEX" and not isinstance(self.pattern, str):
            raise ValueError(f"{self.kind} matcher needs a text pattern")

    def matches(self, request: BackendRequest, index: int) -> bool:
        if self.scope:
            text = request.full_text()
            if not all(s in text for s in self.scope):
                return False
        if self.kind == "SEQUENCE-INDEX":
            return index == self.pattern
        if self.kind == "EXACT":
            return request.last.strip() == str(self.pattern).strip()
        return str(self.pattern) in request.last

    def reply(self, trial: int) -> str:
        if isinstance(self.response, tuple):
            return self.response[trial % len(self.response)]
        return self.response

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ScriptEntry:
        match = d.get("match", {})
        kind = match.get("kind", "SUBSTRING")
        pattern = match.get("index") if kind == "SEQUENCE-INDEX" else match.get("pattern", "")
        response = d["response"]
        if isinstance(response, dict):
            response = render_tool_call(ToolCall(response["name"], response.get("arguments", {}), response.get("to", "")))
        elif isinstance(response, list):
            response = tuple(
                render_tool_call(ToolCall(r["name"], r.get("arguments", {}), r.get("to", ""))) if isinstance(r, dict) else r
                for r in response
            )
        return cls(kind=kind, pattern=pattern, response=response, scope=tuple(d.get("scope", ())))


class ScriptedBackend:
    """Replies from a fixed script; returns None when nothing matches.

    The reply is a pure function of (script, request number, request text),
    plus the trial number for entries with several alternatives.
    """

    def __init__(self, entries: Sequence[ScriptEntry], *, trial: int = 0) -> None:
        indices = sorted(e.pattern for e in entries if e.kind == "SEQUENCE-INDEX")
        if indices and indices != list(range(len(indices))):
            raise ValueError("SEQUENCE-INDEX entries must be dense from 0")
        self.entries = list(entries)
        self.trial = trial
        self.calls = 0
        self.requests: list[BackendRequest] = []

    def complete(self, request: BackendRequest) -> str | None:
        index = self.calls
        self.calls += 1
        self.requests.append(request)
        for entry in self.entries:
            if entry.matches(request, index):
                return entry.reply(self.trial)
        return None

    @classmethod
    def sequence(cls, responses: Sequence[str]) -> ScriptedBackend:
        return cls([ScriptEntry("SEQUENCE-INDEX", i, r) for i, r in enumerate(responses)])


class Script:
    """A script file: replies grouped by agent role.

    File layout (JSON)::

        {"roles": {"DrugAgent": [{"match": {"kind": "SUBSTRING", "pattern": "..."},
                                  "scope": ["..."], "response": "..." | {tool} | [...]}]}}
    """

    def __init__(self, roles: dict[str, list[ScriptEntry]]) -> None:
        self.roles = roles

    @classmethod
    def load(cls, path: str | Path) -> Script:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Script:
        roles = data.get("roles")
        if not isinstance(roles, dict):
            raise ValueError("script must contain a `roles` object")
        return cls({role: [ScriptEntry.from_dict(e) for e in entries] for role, entries in roles.items()})

    def backend(self, role: str, trial: int = 0) -> ScriptedBackend:
        return ScriptedBackend(self.roles.get(role, []), trial=trial)


# --------------------------------------------------------------------------- live


class ChatCompletionsBackend:
    """OpenAI-style ``/chat/completions`` client.

    Native tool calls in the response are rendered as one ``FUNC:`` block so
    callers only ever see text. Safe to share between threads; at most
    ``concurrency`` requests are in flight at once.
    """

    def __init__(
        self,
        model: str,
        *,
        api_key: str | None = None,
        base_url: str | None = None,
        max_retries: int = 5,
        backoff: float = 1.0,
        max_backoff: float = 30.0,
        concurrency: int = 4,
        timeout: float = 120.0,
        native_tools: bool = True,
        log_path: str | Path | None = None,
        sleep: Callable[[float], None] = time.sleep,
        session: requests.Session | None = None,
    ) -> None:
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("OPENAI_API_KEY", "")
        self.base_url = (base_url or os.environ.get("OPENAI_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.timeout = timeout
        self.native_tools = native_tools
        self.log_path = Path(log_path) if log_path else None
        self._sleep = sleep
        self._session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(concurrency)
        self._log_lock = threading.Lock()

    def body(self, request: BackendRequest) -> dict[str, Any]:
        messages = [{"role": "system", "content": request.system_prompt}]
        messages += [{"role": role, "content": content} for role, content in request.turns]
        body: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
        }
        if request.sampling.seed is not None:
            body["seed"] = request.sampling.seed
        if self.native_tools and request.tool_schemas:
            body["tools"] = [{"type": "function", "function": s} for s in request.tool_schemas]
        return body

    def complete(self, request: BackendRequest) -> str | None:
        body = self.body(request)
        headers = {"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"}
        url = f"{self.base_url}/chat/completions"
        attempt = 0
        while True:
            attempt += 1
            status = None
            retry_after = None
            try:
                with self._slots:
                    resp = self._session.post(url, json=body, headers=headers, timeout=self.timeout)
                status = resp.status_code
                if status == 200:
                    data = resp.json()
                    self._log(body, data)
                    return self._text(data)
                retry_after = resp.headers.get("Retry-After")
                detail = resp.text[:500]
            except requests.RequestException as exc:
                detail = str(exc)
            retriable = status is None or status in RETRIABLE_STATUS
            self._log(body, {"status": status, "error": detail})
            if not retriable or attempt > self.max_retries:
                raise BackendError(
                    f"chat completion failed (status {status}): {detail}",
                    status=status,
                    retriable=retriable,
                    attempts=attempt,
                )
            delay = min(self.max_backoff, self.backoff * 2 ** (attempt - 1))
            if retry_after:
                try:
                    delay = min(self.max_backoff, max(delay, float(retry_after)))
                except ValueError:
                    pass
            logger.warning("chat completion status %s; retry %d in %.1fs", status, attempt, delay)
            self._sleep(delay)

    @staticmethod
    def _text(data: dict[str, Any]) -> str | None:
        try:
            message = data["choices"][0]["message"]
        except (KeyError, IndexError, TypeError):
            raise BackendError("malformed chat completion response", status=200) from None
        content = message.get("content") or ""
        calls = message.get("tool_calls") or []
        if not calls and message.get("function_call"):
            calls = [{"function": message["function_call"]}]
        if calls:
            if len(calls) > 1:
                logger.warning("provider returned %d tool calls; keeping the first", len(calls))
            fn = calls[0].get("function", {})
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError:
                # Leave it unparseable so the agent sends a correction.
                return f"{content}\nFUNC: {{\"name\": {json.dumps(fn.get('name', ''))}, \"arguments\": {fn.get('arguments')}".strip()
            block = render_tool_call(ToolCall(fn.get("name", ""), args if isinstance(args, dict) else {}))
            content = f"{content}\n{block}".strip() if content.strip() else block
        return content

    def _log(self, body: dict[str, Any], response: dict[str, Any]) -> None:
        if self.log_path is None:
            return
        line = json.dumps({"request": body, "response": response}, ensure_ascii=False)
        with self._log_lock:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
