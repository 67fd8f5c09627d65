"""Agents: message transformers with LLM, tool and user responders."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, Union

from .llm import Backend, BackendRequest, Sampling
from .messages import EntityKind, Message, ToolCall

logger = logging.getLogger(__name__)

HandlerResult = Union[Message, str, None]
Handler = Callable[["Agent", ToolCall], HandlerResult]

FIELD_TYPES = ("string", "number", "integer", "boolean", "list[string]", "object", "any")


class DuplicateTool(ValueError):
    pass


@dataclass(frozen=True)
class ToolField:
    name: str
    type: str = "string"
    required: bool = True
    description: str = ""

    def __post_init__(self) -> None:
        if self.type not in FIELD_TYPES:
            raise ValueError(f"unknown field type {self.type!r}")

    def check(self, value: Any) -> str | None:
        """Return a problem description, or None when ``value`` fits."""
        t = self.type
        ok = {
            "string": lambda v: isinstance(v, str),
            "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
            "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
            "boolean": lambda v: isinstance(v, bool),
            "list[string]": lambda v: isinstance(v, list) and all(isinstance(x, str) for x in v),
            "object": lambda v: isinstance(v, dict),
            "any": lambda v: True,
        }[t](value)
        return None if ok else f"`{self.name}` must be of type {t}"


@dataclass(frozen=True)
class ToolSpec:
    name: str
    fields: tuple[ToolField, ...]
    handler: Handler
    description: str = ""
    usage: str = ""

    def validate(self, call: ToolCall) -> list[str]:
        problems = []
        for f in self.fields:
            if f.name not in call.arguments:
                if f.required:
                    problems.append(f"missing required field `{f.name}`")
                continue
            problem = f.check(call.arguments[f.name])
            if problem:
                problems.append(problem)
        return problems

    def json_schema(self) -> dict[str, Any]:
        types = {
            "string": {"type": "string"},
            "number": {"type": "number"},
            "integer": {"type": "integer"},
            "boolean": {"type": "boolean"},
            "list[string]": {"type": "array", "items": {"type": "string"}},
            "object": {"type": "object"},
            "any": {},
        }
        props = {f.name: dict(types[f.type], description=f.description) for f in self.fields}
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "object",
                "properties": props,
                "required": [f.name for f in self.fields if f.required],
            },
        }

    def render(self) -> str:
        lines = [f"TOOL `{self.name}`: {self.description}" if self.description else f"TOOL `{self.name}`"]
        if self.usage:
            lines.append(f"  use when: {self.usage}")
        if not self.fields:
            lines.append("  fields: (none)")
        for f in self.fields:
            req = "required" if f.required else "optional"
            desc = f" - {f.description}" if f.description else ""
            lines.append(f"  - {f.name} ({f.type}, {req}){desc}")
        return "\n".join(lines)


TOOL_FORMAT_NOTE = (
    "To use a tool, reply with exactly one block of the form\n"
    'FUNC: {"name": "<tool name>", "to": "", "arguments": {...}}'
)

UNKNOWN_TOOL = "There is no tool named `{name}`. Available tools: {available}. Use one of these, or reply in plain text."
MALFORMED_TOOL = "Your tool call could not be read ({error}). Send exactly one well-formed FUNC block."
INVALID_ARGUMENTS = "The arguments to `{name}` are invalid: {problems}. Fix them and call `{name}` again."
HANDLER_FAILED = "The tool `{name}` failed: {error}. Correct the request and try again."


class ScriptedUser:
    """User input from a fixed list; closed once the list runs out."""

    def __init__(self, lines: Iterable[str]) -> None:
        self._lines: Iterator[str] = iter(list(lines))

    def __call__(self, prompt: str) -> str | None:
        return next(self._lines, None)


def console_user(prompt: str) -> str | None:
    try:
        return input(f"{prompt}\n> ")
    except EOFError:
        return None


class Agent:
    """Wraps a backend, a tool registry and a chat history.

    ``user_source`` is a callable taking the pending text and returning the
    user's reply (None or "" means no reply); leave it unset for headless runs.
    ``fallback`` may answer LLM messages that carry no tool call.
    """

    def __init__(
        self,
        name: str,
        system_prompt: str,
        backend: Backend | None,
        tools: Iterable[ToolSpec] = (),
        *,
        user_source: Callable[[str], str | None] | None = None,
        fallback: Callable[["Agent", Message], HandlerResult] | None = None,
        max_history: int | None = None,
        sampling: Sampling | None = None,
    ) -> None:
        self.name = name
        self.system_prompt = system_prompt
        self.backend = backend
        self.tools: dict[str, ToolSpec] = {}
        self.user_source = user_source
        self.fallback = fallback
        self.max_history = max_history
        self.sampling = sampling or Sampling()
        self.history: list[Message] = []
        self.state: dict[str, Any] = {}
        for spec in tools:
            self.register_tool(spec)

    def register_tool(self, spec: ToolSpec) -> None:
        if spec.name in self.tools:
            raise DuplicateTool(f"tool `{spec.name}` is already registered on {self.name}")
        self.tools[spec.name] = spec

    def system_message(self) -> str:
        if not self.tools:
            return self.system_prompt
        blocks = "\n\n".join(self.tools[n].render() for n in sorted(self.tools))
        return f"{self.system_prompt}\n\nTOOLS:\n{blocks}\n\n{TOOL_FORMAT_NOTE}"

    # ------------------------------------------------------------ responders

    def llm_respond(self, incoming: Message) -> Message | None:
        if self.backend is None:
            return None
        turns = [(_role(m), m.content) for m in self.history]
        turns.append((_role(incoming), incoming.content))
        if self.max_history is not None:
            turns = turns[-self.max_history :]
        request = BackendRequest(
            system_prompt=self.system_message(),
            turns=tuple(turns),
            tool_schemas=tuple(self.tools[n].json_schema() for n in sorted(self.tools)),
            sampling=self.sampling,
        )
        text = self.backend.complete(request)
        if text is None or not text.strip():
            return None
        reply = Message.build(EntityKind.LLM, text, parse_tools=True)
        self.history.append(incoming)
        self.history.append(reply)
        return reply

    def agent_respond(self, incoming: Message) -> Message | None:
        if incoming.tool_error:
            return self._agent_msg(MALFORMED_TOOL.format(error=incoming.tool_error))
        call = incoming.tool_call
        if call is None:
            if self.fallback is not None and incoming.sender is EntityKind.LLM:
                return self._coerce(self.fallback(self, incoming))
            return None
        spec = self.tools.get(call.name)
        if spec is None:
            available = ", ".join(f"`{n}`" for n in sorted(self.tools)) or "(none)"
            return self._agent_msg(UNKNOWN_TOOL.format(name=call.name, available=available))
        problems = spec.validate(call)
        if problems:
            return self._agent_msg(INVALID_ARGUMENTS.format(name=call.name, problems="; ".join(problems)))
        try:
            result = spec.handler(self, call)
        except Exception as exc:  # handler bugs and data errors go back to the LLM
            logger.info("tool %s on %s raised %r", call.name, self.name, exc)
            return self._agent_msg(HANDLER_FAILED.format(name=call.name, error=exc))
        return self._coerce(result)

    def user_respond(self, incoming: Message) -> Message | None:
        if self.user_source is None:
            return None
        text = self.user_source(incoming.content)
        if not text:
            return None
        return Message.build(EntityKind.USER, text)

    # ------------------------------------------------------------ helpers

    def _agent_msg(self, text: str, recipient: str | None = None) -> Message:
        return Message.build(EntityKind.AGENT, text, recipient=recipient)

    def _coerce(self, result: HandlerResult) -> Message | None:
        if result is None:
            return None
        if isinstance(result, str):
            return self._agent_msg(result) if result else None
        return Message.build(EntityKind.AGENT, result.content, recipient=result.recipient)

    def clone(self, backend: Backend | None = None) -> Agent:
        """A fresh copy with the same configuration and an empty history."""
        twin = Agent(
            self.name,
            self.system_prompt,
            backend if backend is not None else self.backend,
            self.tools.values(),
            user_source=self.user_source,
            fallback=self.fallback,
            max_history=self.max_history,
            sampling=self.sampling,
        )
        return twin


def _role(msg: Message) -> str:
    return "assistant" if msg.sender is EntityKind.LLM else "user"


__all__ = [
    "Agent",
    "DuplicateTool",
    "ScriptedUser",
    "ToolField",
    "ToolSpec",
    "console_user",
]
