"""Message, tool-call and control-marker vocabulary shared by agents and tasks."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Any

TOOL_PREFIX = "FUNC:"

DONE = "DONE"
NO_ANSWER = "NO_ANSWER"

_TOOL_BLOCK = re.compile(r"(?m)(?<![A-Za-z0-9_])FUNC:")


def _marker_pattern(token: str) -> re.Pattern[str]:
    # `{TOKEN}`, `<TOKEN>` or the bare word; never inside a longer identifier.
    word = rf"(?<![A-Za-z0-9_]){token}(?![A-Za-z0-9_])"
    return re.compile(rf"\{{{token}\}}|<{token}>|{word}")


_DONE_RE = _marker_pattern(DONE)
_NO_ANSWER_RE = _marker_pattern(NO_ANSWER)


class MalformedTool(ValueError):
    """A structured tool block is present but cannot be used."""


class EntityKind(str, enum.Enum):
    LLM = "LLM"
    USER = "USER"
    AGENT = "AGENT"
    SUBTASK = "SUBTASK"


class Control(str, enum.Enum):
    DONE = DONE
    NO_ANSWER = NO_ANSWER


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)
    recipient_hint: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name.strip():
            raise MalformedTool("tool call has no `name`")
        if not isinstance(self.arguments, dict):
            raise MalformedTool("tool `arguments` must be an object")
        object.__setattr__(self, "arguments", dict(self.arguments))


@dataclass(frozen=True)
class Message:
    """One whole conversational turn.

    ``subtask`` names the task that produced the message when ``sender`` is
    ``SUBTASK``. ``tool_error`` holds the parse failure when the text carried
    a broken tool block, so the agent can send back a correction.
    """

    sender: EntityKind
    content: str
    tool_call: ToolCall | None = None
    recipient: str | None = None
    control: frozenset[Control] = frozenset()
    subtask: str | None = None
    tool_error: str | None = None

    @classmethod
    def build(
        cls,
        sender: EntityKind,
        content: str,
        *,
        parse_tools: bool = False,
        recipient: str | None = None,
        subtask: str | None = None,
    ) -> Message:
        """Make a message, deriving control markers (and optionally the tool call) from content."""
        tool_call = None
        tool_error = None
        if parse_tools:
            try:
                tool_call = parse_tool_call(content)
            except MalformedTool as exc:
                tool_error = str(exc)
        if recipient is None and tool_call is not None and tool_call.recipient_hint:
            recipient = tool_call.recipient_hint
        # Markers inside a tool block's arguments are data, not control.
        prose = content[: _TOOL_BLOCK.search(content).start()] if tool_call is not None else content
        return cls(
            sender=sender,
            content=content,
            tool_call=tool_call,
            recipient=recipient,
            control=control_set(prose),
            subtask=subtask,
            tool_error=tool_error,
        )

    @property
    def done(self) -> bool:
        return Control.DONE in self.control

    @property
    def no_answer(self) -> bool:
        return Control.NO_ANSWER in self.control


def scan_control_markers(text: str) -> dict[str, bool]:
    return {
        "done": bool(_DONE_RE.search(text)),
        "no_answer": bool(_NO_ANSWER_RE.search(text)),
    }


def control_set(text: str) -> frozenset[Control]:
    found = scan_control_markers(text)
    out = set()
    if found["done"]:
        out.add(Control.DONE)
    if found["no_answer"]:
        out.add(Control.NO_ANSWER)
    return frozenset(out)


def strip_control_markers(text: str, *, done: bool = True, no_answer: bool = True) -> str:
    if done:
        text = _DONE_RE.sub("", text)
    if no_answer:
        text = _NO_ANSWER_RE.sub("", text)
    lines = [line.rstrip() for line in text.strip().splitlines()]
    return "\n".join(lines).strip()


def _unique_keys(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise MalformedTool(f"duplicate key `{key}` in FUNC block")
        out[key] = value
    return out


def render_tool_call(call: ToolCall) -> str:
    body = {"name": call.name, "to": call.recipient_hint, "arguments": call.arguments}
    return f"{TOOL_PREFIX} " + json.dumps(body, indent=2, ensure_ascii=False)


def parse_tool_call(text: str) -> ToolCall | None:
    """Parse the single ``FUNC: {...}`` block in ``text``.

    Returns None when no block is present. Raises MalformedTool when a block
    is present but is not valid JSON, lacks a name, or appears more than once.
    """
    first = _TOOL_BLOCK.search(text)
    if first is None:
        return None
    start = first.end()
    while start < len(text) and text[start].isspace():
        start += 1
    if not text.startswith("{", start):
        raise MalformedTool("FUNC must be followed by a JSON object")
    try:
        obj, end = json.JSONDecoder(object_pairs_hook=_unique_keys).raw_decode(text, start)
    except json.JSONDecodeError as exc:
        raise MalformedTool(f"invalid JSON in FUNC block: {exc.msg}") from None
    if _TOOL_BLOCK.search(text, end):
        raise MalformedTool("more than one FUNC block in a single message")
    if not isinstance(obj, dict):
        raise MalformedTool("FUNC block is not a JSON object")
    name = obj.get("name")
    if not isinstance(name, str) or not name.strip():
        raise MalformedTool("tool call has no `name`")
    arguments = obj.get("arguments", {})
    if arguments is None:
        arguments = {}
    to = obj.get("to") or ""
    if not isinstance(to, str):
        raise MalformedTool("`to` must be a string")
    return ToolCall(name=name, arguments=arguments, recipient_hint=to)
