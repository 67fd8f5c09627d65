"""Line-delimited JSON transcripts of task runs, plus replay and rule checks."""

from __future__ import annotations

import json
import threading
from collections import defaultdict
from pathlib import Path
from typing import Any, Callable, Iterable

from .messages import Message, render_tool_call


class TranscriptError(ValueError):
    pass


class Transcript:
    """Ordered, thread-safe record sink.

    ``clock`` supplies the ``ts`` field. Without one, ``ts`` is the record's
    sequence number, which keeps scripted runs byte-identical.
    """

    def __init__(self, clock: Callable[[], float] | None = None) -> None:
        self.records: list[dict[str, Any]] = []
        self._clock = clock
        self._lock = threading.Lock()

    def emit(self, kind: str, **fields: Any) -> dict[str, Any]:
        with self._lock:
            seq = len(self.records)
            record = {"seq": seq, "ts": self._clock() if self._clock else seq, "kind": kind}
            record.update(fields)
            self.records.append(record)
            return record

    def message(self, *, run: str, task: str, step: int, responder: str, msg: Message, **extra: Any) -> None:
        self.emit(
            "message",
            run=run,
            task=task,
            step=step,
            responder=responder,
            sender=msg.sender.value,
            subtask=msg.subtask,
            content=msg.content,
            tool_call=render_tool_call(msg.tool_call) if msg.tool_call else None,
            recipient=msg.recipient,
            control=sorted(c.value for c in msg.control),
            **extra,
        )

    def extend(self, other: Transcript, prefix: str = "") -> None:
        """Append another transcript's records, renumbering ``seq``.

        ``prefix`` is prepended to run ids so runs from different sources stay distinct.
        """
        for record in other.records:
            fields = {k: v for k, v in record.items() if k not in ("seq", "ts", "kind")}
            if prefix and "run" in fields:
                fields["run"] = prefix + fields["run"]
            self.emit(record["kind"], **fields)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            lines = [json.dumps(r, ensure_ascii=False) for r in self.records]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path

    def __len__(self) -> int:
        return len(self.records)


def read_transcript(path: str | Path) -> list[dict[str, Any]]:
    text = Path(path).read_text(encoding="utf-8")
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TranscriptError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(record, dict) or "kind" not in record:
            raise TranscriptError(f"{path}:{lineno}: record has no `kind`")
        records.append(record)
    if not records:
        raise TranscriptError(f"{path}: empty transcript")
    return records


def render_dialog(records: Iterable[dict[str, Any]]) -> str:
    depth: dict[str, int] = {}
    out = []
    for r in records:
        kind = r["kind"]
        run = r.get("run", "")
        pad = "  " * depth.get(run, 0)
        if kind == "run_start":
            depth[run] = r.get("depth", 0)
            pad = "  " * depth[run]
            out.append(f"{pad}=== {run} start (in charge: {r.get('in_charge')}) ===")
        elif kind == "input":
            out.append(f"{pad}>>> {run} input:\n{_indent(r.get('content', ''), pad + '    ')}")
        elif kind == "message":
            who = r["responder"]
            body = r.get("tool_call") or r.get("content", "")
            if r.get("tool_call") and r.get("sender") == "LLM":
                body = r.get("content", "")
            head = f"{pad}[{r['task']}:{who}] {r.get('sender')}"
            if r.get("recipient"):
                head += f" -> {r['recipient']}"
            out.append(f"{head}:\n{_indent(body, pad + '    ')}")
        elif kind == "null":
            out.append(f"{pad}[{r['task']}:{r['responder']}] (no response)")
        elif kind == "forced_accept":
            out.append(f"{pad}!!! {r['task']}: critic rejected {r.get('rounds')} rounds; answer accepted (forced)")
        elif kind == "run_end":
            out.append(f"{pad}=== {run} end ({r.get('reason')}) ===")
        else:
            out.append(f"{pad}{kind}: {json.dumps({k: v for k, v in r.items() if k not in ('seq', 'ts', 'kind')})}")
    return "\n".join(out)


def _indent(text: str, pad: str) -> str:
    return "\n".join(pad + line for line in str(text).splitlines()) or pad


def verify_transcript(records: list[dict[str, Any]]) -> list[str]:
    """Check every run in the trace against the step rules.

    Returns human-readable violations; an empty list means the trace conforms.
    """
    runs: dict[str, list[dict[str, Any]]] = defaultdict(list)
    order: list[str] = []
    for r in records:
        run = r.get("run")
        if run is None:
            continue
        if run not in runs:
            order.append(run)
        runs[run].append(r)

    problems = []
    for run in order:
        rs = runs[run]
        start = next((r for r in rs if r["kind"] == "run_start"), None)
        responders = set(start.get("responders", [])) if start else set()
        in_charge = start.get("in_charge") if start else None
        msgs = [r for r in rs if r["kind"] in ("message", "null", "run_end")]
        prev = None
        for i, r in enumerate(msgs):
            nxt = msgs[i + 1] if i + 1 < len(msgs) else None
            if r["kind"] == "message":
                if prev is not None and prev["responder"] == r["responder"]:
                    problems.append(
                        f"rule (a): {run} seq {r['seq']}: responder {r['responder']!r} responded in consecutive steps"
                    )
                if "DONE" in r.get("control", []):
                    if nxt is None or nxt["kind"] != "run_end" or nxt.get("reason") != "done":
                        problems.append(f"rule (b): {run} seq {r['seq']}: DONE response did not end the run")
                recipient = r.get("recipient")
                if recipient and recipient in responders and nxt is not None and nxt["kind"] == "message":
                    if nxt["responder"] != recipient:
                        problems.append(
                            f"rule (d): {run} seq {nxt['seq']}: {nxt['responder']!r} responded "
                            f"but message was addressed to {recipient!r}"
                        )
                prev = r
            elif r["kind"] == "null":
                if in_charge is not None and r["responder"] != in_charge:
                    problems.append(f"rule (c): {run} seq {r['seq']}: null response logged for non-charge responder")
                if nxt is None or nxt["kind"] != "run_end" or nxt.get("reason") != "null_in_charge":
                    problems.append(f"rule (c): {run} seq {r['seq']}: in-charge null response did not end the run")
            elif r["kind"] == "run_end":
                if nxt is not None:
                    problems.append(f"{run} seq {nxt['seq']}: record after run end")
                if r.get("reason") == "done" and (prev is None or "DONE" not in prev.get("control", [])):
                    problems.append(f"rule (b): {run} seq {r['seq']}: run ended as done without a DONE response")
    return problems
