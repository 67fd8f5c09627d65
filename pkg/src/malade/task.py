"""Tasks drive an agent's responders step by step; sub-tasks become extra responders."""

from __future__ import annotations

import itertools
import logging
from typing import Iterable

from .agent import Agent, ToolField, ToolSpec
from .messages import EntityKind, Message, ToolCall, strip_control_markers
from .transcript import Transcript

logger = logging.getLogger(__name__)

NATIVE = ("agent", "llm", "user")
DEFAULT_MAX_STEPS = 64
DEFAULT_CRITIC_ROUNDS = 5

ACCEPTED = "Your reasoning is valid, no feedback was provided."
REJECTED = "Feedback: {critique}\n\nIf any flaws in the reasoning used to produce your answer were identified, you must try again."


class StepLimitExceeded(RuntimeError):
    pass


class CycleDetected(ValueError):
    pass


class Task:
    """Runs one agent until DONE, an in-charge null reply, quiescence or the step cap.

    Responders are tried in the order ``agent, llm, user`` followed by
    sub-tasks in the order they were added.
    """

    def __init__(
        self,
        agent: Agent,
        name: str | None = None,
        *,
        in_charge: str = "llm",
        max_steps: int = DEFAULT_MAX_STEPS,
        transcript: Transcript | None = None,
    ) -> None:
        if max_steps < 1:
            raise ValueError("max_steps must be positive")
        self.agent = agent
        self.name = name or agent.name
        if self.name in NATIVE:
            raise ValueError(f"task name {self.name!r} clashes with a native responder")
        self.in_charge = in_charge
        self.max_steps = max_steps
        self.transcript = transcript
        self.sub_tasks: list[Task] = []
        self.parent: Task | None = None
        self._runs = itertools.count()

    @property
    def responders(self) -> list[str]:
        return list(NATIVE) + [t.name for t in self.sub_tasks]

    def add_sub_tasks(self, subs: Iterable[Task]) -> Task:
        for sub in subs:
            if sub is self or self in sub.descendants():
                raise CycleDetected(f"adding {sub.name} under {self.name} creates a delegation cycle")
            if sub.name in self.responders:
                raise ValueError(f"{self.name} already has a responder named {sub.name!r}")
            self.sub_tasks.append(sub)
            sub.parent = self
        return self

    def descendants(self) -> list[Task]:
        out = []
        for sub in self.sub_tasks:
            out.append(sub)
            out.extend(sub.descendants())
        return out

    # ------------------------------------------------------------ running

    def run(self, text: str, *, transcript: Transcript | None = None) -> str:
        result = self.run_message(text, transcript=transcript)
        if result is None:
            return ""
        return strip_control_markers(result.content, no_answer=False)

    def run_message(
        self,
        incoming: str | Message,
        *,
        caller: Task | None = None,
        depth: int = 0,
        transcript: Transcript | None = None,
    ) -> Message | None:
        """Run to completion; return the final pending message, or None if nobody responded."""
        log = transcript if transcript is not None else self.transcript if self.transcript is not None else Transcript()
        self.last_transcript = log
        run = f"{self.name}#{next(self._runs)}"
        self.last_run = run
        if isinstance(incoming, str):
            incoming = Message.build(EntityKind.USER, incoming)
        elif incoming.sender is not EntityKind.USER:
            incoming = Message.build(EntityKind.USER, incoming.content)
        log.emit("run_start", run=run, task=self.name, depth=depth, in_charge=self.in_charge, responders=self.responders)
        log.emit("input", run=run, task=self.name, content=incoming.content)

        cpm = incoming
        last: str | None = None
        produced = False
        steps = 0
        while True:
            if steps >= self.max_steps:
                log.emit("run_end", run=run, task=self.name, reason="limit")
                raise StepLimitExceeded(f"{self.name} hit the step cap of {self.max_steps}")
            steps += 1
            eligible = self.responders
            if cpm.recipient:
                if cpm.recipient in eligible:
                    eligible = [cpm.recipient]
                else:
                    logger.warning("%s: ignoring unknown recipient %r", self.name, cpm.recipient)
            responded = False
            for who in eligible:
                if who == last:
                    continue
                reply = self._respond(who, cpm, log, depth)
                if reply is None:
                    if who == self.in_charge:
                        log.emit("null", run=run, task=self.name, responder=who)
                        log.emit("run_end", run=run, task=self.name, reason="null_in_charge")
                        return cpm if produced else None
                    continue
                log.message(run=run, task=self.name, step=steps, responder=who, msg=reply)
                cpm, last, produced, responded = reply, who, True, True
                break
            if not responded:
                log.emit("run_end", run=run, task=self.name, reason="quiescent")
                return cpm if produced else None
            if cpm.done:
                log.emit("run_end", run=run, task=self.name, reason="done")
                return cpm

    def _respond(self, who: str, cpm: Message, log: Transcript, depth: int) -> Message | None:
        if who == "agent":
            return self.agent.agent_respond(cpm)
        if who == "llm":
            return self.agent.llm_respond(cpm)
        if who == "user":
            return self.agent.user_respond(cpm)
        sub = next(t for t in self.sub_tasks if t.name == who)
        return sub.respond_as_subtask(cpm, caller=self, transcript=log, depth=depth + 1)

    def respond_as_subtask(self, cpm: Message, *, caller: Task, transcript: Transcript, depth: int) -> Message | None:
        result = self.run_message(cpm.content, caller=caller, depth=depth, transcript=transcript)
        if result is None:
            return None
        content = strip_control_markers(result.content, no_answer=False)
        if not content:
            return None
        return Message.build(EntityKind.SUBTASK, content, subtask=self.name)


class CriticTask(Task):
    """A sub-task that reviews ``final_answer`` summaries.

    An empty critique is acceptance. After ``max_rounds`` rejections the
    answer is accepted anyway and a ``forced_accept`` record is written.
    ``max_rounds=None`` never forces acceptance.
    """

    def __init__(self, agent: Agent, name: str | None = None, *, max_rounds: int | None = DEFAULT_CRITIC_ROUNDS, **kw) -> None:
        super().__init__(agent, name, **kw)
        if max_rounds is not None and max_rounds < 1:
            raise ValueError("max_rounds must be positive")
        self.max_rounds = max_rounds
        self.rounds = 0
        self.accepted = False
        self.forced = False

    def respond_as_subtask(self, cpm: Message, *, caller: Task, transcript: Transcript, depth: int) -> Message | None:
        self.agent.state["last_critique"] = None
        result = super().respond_as_subtask(cpm, caller=caller, transcript=transcript, depth=depth)
        critique = self.agent.state.get("last_critique")
        if critique is None:
            if result is None:
                return None
            # The critic answered in prose instead of using the feedback tool.
            critique = result.content
        self.rounds += 1
        if critique.strip():
            if self.max_rounds is None or self.rounds < self.max_rounds:
                return _subtask_msg(self.name, REJECTED.format(critique=critique.strip()))
            self.forced = True
            transcript.emit("forced_accept", run=self.last_run, task=self.name, rounds=self.rounds)
        self.accepted = True
        caller.agent.state["accepted"] = True
        return _subtask_msg(self.name, ACCEPTED)


def _subtask_msg(name: str, text: str) -> Message:
    return Message.build(EntityKind.SUBTASK, text, subtask=name)


# ---------------------------------------------------------------- critic tools


def render_final_answer(question: str, steps: list[str], answer: str) -> str:
    reasoning = "\n".join(f"{i}. {s}" for i, s in enumerate(steps, start=1))
    return f"Question: {question}\n-----\nReasoning:\n{reasoning}\n-----\nFinal answer: {answer}"


def final_answer_tool(critic: str | None) -> ToolSpec:
    """``final_answer`` forwards a structured summary to the critic sub-task.

    With ``critic=None`` (critics ablated) the answer is accepted at once.
    """

    def handle(agent: Agent, call: ToolCall) -> Message | str:
        args = call.arguments
        agent.state["final_answer"] = dict(args)
        if critic is None:
            agent.state["accepted"] = True
            return ACCEPTED
        text = render_final_answer(args["question"], args["steps"], args["answer"])
        return Message.build(EntityKind.AGENT, text, recipient=critic)

    return ToolSpec(
        name="final_answer",
        fields=(
            ToolField("question", "string", description="the question being answered, with its requirements"),
            ToolField("steps", "list[string]", description="reasoning steps, in order"),
            ToolField("answer", "string", description="the final answer"),
        ),
        handler=handle,
        description="present your answer and reasoning for review",
    )


def feedback_tool() -> ToolSpec:
    """``feedback`` ends the critic's turn; an empty critique means the answer is accepted."""

    def handle(agent: Agent, call: ToolCall) -> str:
        critique = str(call.arguments.get("critique", ""))
        agent.state["last_critique"] = critique
        if not critique.strip():
            return "{DONE} " + ACCEPTED
        return "{DONE} " + REJECTED.format(critique=critique)

    return ToolSpec(
        name="feedback",
        fields=(ToolField("critique", "string", description="flaws found; leave empty if the reasoning is sound"),),
        handler=handle,
        description="give feedback on the reasoning you were shown",
    )


def critique_loop(primary: Task, critic: CriticTask, question: str, max_rounds: int | None = DEFAULT_CRITIC_ROUNDS) -> Message | None:
    """Run ``primary`` on ``question`` with ``critic`` reviewing each ``final_answer``."""
    critic.max_rounds = max_rounds
    if critic not in primary.sub_tasks:
        primary.add_sub_tasks([critic])
    if "final_answer" not in primary.agent.tools:
        primary.agent.register_tool(final_answer_tool(critic.name))
    if "feedback" not in critic.agent.tools:
        critic.agent.register_tool(feedback_tool())
    return primary.run_message(question)
