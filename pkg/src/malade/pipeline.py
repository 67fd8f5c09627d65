"""The three-stage drug-category/outcome labelling pipeline.

Step 1 picks representative drugs for a category, step 2 asks a DrugAgent
(backed by an FDAHandler sub-task) about each drug and outcome, and step 3
has a CategoryAgent turn those reports into a structured label. Each primary
agent is paired with a critic unless critics are ablated.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from . import prompts
from .agent import Agent, ToolField, ToolSpec
from .drugdata import LabelClient, NdcDirectory, NotFound, PrescriptionRates, normalize_name, truncate_extract
from .llm import Backend
from .messages import NO_ANSWER, EntityKind, Message, ToolCall, strip_control_markers
from .rag import DocumentStore, RetrievalQuery, augment_prompt
from .scoring import CategoryEffect, effect_problems
from .task import DEFAULT_CRITIC_ROUNDS, DEFAULT_MAX_STEPS, CriticTask, Task, feedback_tool, final_answer_tool
from .transcript import Transcript

logger = logging.getLogger(__name__)

BackendFactory = Callable[[str, int], Backend]

RISK_ORDER = {"decrease": 0, "no-effect": 1, "increase": 2}
CRITIC = "Critic"
FDA = "FDAHandler"


class PipelineError(RuntimeError):
    pass


class EmptyCategory(PipelineError):
    pass


class ValidationError(PipelineError):
    pass


@dataclass(frozen=True)
class CategorySpec:
    """A drug category: ``name`` keys the grid, ``display`` is used in prompts."""

    name: str
    search_terms: tuple[str, ...]
    display: str = ""
    subcategories: tuple[CategorySpec, ...] = ()

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("category name is empty")
        if not self.display:
            object.__setattr__(self, "display", self.name)
        if not self.subcategories and not self.search_terms:
            raise ValueError(f"category {self.name!r} needs search terms or subcategories")

    def units(self) -> tuple[CategorySpec, ...]:
        """The categories actually searched: the subcategories if any, else itself."""
        return self.subcategories or (self,)


@dataclass(frozen=True)
class CategoryQuery:
    category: CategorySpec
    outcome: str
    n: int = 3

    def __post_init__(self) -> None:
        if not self.outcome.strip():
            raise ValueError("outcome is empty")
        if self.n < 1:
            raise ValueError("representatives_n must be positive")


@dataclass(frozen=True)
class DrugReport:
    drug: str
    outcome: str
    text: str
    no_answer: bool


@dataclass(frozen=True)
class Ablation:
    critics: bool = True
    rag: bool = True


@dataclass(frozen=True)
class Caps:
    max_steps: int = DEFAULT_MAX_STEPS
    critic_rounds: int | None = DEFAULT_CRITIC_ROUNDS
    parallelism: int = 4
    representatives: int = 3


@dataclass
class Resources:
    ndc: NdcDirectory
    rates: PrescriptionRates
    labels: LabelClient
    store: DocumentStore


def drug_question(drug: str, outcome: str) -> str:
    return f"Does {drug.upper()} increase or decrease the risk of {outcome}?"


def category_question(display: str, outcome: str) -> str:
    return f"Does the {display} category of drugs increase the risk of {outcome}, decrease it, or is there no clear effect?"


def render_passages(question: str, reports: Sequence[DrugReport]) -> str:
    lines = []
    for i, r in enumerate(reports, start=1):
        text = f"{{{NO_ANSWER}}} {r.text}" if r.no_answer else r.text
        lines.append(f"{i}. Drug {r.drug.upper()}: {text}")
    return "Passages:\n" + "\n".join(lines) + "\n---------\n" + question


def merge_subcategories(effects: Sequence[CategoryEffect]) -> CategoryEffect:
    """Highest risk wins (increase > no-effect > decrease); then higher confidence; then first listed."""
    if not effects:
        raise ValueError("nothing to merge")
    best = effects[0]
    for e in effects[1:]:
        if (RISK_ORDER[e.label], e.confidence) > (RISK_ORDER[best.label], best.confidence):
            best = e
    return best


_EXTRACT = re.compile(r"(?ms)^(\s*EXTRACT_START_END:)(.*?)(?=^\s*[A-Z_]+:|\Z)")


def normalize_fda_answer(text: str) -> str:
    """Trim EXTRACT_START_END to its first and last three words."""

    def cut(m: re.Match[str]) -> str:
        body = m.group(2)
        if "..." in body or "…" in body:
            return m.group(0)
        return f"{m.group(1)} {truncate_extract(body)}\n"

    return _EXTRACT.sub(cut, text).rstrip()


class FDAHandlerTask(Task):
    """FDAHandler as a sub-task: normalises answers and remembers whether each one was NO_ANSWER."""

    def __init__(self, agent: Agent, **kw: Any) -> None:
        super().__init__(agent, FDA, **kw)
        self.replies: list[bool] = []

    def respond_as_subtask(self, cpm, *, caller, transcript, depth):
        result = self.run_message(cpm.content, caller=caller, depth=depth, transcript=transcript)
        text = normalize_fda_answer(strip_control_markers(result.content, no_answer=False)) if result else ""
        if not text:
            text = "{" + NO_ANSWER + "}"
        msg = Message.build(EntityKind.SUBTASK, text, subtask=self.name)
        self.replies.append(msg.no_answer)
        return msg


@dataclass
class CellOutcome:
    effect: CategoryEffect | None
    critic_rounds: int = 0
    forced: bool = False
    error: str | None = None


@dataclass
class MatrixResult:
    records: list[dict[str, Any]]
    representatives: dict[str, list[str]]
    reports: dict[tuple[str, str], DrugReport]
    failed: int = 0
    transcripts: dict[str, Transcript] = field(default_factory=dict)


class Pipeline:
    def __init__(
        self,
        backends: BackendFactory,
        resources: Resources,
        *,
        ablation: Ablation = Ablation(),
        caps: Caps = Caps(),
        trial: int = 0,
    ) -> None:
        self.backends = backends
        self.res = resources
        self.ablation = ablation
        self.caps = caps
        self.trial = trial

    # ------------------------------------------------------------ plumbing

    def _backend(self, role: str) -> Backend:
        return self.backends(role, self.trial)

    def _task(self, agent: Agent, name: str | None = None) -> Task:
        return Task(agent, name, max_steps=self.caps.max_steps)

    def _with_critic(self, task: Task, role: str, prompt: str) -> CriticTask | None:
        """Attach a critic sub-task and the ``final_answer`` tool."""
        if not self.ablation.critics:
            task.agent.register_tool(final_answer_tool(None))
            return None
        critic = CriticTask(
            Agent(role, prompt, self._backend(role), [feedback_tool()]),
            CRITIC,
            max_rounds=self.caps.critic_rounds,
            max_steps=self.caps.max_steps,
        )
        task.add_sub_tasks([critic])
        task.agent.register_tool(final_answer_tool(CRITIC))
        return critic

    # ------------------------------------------------------------ step 1

    def find_representatives(self, cat: CategorySpec, n: int = 3, transcript: Transcript | None = None) -> list[str]:
        candidates = self.res.ndc.find_category_drugs(cat.search_terms)
        if not candidates:
            raise EmptyCategory(f"no NDC drugs match category {cat.name!r}")
        names = [c.name for c in candidates]
        canonical = {normalize_name(n): n for n in names}
        rates = self.res.rates.rates(names)

        agent = Agent("DrugFinder", prompts.fill(prompts.DRUG_FINDER, cat=cat.display, N=n), self._backend("DrugFinder"))
        agent.register_tool(self._submit_answer_tool(canonical, n))
        task = self._task(agent)
        self._with_critic(task, "DrugFinderCritic", prompts.fill(prompts.DRUG_FINDER_CRITIC, cat=cat.display))

        rate_lines = "\n".join(
            f"{normalize_name(r.name)}: {r.rate:.4f} ({r.count} prescriptions)"
            for r in sorted(rates, key=lambda r: (-r.count, normalize_name(r.name)))
        )
        seed = (
            f"Drug category: {cat.display}\n"
            f"Find up to {n} representative drugs.\n\n"
            "Candidate drugs:\n" + "\n".join(f"- {n}" for n in names) + "\n\n"
            "Prescription rates (database query):\n" + rate_lines
        )
        task.run_message(seed, transcript=transcript)
        if "validation_error" in agent.state:
            raise ValidationError(agent.state["validation_error"])
        reps = agent.state.get("representatives")
        if reps is None:
            raise ValidationError(f"DrugFinder for {cat.name!r} never submitted an answer")
        return reps

    def _submit_answer_tool(self, canonical: dict[str, str], n: int) -> ToolSpec:
        def handle(agent: Agent, call: ToolCall) -> str:
            if not agent.state.get("accepted"):
                return "Use `final_answer` and wait for the critic to accept it before calling `submit_answer`."
            drugs = call.arguments["drugs"]
            problems = []
            seen: set[str] = set()
            for d in drugs:
                key = normalize_name(d)
                if key not in canonical:
                    problems.append(f"{d!r} is not one of the provided drugs")
                elif key in seen:
                    problems.append(f"{d!r} is listed twice")
                seen.add(key)
            if not drugs:
                problems.append("the list is empty")
            if len(drugs) > n:
                problems.append(f"{len(drugs)} drugs given but at most {n} are allowed")
            if problems:
                agent.state["repairs"] = agent.state.get("repairs", 0) + 1
                if agent.state["repairs"] > 1:
                    agent.state["validation_error"] = "invalid representatives: " + "; ".join(problems)
                    return "{DONE} " + agent.state["validation_error"]
                return "Your answer is invalid: " + "; ".join(problems) + ". Call `submit_answer` again with corrected names."
            agent.state["representatives"] = [canonical[normalize_name(d)] for d in drugs]
            return "{DONE} " + json.dumps(agent.state["representatives"])

        return ToolSpec(
            "submit_answer",
            (ToolField("drugs", "list[string]", description="the selected representative drug names"),),
            handle,
            description="submit the accepted list of representative drugs",
        )

    # ------------------------------------------------------------ step 2

    def ensure_label(self, drug: str) -> bool:
        """Make sure the store holds ``drug``'s label; False when no label exists."""
        if self.res.store.has_drug(drug):
            return True
        try:
            label = self.res.labels.fetch_label(drug)
        except NotFound:
            logger.info("no label for %s", drug)
            return False
        self.res.store.ingest(drug, label.sections)
        return True

    def _fda_tools(self) -> list[ToolSpec]:
        store = self.res.store

        def retrieve(query: str, drugs: list[str] | None) -> list:
            return [c for c, _ in store.retrieve(RetrievalQuery(query, filter_drugs=drugs))]

        def relevant_extracts(agent: Agent, call: ToolCall) -> str:
            query = call.arguments["query"]
            drugs = call.arguments.get("filter_drugs") or None
            hits = retrieve(query, drugs)
            if not hits and drugs:
                for d in drugs:
                    self.ensure_label(d)
                hits = retrieve(query, drugs)
            if not hits and drugs:
                hits = retrieve(query, None)
            if not hits:
                return "{" + NO_ANSWER + "}"
            return augment_prompt(query, hits)

        def relevant_search_extracts(agent: Agent, call: ToolCall) -> str:
            drug = call.arguments["drug"]
            if not self.ensure_label(drug):
                return "{" + NO_ANSWER + "}"
            hits = retrieve(call.arguments["query"], [drug])
            return augment_prompt(call.arguments["query"], hits) if hits else "{" + NO_ANSWER + "}"

        def drug_category_search(agent: Agent, call: ToolCall) -> str:
            found = self.res.ndc.find_category_drugs([call.arguments["category"]])
            if not found:
                return "{" + NO_ANSWER + "}"
            return "Drugs in the category:\n" + "\n".join(f"- {r.name}" for r in found)

        return [
            ToolSpec(
                "relevant_extracts",
                (
                    ToolField("query", "string", description="what to look for"),
                    ToolField("filter_drugs", "list[string]", required=False, description="only search these drugs' labels"),
                ),
                relevant_extracts,
                description="retrieve label passages from the document store",
            ),
            ToolSpec(
                "relevant_search_extracts",
                (ToolField("query", "string"), ToolField("drug", "string", description="drug whose label to fetch")),
                relevant_search_extracts,
                description="fetch a drug's label from the FDA and retrieve passages from it",
            ),
            ToolSpec(
                "drug_category_search",
                (ToolField("category", "string", description="pharmacologic class or name fragment"),),
                drug_category_search,
                description="list the drugs in a category",
            ),
        ]

    def fda_task(self) -> FDAHandlerTask:
        if self.ablation.rag:
            agent = Agent(FDA, prompts.FDA_HANDLER, self._backend("FDAHandler"), self._fda_tools())
        else:
            agent = Agent(FDA, prompts.FDA_HANDLER_NO_RAG, self._backend("FDAHandlerNoRAG"))
        return FDAHandlerTask(agent, max_steps=self.caps.max_steps)

    def fda_answer(self, question: str, drug: str | None = None, transcript: Transcript | None = None) -> Message:
        if drug and self.ablation.rag:
            self.ensure_label(drug)
        task = self.fda_task()
        result = task.run_message(question, transcript=transcript)
        text = normalize_fda_answer(strip_control_markers(result.content, no_answer=False)) if result else ""
        return Message.build(EntityKind.SUBTASK, text or "{" + NO_ANSWER + "}", subtask=FDA)

    def drug_effect_report(self, drug: str, outcome: str, transcript: Transcript | None = None) -> DrugReport:
        def recipient_message(agent: Agent, call: ToolCall) -> Message:
            target = call.arguments["intended_recipient"]
            if target != FDA:
                raise ValueError(f"intended_recipient must be `{FDA}`, not {target!r}")
            return Message.build(EntityKind.AGENT, call.arguments["content"], recipient=FDA)

        agent = Agent(
            "DrugAgent",
            prompts.DRUG_AGENT,
            self._backend("DrugAgent"),
            [
                ToolSpec(
                    "recipient_message",
                    (ToolField("intended_recipient", "string"), ToolField("content", "string")),
                    recipient_message,
                    description="send a question to another agent",
                )
            ],
        )
        task = self._task(agent)
        fda = self.fda_task()
        task.add_sub_tasks([fda])
        self._with_critic(task, "DrugAgentCritic", prompts.DRUG_AGENT_CRITIC)
        result = task.run_message(drug_question(drug, outcome), transcript=transcript)
        if result is None or result.sender is not EntityKind.LLM:
            raise PipelineError(f"DrugAgent gave no final answer for {drug}/{outcome}")
        no_answer = result.no_answer or (bool(fda.replies) and all(fda.replies))
        text = strip_control_markers(result.content)
        if no_answer and "FDAHandler" not in text:
            text = f"{prompts.NO_ANSWER_NOTE} {text}".strip()
        if not text:
            text = prompts.NO_ANSWER_NOTE
        return DrugReport(drug, outcome, text, no_answer)

    # ------------------------------------------------------------ step 3

    def categorize(self, q: CategoryQuery, reports: Sequence[DrugReport], transcript: Transcript | None = None) -> CellOutcome:
        if not reports:
            raise ValueError("categorize needs at least one report")
        all_no_answer = all(r.no_answer for r in reports)
        agent = Agent(
            "CategoryAgent",
            prompts.fill(prompts.CATEGORY_AGENT, condition=q.outcome, cat=q.category.display),
            self._backend("CategoryAgent"),
        )
        agent.register_tool(self._category_effect_tool(all_no_answer))
        task = self._task(agent)
        critic = self._with_critic(task, "CategoryAgentCritic", prompts.CATEGORY_AGENT_CRITIC)
        task.run_message(render_passages(category_question(q.category.display, q.outcome), reports), transcript=transcript)
        rounds = critic.rounds if critic else 0
        forced = critic.forced if critic else False
        if "validation_error" in agent.state:
            raise ValidationError(agent.state["validation_error"])
        effect = agent.state.get("effect")
        if effect is None:
            raise PipelineError(f"CategoryAgent never submitted a label for {q.category.name}/{q.outcome}")
        return CellOutcome(effect, rounds, forced)

    def _category_effect_tool(self, all_no_answer: bool) -> ToolSpec:
        def handle(agent: Agent, call: ToolCall) -> str:
            if not agent.state.get("accepted"):
                return "Use `final_answer` and wait for the critic to accept it before calling `category_effect_tool`."
            args = call.arguments
            problems = effect_problems(args)
            if all_no_answer and args.get("label") != "no-effect":
                problems.append("every drug report was NO_ANSWER, so `label` must be no-effect")
            if problems:
                agent.state["repairs"] = agent.state.get("repairs", 0) + 1
                if agent.state["repairs"] > 1:
                    agent.state["validation_error"] = "invalid category effect: " + "; ".join(problems)
                    return "{DONE} " + agent.state["validation_error"]
                return "Your answer is invalid: " + "; ".join(problems) + ". Call `category_effect_tool` again."
            effect = CategoryEffect(
                args["label"],
                float(args["confidence"]),
                float(args["probability"]),
                args["frequency"],
                args["evidence"],
                args.get("justification", ""),
            )
            agent.state["effect"] = effect
            return "{DONE} recorded: " + json.dumps(effect.to_json(), ensure_ascii=False)

        return ToolSpec(
            "category_effect_tool",
            (
                ToolField("label", "string", description='"increase", "decrease" or "no-effect"'),
                ToolField("confidence", "number", description="confidence in the label, 0 to 1"),
                ToolField("probability", "number", description="probability of the effect in a given patient, 0 to 1"),
                ToolField("frequency", "string", description='"none", "rare" or "common"'),
                ToolField("evidence", "string", description='"none", "weak" or "strong"'),
                ToolField("justification", "string"),
            ),
            handle,
            description="submit the accepted category label",
            usage="only after the critic accepted your final_answer",
        )

    # ------------------------------------------------------------ grid

    def run_matrix(
        self,
        categories: Sequence[CategorySpec],
        outcomes: Sequence[str],
        *,
        output_dir: str | Path | None = None,
        fixed_representatives: dict[str, list[str]] | None = None,
        fixed_reports: dict[tuple[str, str], DrugReport] | None = None,
    ) -> MatrixResult:
        """Run every (category, outcome) cell; failures are recorded per cell."""
        n = self.caps.representatives
        transcripts: dict[str, Transcript] = {}

        # Step 1, once per (sub)category.
        reps: dict[str, list[str]] = dict(fixed_representatives or {})
        unit_errors: dict[str, str] = {}
        units = [u for c in categories for u in c.units()]
        for unit in units:
            if unit.name in reps:
                continue
            tr = Transcript()
            transcripts[f"{slug(unit.name)}__representatives"] = tr
            try:
                reps[unit.name] = self.find_representatives(unit, n, tr)
            except Exception as exc:
                logger.warning("step 1 failed for %s: %s", unit.name, exc)
                unit_errors[unit.name] = f"{type(exc).__name__}: {exc}"
        for unit in units:
            if unit.name in reps and not reps[unit.name]:
                unit_errors[unit.name] = "no representatives selected"

        # Labels go into the store before the fan-out so retrieval sees a fixed corpus.
        if self.ablation.rag:
            for unit in units:
                for d in reps.get(unit.name, []):
                    self.ensure_label(d)

        # Step 2, one independent DrugAgent per (drug, outcome).
        reports: dict[tuple[str, str], DrugReport] = dict(fixed_reports or {})
        jobs = list(
            dict.fromkeys(
                (d, o) for unit in units for o in outcomes for d in reps.get(unit.name, []) if (d, o) not in reports
            )
        )
        report_logs: dict[tuple[str, str], Transcript] = {}
        report_errors: dict[tuple[str, str], str] = {}

        def job(key: tuple[str, str]) -> tuple[DrugReport | None, Transcript, str | None]:
            tr = Transcript()
            try:
                return self.drug_effect_report(key[0], key[1], tr), tr, None
            except Exception as exc:
                logger.warning("step 2 failed for %s/%s: %s", key[0], key[1], exc)
                return None, tr, f"{type(exc).__name__}: {exc}"

        with ThreadPoolExecutor(max_workers=max(1, self.caps.parallelism)) as pool:
            for key, (report, tr, err) in zip(jobs, pool.map(job, jobs)):
                report_logs[key] = tr
                if report is not None:
                    reports[key] = report
                else:
                    report_errors[key] = err or "unknown error"

        # Step 3, per (category, outcome), merging subcategories.
        records = []
        failed = 0
        for cat in categories:
            for outcome in outcomes:
                tr = Transcript()
                name = f"{slug(cat.name)}__{slug(outcome)}"
                transcripts[name] = tr
                rec: dict[str, Any] = {"category": cat.name, "outcome": outcome}
                effects: list[CategoryEffect] = []
                subs = []
                rounds = 0
                forced = False
                error = None
                for unit in cat.units():
                    drugs = reps.get(unit.name, [])
                    if unit.name in unit_errors:
                        error = f"{unit.name}: {unit_errors[unit.name]}"
                        break
                    for d in drugs:
                        if (d, outcome) in report_logs:
                            tr.extend(report_logs[(d, outcome)], prefix=f"{d}/")
                    missing = [d for d in drugs if (d, outcome) not in reports]
                    if missing:
                        error = "; ".join(f"{d}: {report_errors.get((d, outcome), 'no report')}" for d in missing)
                        break
                    step3 = Transcript()
                    try:
                        cell = self.categorize(CategoryQuery(unit, outcome, n), [reports[(d, outcome)] for d in drugs], step3)
                    except Exception as exc:
                        error = f"{type(exc).__name__}: {exc}"
                        break
                    finally:
                        tr.extend(step3, prefix=f"{unit.name}/" if cat.subcategories else "")
                    effects.append(cell.effect)
                    rounds += cell.critic_rounds
                    forced = forced or cell.forced
                    subs.append({"subcategory": unit.name, "representatives": drugs, **cell.effect.to_json()})
                if error is None:
                    rec.update({"status": "ok", **merge_subcategories(effects).to_json()})
                else:
                    failed += 1
                    rec.update({"status": "failed", "error": error})
                rec["representatives"] = [d for u in cat.units() for d in reps.get(u.name, [])]
                if cat.subcategories:
                    rec["subcategories"] = subs
                rec["critic_rounds"] = rounds
                rec["forced_acceptance"] = forced
                rec["transcript"] = f"transcripts/{name}.jsonl"
                records.append(rec)

        result = MatrixResult(records, reps, reports, failed, transcripts)
        if output_dir is not None:
            write_outputs(result, Path(output_dir))
        return result


def slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "x"


def write_outputs(result: MatrixResult, out: Path) -> None:
    pred = out / "predictions" / "predictions.jsonl"
    pred.parent.mkdir(parents=True, exist_ok=True)
    pred.write_text("".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in result.records), encoding="utf-8")
    for name, tr in result.transcripts.items():
        tr.write(out / "transcripts" / f"{name}.jsonl")


__all__ = [
    "Ablation",
    "Caps",
    "CategoryQuery",
    "CategorySpec",
    "DrugReport",
    "EmptyCategory",
    "Pipeline",
    "PipelineError",
    "Resources",
    "ValidationError",
    "merge_subcategories",
    "normalize_fda_answer",
    "render_passages",
]
