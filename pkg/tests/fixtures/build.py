"""Regenerate the offline fixture corpus.

Run ``python3 tests/fixtures/build.py`` after changing anything below; the
generated files are checked in so tests never depend on this script.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from malade.pipeline import category_question, drug_question

HERE = Path(__file__).resolve().parent

ACE = "Angiotensin Converting Enzyme Inhibitor [EPC]"
BENZO = "Benzodiazepine [EPC]"
BISPH = "Bisphosphonate [EPC]"

NDC = [
    ("LISINOPRIL", ACE, "0001-0001"),
    ("CAPTOPRIL", ACE, "0001-0002"),
    ("ENALAPRIL MALEATE", ACE, "0001-0003"),
    ("BENAZEPRIL HYDROCHLORIDE", ACE, "0001-0004"),
    ("LISINOPRIL AND HYDROCHLOROTHIAZIDE", ACE, "0001-0005"),
    ("Lisinopril", ACE, "0001-0006"),
    ("CLONAZEPAM", BENZO, "0002-0001"),
    ("LORAZEPAM", BENZO, "0002-0002"),
    ("DIAZEPAM", BENZO, "0002-0003"),
    ("TEMAZEPAM", BENZO, "0002-0004"),
    ("ALENDRONATE SODIUM", BISPH, "0003-0001"),
    ("RISEDRONATE SODIUM", BISPH, "0003-0002"),
    ("METFORMIN HYDROCHLORIDE", "Biguanide [EPC]", "0004-0001"),
]

PRESCRIPTIONS = {
    "lisinopril": 40,
    "enalapril maleate": 12,
    "captopril": 6,
    "benazepril hydrochloride": 5,
    "lisinopril and hydrochlorothiazide": 9,
    "clonazepam": 20,
    "lorazepam": 18,
    "diazepam": 11,
    "temazepam": 4,
    "alendronate sodium": 15,
    "risedronate sodium": 3,
    "metformin hydrochloride": 50,
}

FILLER = (
    "Patients should be monitored during treatment and the dose adjusted to response. "
    "Use with caution in patients with hepatic or renal impairment. "
)

LABELS = {
    "lisinopril": {
        "adverse_reactions": (
            "In controlled clinical trials the most frequent adverse reactions were headache, dizziness and cough. "
            + FILLER * 3
        ),
        "warnings_and_cautions": (
            "Angioedema of the face, extremities, lips, tongue, glottis and larynx has been reported rarely in patients "
            "treated with angiotensin converting enzyme inhibitors, including lisinopril. Angioedema associated with "
            "laryngeal edema can be fatal. " + FILLER * 2
        ),
    },
    "captopril": {
        "warnings": (
            "Angioedema involving the extremities, face, lips, mucous membranes, tongue, glottis or larynx has been "
            "seen in approximately one in 1000 patients treated with captopril. " + FILLER * 2
        ),
        "adverse_reactions": "Rash and taste alteration were reported. " + FILLER * 4,
    },
    "enalapril maleate": {
        "warnings": (
            "Angioedema of the face, extremities, lips and tongue has been reported in patients treated with ACE "
            "inhibitors including enalapril; it may occur at any time during treatment. " + FILLER * 2
        ),
        "adverse_reactions": "Dizziness and fatigue were the most common reactions. " + FILLER * 4,
    },
    "clonazepam": {
        "adverse_reactions": (
            "Infrequent adverse events reported in clinical trials include fracture traumatic, sinusitis and "
            "muscle cramps. Causal relationship to the drug has not been established. " + FILLER * 3
        ),
        "warnings": "Concomitant use with opioids may result in profound sedation. " + FILLER * 2,
    },
    "lorazepam": {
        "adverse_reactions": "The most frequent reactions were sedation, dizziness and weakness. " + FILLER * 3,
        "warnings": "Abrupt discontinuation can precipitate withdrawal reactions. " + FILLER * 2,
    },
    "diazepam": {
        "adverse_reactions": "Drowsiness, fatigue and ataxia were reported most often. " + FILLER * 3,
        "warnings": "Physical and psychological dependence may develop. " + FILLER * 2,
    },
    "alendronate sodium": {
        "adverse_reactions": (
            "In controlled clinical trials the incidence of upper gastrointestinal adverse events was similar between "
            "alendronate and placebo, and controlled trials did not show an increase in gastric or duodenal ulcer "
            "hospitalization. " + FILLER * 2
        ),
        "warnings_and_cautions": (
            "Esophageal adverse experiences including ulcers and erosions have been reported in post-marketing use. "
            + FILLER * 2
        ),
        "indications_and_usage": (
            "Treatment of osteoporosis in postmenopausal women to reduce the incidence of fractures, including "
            "hip and vertebral fractures. " + FILLER
        ),
    },
}

OUTCOMES = ("angioedema", "hip fracture", "gastrointestinal ulcer hospitalization")

# (unit name, display, representatives)
UNITS = (
    ("ACE inhibitors", ("LISINOPRIL", "CAPTOPRIL", "ENALAPRIL MALEATE")),
    ("benzodiazepines", ("CLONAZEPAM", "LORAZEPAM", "DIAZEPAM")),
    ("alendronate", ("ALENDRONATE SODIUM",)),
)

# (drug, outcome) pairs the label answers; everything else is NO_ANSWER.
FDA_ANSWERS = {
    ("LISINOPRIL", "angioedema"): (
        "Angioedema is reported rarely with ACE inhibitors including lisinopril; it can be fatal when the larynx is involved. "
        "The label states this as a warning, so the evidence is reliable.",
        "Angioedema of the face, extremities, lips, tongue, glottis and larynx has been reported rarely",
    ),
    ("CAPTOPRIL", "angioedema"): (
        "Angioedema occurs in about one in 1000 patients treated with captopril, a rare but established warning.",
        "Angioedema involving the extremities, face, lips, mucous membranes, tongue, glottis or larynx has been seen in approximately one in 1000 patients",
    ),
    ("ENALAPRIL MALEATE", "angioedema"): (
        "Angioedema is a labelled warning for enalapril and other ACE inhibitors; it is rare and may occur at any time.",
        "Angioedema of the face, extremities, lips and tongue has been reported in patients treated with ACE inhibitors",
    ),
    ("CLONAZEPAM", "hip fracture"): (
        "Fracture traumatic is listed as an infrequent adverse event in clinical trials; a causal relationship was not established, so the evidence is weak.",
        "Infrequent adverse events reported in clinical trials include fracture traumatic",
    ),
    ("ALENDRONATE SODIUM", "gastrointestinal ulcer hospitalization"): (
        "Controlled clinical trials did not show an increase in ulcer hospitalization, although esophageal ulcers are reported post-marketing.",
        "controlled trials did not show an increase in gastric or duodenal ulcer hospitalization",
    ),
    ("ALENDRONATE SODIUM", "hip fracture"): (
        "Alendronate is indicated to reduce the incidence of fractures, including hip fractures, in postmenopausal osteoporosis.",
        "reduce the incidence of fractures, including hip and vertebral fractures",
    ),
}

NO_EFFECT = {
    "label": "no-effect",
    "confidence": 0.9,
    "probability": 0.0,
    "frequency": "none",
    "evidence": "none",
    "justification": "FDAHandler answered NO_ANSWER for every representative drug: no label mentions the condition.",
}

# Final labels per (unit, outcome); missing cells fall back to NO_EFFECT.
EFFECTS = {
    ("ACE inhibitors", "angioedema"): {
        "label": "increase",
        "confidence": 1.0,
        "probability": 0.001,
        "frequency": "rare",
        "evidence": "strong",
        "justification": "All three representative labels warn of rare angioedema; captopril quotes about one case per 1000 patients.",
    },
    ("benzodiazepines", "hip fracture"): {
        "label": "increase",
        "confidence": 0.6,
        "probability": 0.1,
        "frequency": "rare",
        "evidence": "weak",
        "justification": "Clonazepam lists fracture traumatic as infrequent; sedation makes falls plausible, but the other labels are silent.",
    },
    ("alendronate", "gastrointestinal ulcer hospitalization"): {
        "label": "no-effect",
        "confidence": 0.8,
        "probability": 0.05,
        "frequency": "rare",
        "evidence": "weak",
        "justification": "Controlled trials showed no increase in ulcer hospitalization; post-marketing reports are not consistent.",
    },
    ("alendronate", "hip fracture"): {
        "label": "decrease",
        "confidence": 0.7,
        "probability": 0.05,
        "frequency": "common",
        "evidence": "strong",
        "justification": "The label indication is reduction of hip and vertebral fracture incidence in osteoporosis.",
    },
}

# Per-trial alternatives for the trials fixture; index 0 is the single-run value.
VARIANTS = {
    ("ACE inhibitors", "hip fracture"): [0.9, 0.85, 0.95, 0.8, 0.9, 0.75, 0.9, 0.95, 0.85, 0.7],
}

REJECTIONS = {
    ("benzodiazepines", "hip fracture"): [
        "The answer does not say how strong the evidence linking clonazepam to fractures is.",
        "State the magnitude of the risk; the label calls the event infrequent.",
    ],
}


def tool(name: str, **arguments) -> dict:
    return {"name": name, "to": "", "arguments": arguments}


def fda_question(drug: str, outcome: str) -> str:
    return f"What does the FDA label for {drug.lower()} say about {outcome}?"


def finder_entries() -> list[dict]:
    out = []
    for unit, reps in UNITS:
        seed = f"Drug category: {unit}\n"
        out.append(
            {
                "match": {"kind": "SUBSTRING", "pattern": seed},
                "response": tool(
                    "final_answer",
                    question=f"Choose up to 3 representative {unit}, exact names from the list, generic names preferred.",
                    steps=["Ranked the candidates by prescription count.", "Dropped combination and duplicate products."],
                    answer=", ".join(reps),
                ),
            }
        )
        out.append(
            {
                "match": {"kind": "SUBSTRING", "pattern": "Your reasoning is valid"},
                "scope": [seed],
                "response": tool("submit_answer", drugs=list(reps)),
            }
        )
    return out


def drug_agent_entries() -> list[dict]:
    out = []
    for _, reps in UNITS:
        for drug in reps:
            for outcome in OUTCOMES:
                q = drug_question(drug, outcome)
                answered = (drug, outcome) in FDA_ANSWERS
                out.append(
                    {
                        "match": {"kind": "SUBSTRING", "pattern": q},
                        "response": tool(
                            "recipient_message", intended_recipient="FDAHandler", content=fda_question(drug, outcome)
                        ),
                    }
                )
                if answered:
                    summary = FDA_ANSWERS[(drug, outcome)][0]
                    answer = f"{drug} affects the risk of {outcome}: {summary}"
                    final = "{DONE} " + answer
                else:
                    answer = "NO_ANSWER"
                    final = (
                        "{DONE} {NO_ANSWER} FDAHandler answered {NO_ANSWER}: the "
                        f"{drug.lower()} label does not mention {outcome}."
                    )
                out.append(
                    {
                        "match": {"kind": "SUBSTRING", "pattern": "ANSWER"},
                        "scope": [q],
                        "response": tool(
                            "final_answer",
                            question=q,
                            steps=[f"Asked FDAHandler about {outcome} in the {drug.lower()} label.", "Summarised its reply."],
                            answer=answer,
                        ),
                    }
                )
                out.append(
                    {
                        "match": {"kind": "SUBSTRING", "pattern": "Your reasoning is valid"},
                        "scope": [q],
                        "response": final,
                    }
                )
    return out


def fda_entries() -> list[dict]:
    out = []
    for _, reps in UNITS:
        for drug in reps:
            for outcome in OUTCOMES:
                fq = fda_question(drug, outcome)
                out.append(
                    {
                        "match": {"kind": "EXACT", "pattern": fq},
                        "response": tool("relevant_extracts", query=outcome, filter_drugs=[drug.lower()]),
                    }
                )
                if (drug, outcome) in FDA_ANSWERS:
                    summary, extract = FDA_ANSWERS[(drug, outcome)]
                    reply = f"{{DONE}}\nANSWER: {summary}\nSOURCE: {drug.lower()} label\nEXTRACT_START_END: {extract}"
                else:
                    reply = "{DONE} {NO_ANSWER}"
                out.append({"match": {"kind": "SUBSTRING", "pattern": "Reference passages:"}, "scope": [fq], "response": reply})
    return out


def fda_norag_entries() -> list[dict]:
    out = []
    for _, reps in UNITS:
        for drug in reps:
            for outcome in OUTCOMES:
                fq = fda_question(drug, outcome)
                if (drug, outcome) in FDA_ANSWERS:
                    reply = f"{{DONE}}\nANSWER: {FDA_ANSWERS[(drug, outcome)][0]}\nSOURCE: {drug.lower()} label"
                else:
                    reply = "{DONE} {NO_ANSWER}"
                out.append({"match": {"kind": "EXACT", "pattern": fq}, "response": reply})
    return out


def category_entries() -> list[dict]:
    out = []
    for unit, _ in UNITS:
        for outcome in OUTCOMES:
            cq = category_question(unit, outcome)
            effect = EFFECTS.get((unit, outcome), NO_EFFECT)
            fa = tool(
                "final_answer",
                question=cq,
                steps=["Read every passage.", f"Weighed the evidence for {outcome} across the category."],
                answer=f"{effect['label']} (confidence {effect['confidence']})",
            )
            out.append({"match": {"kind": "SUBSTRING", "pattern": "Passages:"}, "scope": [cq], "response": fa})
            out.append({"match": {"kind": "SUBSTRING", "pattern": "Feedback:"}, "scope": [cq], "response": fa})
            variants = VARIANTS.get((unit, outcome))
            if variants:
                response = [tool("category_effect_tool", **{**effect, "confidence": c}) for c in variants]
            else:
                response = tool("category_effect_tool", **effect)
            out.append({"match": {"kind": "SUBSTRING", "pattern": "Your reasoning is valid"}, "scope": [cq], "response": response})
    return out


def critic_entries(rejections: dict | None = None) -> list[dict]:
    out = []
    for (unit, outcome), texts in (rejections or {}).items():
        cq = category_question(unit, outcome)
        for i, critique in enumerate(texts):
            out.append(
                {"match": {"kind": "SEQUENCE-INDEX", "index": i}, "scope": [cq], "response": tool("feedback", critique=critique)}
            )
    out.append({"match": {"kind": "SUBSTRING", "pattern": "Question:"}, "response": tool("feedback", critique="")})
    return out


def script() -> dict:
    return {
        "roles": {
            "DrugFinder": finder_entries(),
            "DrugFinderCritic": critic_entries(),
            "DrugAgent": drug_agent_entries(),
            "DrugAgentCritic": critic_entries(),
            "FDAHandler": fda_entries(),
            "FDAHandlerNoRAG": fda_norag_entries(),
            "CategoryAgent": category_entries(),
            "CategoryAgentCritic": critic_entries(REJECTIONS),
        }
    }


def label_doc(name: str, sections: dict[str, str], i: int) -> dict:
    return {
        "id": f"label-{i:03d}",
        "set_id": f"set-{i:03d}",
        "effective_time": "20230101",
        "openfda": {"generic_name": [name.upper()], "brand_name": []},
        **sections,
    }


CONFIG = """\
outcomes = ["angioedema", "hip fracture", "gastrointestinal ulcer hospitalization"]

[backend]
kind = "scripted"
script = "script.json"

[data]
mode = "fixture"
ndc = "ndc.json"
labels = "labels"
prescriptions = "prescriptions.csv"

[caps]
max_steps = 64
critic_rounds = 5
parallelism = 4
representatives = 3

[[categories]]
name = "ACE inhibitors"
search_terms = ["Angiotensin Converting Enzyme Inhibitor"]

[[categories]]
name = "benzodiazepines"
search_terms = ["Benzodiazepine"]

[[categories]]
name = "bisphosphonates"

[[categories.subcategories]]
name = "alendronate"
search_terms = ["alendronate"]
"""

TRUTH = """\
category,angioedema,hip fracture,gastrointestinal ulcer hospitalization
ACE inhibitors,increase,no-effect,uncertain
benzodiazepines,no-effect,increase,no-effect
bisphosphonates,no-effect,decrease,increase
"""


def main() -> None:
    (HERE / "ndc.json").write_text(
        json.dumps(
            {"results": [{"generic_name": n, "pharm_class": [c], "product_ndc": pid} for n, c, pid in NDC]}, indent=1
        )
        + "\n",
        encoding="utf-8",
    )
    with (HERE / "prescriptions.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient", "drug"])
        k = 0
        for drug, n in PRESCRIPTIONS.items():
            for _ in range(n):
                w.writerow([f"p{k:04d}", drug])
                k += 1
    labels = HERE / "labels"
    labels.mkdir(exist_ok=True)
    for i, (name, sections) in enumerate(LABELS.items(), start=1):
        doc = label_doc(name, sections, i)
        (labels / f"{name.replace(' ', '_')}.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    # An older duplicate lisinopril label exercises label disambiguation.
    old = label_doc("lisinopril", {"adverse_reactions": "Superseded text. " + FILLER}, 99)
    old["effective_time"] = "20150101"
    (labels / "lisinopril_2015.json").write_text(json.dumps(old, indent=1) + "\n", encoding="utf-8")
    (HERE / "script.json").write_text(json.dumps(script(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    (HERE / "config.toml").write_text(CONFIG, encoding="utf-8")
    (HERE / "truth.csv").write_text(TRUTH, encoding="utf-8")


if __name__ == "__main__":
    main()
