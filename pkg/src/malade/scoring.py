"""Score transforms, label postprocessing and metrics (AUC, F1, confusion, trial spread)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

LABELS = ("increase", "decrease", "no-effect")
FREQUENCIES = ("none", "rare", "common")
EVIDENCE = ("none", "weak", "strong")
MODES = ("effect", "ade")
SCORINGS = ("confidence", "probability", "probability-modified")
TRUTH_TOKENS = LABELS + ("uncertain",)
ROUND_PROBABILITIES = (0.1, 0.01)


class DegenerateClasses(ValueError):
    pass


class MissingCells(ValueError):
    def __init__(self, cells: Sequence[tuple[str, str]]) -> None:
        self.cells = list(cells)
        listed = ", ".join(f"{c}/{o}" for c, o in self.cells)
        super().__init__(f"no prediction for {len(self.cells)} certain cell(s): {listed}")


class TruthParseError(ValueError):
    pass


@dataclass(frozen=True)
class CategoryEffect:
    label: str
    confidence: float
    probability: float
    frequency: str
    evidence: str
    justification: str = ""

    def __post_init__(self) -> None:
        problems = effect_problems(self.__dict__)
        if problems:
            raise ValueError("; ".join(problems))

    def to_json(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "confidence": self.confidence,
            "probability": self.probability,
            "frequency": self.frequency,
            "evidence": self.evidence,
            "justification": self.justification,
        }


def effect_problems(d: Mapping[str, Any]) -> list[str]:
    out = []
    if d.get("label") not in LABELS:
        out.append(f"`label` must be one of {', '.join(LABELS)} (got {d.get('label')!r})")
    if d.get("frequency") not in FREQUENCIES:
        out.append(f"`frequency` must be one of {', '.join(FREQUENCIES)} (got {d.get('frequency')!r})")
    if d.get("evidence") not in EVIDENCE:
        out.append(f"`evidence` must be one of {', '.join(EVIDENCE)} (got {d.get('evidence')!r})")
    for key in ("confidence", "probability"):
        v = d.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not (0.0 <= v <= 1.0):
            out.append(f"`{key}` must be a number in [0, 1] (got {v!r})")
    return out


def _check(label: str, x: float) -> None:
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"value {x} outside [0, 1]")


# ---------------------------------------------------------------- transforms


def ade_score_confidence(label: str, c: float) -> float:
    _check(label, c)
    return {"decrease": (1 - c) / 3, "no-effect": (2 - c) / 3, "increase": (2 + c) / 3}[label]


def effect_score_confidence(label: str, c: float) -> float:
    _check(label, c)
    return (1 - c) / 2 if label == "no-effect" else (1 + c) / 2


def ade_score_probability(label: str, p: float) -> float:
    _check(label, p)
    return (1 - p) / 2 if label == "decrease" else (1 + p) / 2


def effect_score_probability(label: str, p: float) -> float:
    _check(label, p)
    return p


def modified_probability_score(label: str, p: float, mode: str) -> float:
    """Probability shifted up by one for the labels that count as positive in ``mode``.

    In ADE mode a ``decrease`` keeps the descending base ``(1 - p) / 2``.
    """
    _check(label, p)
    if mode == "ade":
        if label == "increase":
            return p + 1
        if label == "decrease":
            return ade_score_probability(label, p)
        return p
    if mode == "effect":
        return p + 1 if label in ("increase", "decrease") else p
    raise ValueError(f"unknown mode {mode!r}")


def score(effect: CategoryEffect, mode: str, scoring: str) -> float:
    if scoring == "confidence":
        fn = ade_score_confidence if mode == "ade" else effect_score_confidence
        return fn(effect.label, effect.confidence)
    if scoring == "probability":
        fn = ade_score_probability if mode == "ade" else effect_score_probability
        return fn(effect.label, effect.probability)
    if scoring == "probability-modified":
        return modified_probability_score(effect.label, effect.probability, mode)
    raise ValueError(f"unknown scoring {scoring!r}")


def is_unreliable(effect: CategoryEffect) -> bool:
    weak_rare = effect.evidence == "weak" and effect.frequency == "rare"
    round_p = any(abs(effect.probability - r) <= 1e-12 for r in ROUND_PROBABILITIES)
    return weak_rare or round_p


def postprocess_label(effect: CategoryEffect) -> str:
    return "no-effect" if is_unreliable(effect) else effect.label


def binarize(label: str, mode: str) -> bool:
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}")
    if mode == "effect":
        return label in ("increase", "decrease")
    if mode == "ade":
        return label == "increase"
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- metrics


def auc(pairs: Sequence[tuple[float, bool]]) -> float:
    """Mann-Whitney AUC via average ranks; ties count one half."""
    scores = np.array([s for s, _ in pairs], dtype=float)
    truth = np.array([bool(t) for _, t in pairs])
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClasses("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_points(pairs: Sequence[tuple[float, bool]]) -> list[tuple[float, float]]:
    """(fpr, tpr) at every distinct threshold, from (0, 0) to (1, 1)."""
    n_pos = sum(1 for _, t in pairs if t)
    n_neg = len(pairs) - n_pos
    points = [(0.0, 0.0)]
    for thr in sorted({s for s, _ in pairs}, reverse=True):
        tp = sum(1 for s, t in pairs if t and s >= thr)
        fp = sum(1 for s, t in pairs if not t and s >= thr)
        points.append((fp / n_neg if n_neg else 0.0, tp / n_pos if n_pos else 0.0))
    return points


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass
class GroundTruth:
    categories: list[str]
    outcomes: list[str]
    cells: dict[tuple[str, str], tuple[str, bool]]

    def certain(self) -> list[tuple[str, str]]:
        return [k for k in self.keys() if self.cells[k][1]]

    def keys(self) -> list[tuple[str, str]]:
        return [(c, o) for c in self.categories for o in self.outcomes if (c, o) in self.cells]


def parse_truth(text: str, source: str = "<truth>") -> GroundTruth:
    """Header row of outcomes (first cell ignored); one row per category."""
    sample = text[:2048]
    try:
        dialect = csv.Sniffer().sniff(sample, delimiters=",\t;|")
    except csv.Error:
        dialect = csv.excel
    rows = [r for r in csv.reader(io.StringIO(text), dialect) if any(c.strip() for c in r)]
    if len(rows) < 2:
        raise TruthParseError(f"{source}: need a header row and at least one category row")
    outcomes = [h.strip() for h in rows[0][1:]]
    cats: list[str] = []
    cells: dict[tuple[str, str], tuple[str, bool]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(outcomes) + 1:
            raise TruthParseError(f"{source}:{lineno}: expected {len(outcomes) + 1} fields, got {len(row)}")
        cat = row[0].strip()
        cats.append(cat)
        for outcome, token in zip(outcomes, row[1:]):
            t = token.strip().lower()
            if t not in TRUTH_TOKENS:
                raise TruthParseError(f"{source}:{lineno}: unknown cell token {token.strip()!r}")
            cells[(cat, outcome)] = ("no-effect", False) if t == "uncertain" else (t, True)
    return GroundTruth(cats, outcomes, cells)


def load_truth(path: str | Path) -> GroundTruth:
    return parse_truth(Path(path).read_text(encoding="utf-8"), str(path))


def load_predictions(path: str | Path) -> dict[tuple[str, str], CategoryEffect]:
    """Read the pipeline's prediction records; failed cells are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if rec.get("status", "ok") != "ok":
            continue
        try:
            effect = CategoryEffect(
                rec["label"], rec["confidence"], rec["probability"], rec["frequency"], rec["evidence"], rec.get("justification", "")
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad prediction record ({exc})") from None
        out[(rec["category"], rec["outcome"])] = effect
    return out


@dataclass
class EvalReport:
    mode: str
    scoring: str
    auc: float | None
    f1: float
    confusion: dict[str, int]
    roc_points: list[tuple[float, float]]
    sens_spec_points: list[tuple[float, float]]
    cells: int
    f1_raw: float = 0.0
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "scoring": self.scoring,
            "auc": self.auc,
            "f1": self.f1,
            "f1_without_postprocessing": self.f1_raw,
            "confusion": self.confusion,
            "cells": self.cells,
            "roc_points": [list(p) for p in self.roc_points],
            "sens_spec_points": [list(p) for p in self.sens_spec_points],
            "notes": self.notes,
        }


def _confusion(pred: Iterable[bool], truth: Iterable[bool]) -> dict[str, int]:
    c = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for p, t in zip(pred, truth):
        c["tp" if p and t else "fp" if p else "fn" if t else "tn"] += 1
    return c


def evaluate(
    predictions: Mapping[tuple[str, str], CategoryEffect],
    truth: GroundTruth,
    mode: str,
    scoring: str = "confidence",
    *,
    postprocess: bool = True,
) -> EvalReport:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if scoring not in SCORINGS:
        raise ValueError(f"unknown scoring {scoring!r}")
    keys = truth.certain()
    missing = [k for k in keys if k not in predictions]
    if missing:
        raise MissingCells(missing)
    y = [binarize(truth.cells[k][0], mode) for k in keys]
    effects = [predictions[k] for k in keys]
    pairs = [(score(e, mode, scoring), t) for e, t in zip(effects, y)]
    notes = []
    try:
        auc_value: float | None = auc(pairs)
    except DegenerateClasses as exc:
        auc_value = None
        notes.append(str(exc))
    pred = [binarize(postprocess_label(e) if postprocess else e.label, mode) for e in effects]
    raw = [binarize(e.label, mode) for e in effects]
    conf = _confusion(pred, y)
    rc = _confusion(raw, y)
    roc = roc_points(pairs)
    return EvalReport(
        mode=mode,
        scoring=scoring,
        auc=auc_value,
        f1=f1_score(conf["tp"], conf["fp"], conf["fn"]),
        f1_raw=f1_score(rc["tp"], rc["fp"], rc["fn"]),
        confusion=conf,
        roc_points=roc,
        sens_spec_points=[(1 - fpr, tpr) for fpr, tpr in roc],
        cells=len(keys),
        notes=notes,
    )


# ---------------------------------------------------------------- trials


@dataclass
class TrialsSummary:
    n: int
    mean: float
    std: float | None
    histogram: list[int]
    bin_edges: list[float]
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "mean": self.mean,
            "std": self.std,
            "histogram": self.histogram,
            "bin_edges": self.bin_edges,
            "flags": self.flags,
        }


def trials_summary(samples: Sequence[float], *, bins: int = 10, lo: float = 0.0, hi: float = 1.0) -> TrialsSummary:
    """Mean, unbiased std and fixed-width histogram over [lo, hi].

    A single sample yields ``std=None`` with a flag rather than an error.
    """
    xs = [float(x) for x in samples]
    if not xs:
        raise ValueError("no samples")
    hi = max(hi, max(xs))
    lo = min(lo, min(xs))
    counts, edges = np.histogram(xs, bins=bins, range=(lo, hi))
    flags = []
    if len(xs) < 2:
        std = None
        flags.append("std undefined for fewer than 2 samples")
    else:
        std = float(np.std(xs, ddof=1))
    mean = math.fsum(xs) / len(xs)
    return TrialsSummary(len(xs), mean, std, [int(c) for c in counts], [float(e) for e in edges], flags)
