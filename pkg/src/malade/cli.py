"""Command-line entry point: ``malade run | eval | replay | trials``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import ConfigError, RunConfig, load_config, with_overrides
from .drugdata import DatasetMissing, LabelClient, NdcDirectory, PrescriptionRates
from .llm import ChatCompletionsBackend, Script
from .pipeline import MatrixResult, Pipeline, Resources
from .rag import DocumentStore, IndexFormatError
from .scoring import (
    MODES,
    CategoryEffect,
    SCORINGS,
    MissingCells,
    TruthParseError,
    evaluate,
    load_predictions,
    load_truth,
    score,
    trials_summary,
)
from .transcript import TranscriptError, read_transcript, render_dialog, verify_transcript

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _resources(cfg: RunConfig, *, refresh: bool = False, rebuild_index: bool = False) -> Resources:
    cache = cfg.data.cache_dir or cfg.output_dir / "cache" / "labels"
    if cfg.data.mode == "fixture":
        ndc = NdcDirectory(cfg.data.ndc)
        # Fixture runs stamp cached labels with a fixed time so reruns are byte-identical.
        labels = LabelClient(cfg.data.labels, cache_dir=cache, refresh=refresh, clock=lambda: 0.0)
    else:
        ndc = NdcDirectory()
        labels = LabelClient(cache_dir=cache, refresh=refresh)
    store = DocumentStore()
    index = cfg.data.index
    if index is not None and index.exists() and not rebuild_index:
        store = DocumentStore.load(index)
    assert cfg.data.prescriptions is not None
    return Resources(ndc=ndc, rates=PrescriptionRates(cfg.data.prescriptions), labels=labels, store=store)


def _backends(cfg: RunConfig):
    if cfg.backend.kind == "scripted":
        assert cfg.backend.script is not None
        script = Script.load(cfg.backend.script)
        return lambda role, trial: script.backend(role, trial)
    live = ChatCompletionsBackend(
        cfg.backend.model,
        base_url=cfg.backend.base_url,
        concurrency=cfg.backend.concurrency,
        log_path=cfg.output_dir / "llm" / "requests.jsonl",
    )
    return lambda role, trial: live


def _pipeline(cfg: RunConfig, resources: Resources, trial: int = 0) -> Pipeline:
    return Pipeline(_backends(cfg), resources, ablation=cfg.ablation, caps=cfg.caps, trial=trial)


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config, validate=False)
    return with_overrides(
        cfg,
        max_steps=args.max_steps,
        critic_rounds=args.max_critic_rounds,
        parallelism=args.parallelism,
        no_critics=args.no_critics,
        no_rag=args.no_rag,
        script=args.script,
        output_dir=args.output_dir,
    )


def _report_failures(result: MatrixResult) -> None:
    for rec in result.records:
        if rec["status"] != "ok":
            print(f"FAILED {rec['category']} / {rec['outcome']}: {rec['error']}", file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    resources = _resources(cfg, refresh=args.refresh, rebuild_index=args.rebuild_index)
    result = _pipeline(cfg, resources, trial=args.trial).run_matrix(cfg.categories, cfg.outcomes, output_dir=cfg.output_dir)
    if cfg.data.index is not None:
        resources.store.save(cfg.data.index)
    ok = len(result.records) - result.failed
    print(f"{ok}/{len(result.records)} cells labelled; predictions in {cfg.output_dir / 'predictions' / 'predictions.jsonl'}")
    _report_failures(result)
    return EXIT_FAILED if result.failed else EXIT_OK


def _write_points(path: Path, header: str, points: Sequence[tuple[float, float]]) -> None:
    path.write_text(header + "\n" + "".join(f"{a!r},{b!r}\n" for a, b in points), encoding="utf-8")


def cmd_eval(args: argparse.Namespace) -> int:
    predictions = load_predictions(args.predictions)
    truth = load_truth(args.truth)
    modes = MODES if args.mode == "both" else (args.mode,)
    scorings = SCORINGS if args.scoring == "all" else (args.scoring,)
    out = Path(args.output_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    status = EXIT_OK
    for mode in modes:
        for scoring in scorings:
            rep = evaluate(predictions, truth, mode, scoring)
            reports.append(rep.to_json())
            stem = f"{mode}_{scoring}"
            _write_points(out / f"roc_{stem}.csv", "fpr,tpr", rep.roc_points)
            _write_points(out / f"sens_spec_{stem}.csv", "specificity,sensitivity", rep.sens_spec_points)
            auc_text = "n/a" if rep.auc is None else f"{rep.auc:.4f}"
            c = rep.confusion
            print(
                f"{mode:6s} {scoring:20s} AUC={auc_text} F1={rep.f1:.4f} "
                f"tp={c['tp']} fp={c['fp']} fn={c['fn']} tn={c['tn']} cells={rep.cells}"
            )
            if rep.auc is None:
                status = EXIT_FAILED
    (out / "eval.json").write_text(json.dumps(reports, indent=2) + "\n", encoding="utf-8")
    return status


def cmd_replay(args: argparse.Namespace) -> int:
    records = read_transcript(args.transcript)
    print(render_dialog(records))
    if args.verify:
        problems = verify_transcript(records)
        for p in problems:
            print(f"VIOLATION {p}", file=sys.stderr)
        if problems:
            return EXIT_FAILED
        print("verify: ok", file=sys.stderr)
    return EXIT_OK


def cmd_trials(args: argparse.Namespace) -> int:
    if args.n < 1:
        raise ConfigError("-n must be positive")
    cfg = _config(args)
    resources = _resources(cfg, refresh=args.refresh, rebuild_index=args.rebuild_index)
    per_cell: dict[tuple[str, str], list[dict[str, Any]]] = {}
    fixed_reps = None
    fixed_reports = None
    failures = 0
    for k in range(args.n):
        out = cfg.output_dir / "trials" / f"trial-{k:02d}"
        result = _pipeline(cfg, resources, trial=k).run_matrix(
            cfg.categories,
            cfg.outcomes,
            output_dir=out,
            fixed_representatives=fixed_reps,
            fixed_reports=fixed_reports,
        )
        failures += result.failed
        _report_failures(result)
        if args.fix_stage in ("representatives", "reports") and fixed_reps is None:
            fixed_reps = result.representatives
        if args.fix_stage == "reports" and fixed_reports is None:
            fixed_reports = result.reports
        for rec in result.records:
            key = (rec["category"], rec["outcome"])
            entry: dict[str, Any] = {"trial": k, "status": rec["status"]}
            if rec["status"] == "ok":
                effect = CategoryEffect(
                    rec["label"], rec["confidence"], rec["probability"], rec["frequency"], rec["evidence"]
                )
                entry.update(
                    label=effect.label,
                    confidence=effect.confidence,
                    probability=effect.probability,
                    ade_score=score(effect, "ade", "confidence"),
                    effect_score=score(effect, "effect", "confidence"),
                )
            per_cell.setdefault(key, []).append(entry)

    summary = []
    for (cat, outcome), entries in per_cell.items():
        ok = [e for e in entries if e["status"] == "ok"]
        cell: dict[str, Any] = {"category": cat, "outcome": outcome, "trials": entries}
        for metric in ("ade_score", "effect_score", "probability"):
            values = [e[metric] for e in ok]
            cell[metric] = trials_summary(values).to_json() if values else None
        summary.append(cell)
    reports = cfg.output_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "trials.json").write_text(
        json.dumps({"n": args.n, "fix_stage": args.fix_stage, "cells": summary}, indent=2) + "\n", encoding="utf-8"
    )
    with (reports / "trial_scores.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "outcome", "trial", "status", "label", "confidence", "probability", "ade_score", "effect_score"])
        for cell in summary:
            for e in cell["trials"]:
                w.writerow([cell["category"], cell["outcome"], e["trial"], e["status"]] + [e.get(k, "") for k in (
                    "label", "confidence", "probability", "ade_score", "effect_score")])
    with (reports / "trial_histograms.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "outcome", "metric", "bin_lo", "bin_hi", "count"])
        for cell in summary:
            for metric in ("ade_score", "effect_score", "probability"):
                h = cell[metric]
                if h is None:
                    continue
                for lo, hi, count in zip(h["bin_edges"], h["bin_edges"][1:], h["histogram"]):
                    w.writerow([cell["category"], cell["outcome"], metric, lo, hi, count])
    for cell in summary:
        s = cell["ade_score"]
        if s is None:
            print(f"{cell['category']} / {cell['outcome']}: no successful trials")
            continue
        std = "undefined" if s["std"] is None else f"{s['std']:.4f}"
        print(f"{cell['category']} / {cell['outcome']}: ADE score mean={s['mean']:.4f} std={std} n={s['n']}")
    print(f"trial summary in {reports / 'trials.json'}")
    return EXIT_FAILED if failures else EXIT_OK


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="TOML run configuration")
    p.add_argument("--output-dir", help="where predictions/, transcripts/ and reports/ go")
    p.add_argument("--script", help="scripted-backend file (switches the backend to scripted)")
    p.add_argument("--max-steps", type=int, help="step cap per task run")
    p.add_argument("--max-critic-rounds", type=int, help="critic rejections before forced acceptance")
    p.add_argument("--parallelism", type=int, help="concurrent DrugAgent runs")
    p.add_argument("--no-critics", action="store_true", help="accept every final answer without review")
    p.add_argument("--no-rag", action="store_true", help="answer drug questions without label retrieval")
    p.add_argument("--refresh", action="store_true", help="refetch labels even when cached")
    p.add_argument("--rebuild-index", action="store_true", help="ignore an existing on-disk index")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="malade", description="Drug-category adverse-event labelling with agent/critic pairs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="label every configured (category, outcome) cell")
    _run_flags(run)
    run.add_argument("--trial", type=int, default=0, help="trial index (selects scripted variants)")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score predictions against a ground-truth table")
    ev.add_argument("predictions", help="predictions.jsonl from `malade run`")
    ev.add_argument("truth", help="ground-truth table (outcomes across, categories down)")
    ev.add_argument("--mode", choices=(*MODES, "both"), default="both")
    ev.add_argument("--scoring", choices=(*SCORINGS, "all"), default="confidence")
    ev.add_argument("--output-dir", default=".", help="reports/ is created here")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("replay", help="render a transcript as a dialog")
    rp.add_argument("transcript")
    rp.add_argument("--verify", action="store_true", help="check the step rules and fail on violations")
    rp.set_defaults(func=cmd_replay)

    tr = sub.add_parser("trials", help="repeat the run and summarise the spread of scores")
    _run_flags(tr)
    tr.add_argument("-n", type=int, default=10, help="number of trials")
    tr.add_argument("--fix-stage", choices=("representatives", "reports"), help="reuse earlier-stage outputs across trials")
    tr.set_defaults(func=cmd_trials)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TruthParseError, TranscriptError, IndexFormatError, DatasetMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingCells as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
