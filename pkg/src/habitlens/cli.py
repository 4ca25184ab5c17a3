# *******************************************************************************
# Copyright (c) 2025 Contributors to the Eclipse Foundation
#
# See the NOTICE file(s) distributed with this work for additional
# information regarding copyright ownership.
#
# This program and the accompanying materials are made available under the
# terms of the Apache License Version 2.0 which is available at
# https://www.apache.org/licenses/LICENSE-2.0
#
# SPDX-License-Identifier: Apache-2.0
# *******************************************************************************
"""
Command-line entry point.

Every subcommand writes its artifacts under ``--out-dir`` together with a
``manifest_<command>.json``. Settings resolve as flags > ``--config`` file >
defaults; the root seed falls back to ``HABITLENS_SEED``.
"""

import argparse
import logging
import sys
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import pandas as pd

from habitlens import __version__
from habitlens.checkpoint import load_checkpoint, save_checkpoint
from habitlens.config import (
    RuntimeConfig,
    default_workers,
    load_config_document,
    load_list_file,
    merge_settings,
    resolve_seed,
)
from habitlens.dataset import Vocab, save_dataset
from habitlens.errors import ConfigError, EmptyInputError, HabitlensError, VocabularyError
from habitlens.experiments import (
    ARCHITECTURES,
    ExperimentContext,
    ExperimentPlan,
    RegimeResult,
    TrainedModel,
    compute_descriptives,
    cross_generalization,
    ngram_transition_report,
    predictability_frequency_correlations,
    regime_comparison,
    run_regime,
    sequence_length_sweep,
)
from habitlens.ingest import DEFAULT_SOCIAL_APPS, CleaningConfig, CohortConfig, read_log
from habitlens.reports import (
    RunManifest,
    auc_long_frame,
    distribution_frame,
    file_sha256,
    read_per_person,
    write_csv,
)
from habitlens.synthgen import SynthConfig, generate_cohort
from habitlens.tracing import TRACE_LEVELS, init_tracing

logger = logging.getLogger(__name__)


class ExitCode:
    """
    Process exit codes.
    """

    SUCCESS = 0
    FAILURE = 1
    USAGE = 2


COHORT_DEFAULTS: dict[str, Any] = {
    "min_days": 14,
    "truncate_days": 14,
    "min_sessions": 1000,
    "min_social_fraction": 0.05,
    "social_apps": None,
    "blocked_apps": None,
    "system_ui_patterns": None,
    "keep_system": False,
    "max_malformed": 0.01,
}

TRAIN_DEFAULTS: dict[str, Any] = {
    "arch": "lstm",
    "seq_len": 20,
    "same_day": False,
    "weighted": False,
    "hpo_budget": 20,
    "random_starts": 5,
    "max_epochs": 1000,
    "batch_size": 1024,
    "patience": 5,
}

SIMULATE_DEFAULTS: dict[str, Any] = {f.name: f.default for f in fields(SynthConfig) if f.name != "seed"}
SIMULATE_FLAGS = {
    "n_users": "--users",
    "days": "--days",
    "sessions_per_day": "--sessions-per-day",
    "n_apps": "--apps",
    "n_social": "--social",
    "habit_strength": "--habit-strength",
    "motif_length": "--motif-length",
    "motifs_per_user": "--motifs",
    "idiosyncrasy": "--idiosyncrasy",
    "base_structure": "--base-structure",
    "social_motif_fraction": "--social-motif-fraction",
    "system_fraction": "--system-fraction",
    "habit_spread": "--habit-spread",
    "volume_spread": "--volume-spread",
    "volume_coupling": "--volume-coupling",
}


def _common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--traces", choices=sorted(TRACE_LEVELS), default="info", help="Trace level on stderr")
    parser.add_argument("--jobs", type=int, help="Worker pool size (default: available cores)")
    parser.add_argument("--config", type=Path, help="JSON or section.key=value config file")
    parser.add_argument("--out-dir", type=Path, default=Path("."), help="Directory for all artifacts")
    parser.add_argument("--seed", type=int, help="Root seed (default: runtime.seed, then $HABITLENS_SEED, then 0)")


def _data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, required=True, help="App log (CSV or JSONL)")
    parser.add_argument("--min-days", type=int)
    parser.add_argument("--truncate-days", type=int)
    parser.add_argument("--min-sessions", type=int)
    parser.add_argument("--min-social-fraction", type=float)
    parser.add_argument("--social-apps", type=Path, help="List file of social-media packages")
    parser.add_argument("--blocked-apps", type=Path, help="List file of packages to drop")
    parser.add_argument("--system-ui-patterns", type=Path, help="List file of system UI substrings")
    parser.add_argument(
        "--keep-system", action="store_true", default=None, help="Alternative cleaning keeping system UI events"
    )
    parser.add_argument("--max-malformed", type=float, help="Tolerated fraction of malformed records")


def _train_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--arch", choices=ARCHITECTURES)
    parser.add_argument("--seq-len", type=int)
    parser.add_argument("--same-day", action="store_true", default=None)
    parser.add_argument("--weighted", action="store_true", default=None)
    parser.add_argument("--hpo-budget", type=int)
    parser.add_argument("--random-starts", type=int)
    parser.add_argument("--max-epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="habitlens", description="Predictability of sequential app use")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name: str, help_text: str, *, data: bool = True, train: bool = False) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, description=help_text)
        _common_args(sub)
        if data:
            _data_args(sub)
        if train:
            _train_args(sub)
        return sub

    simulate = command("simulate", "Generate a synthetic cohort and its ground-truth manifest", data=False)
    for key, flag in SIMULATE_FLAGS.items():
        simulate.add_argument(flag, dest=key, type=type(SIMULATE_DEFAULTS[key]))
    simulate.add_argument("--out", type=Path, help="Cohort CSV path (default: <out-dir>/cohort.csv)")

    command("ingest", "Clean, filter and window an app log", train=True)
    command("train-global", "Search and train the pooled model", train=True)
    command("train-personal", "Search and train one model per person", train=True)

    finetune = command("finetune", "Adapt a global model to each person", train=True)
    finetune.add_argument("--model", type=Path, required=True, help="Global model checkpoint")
    finetune.add_argument("--mode", choices=("full", "frozen"), default="full")

    crosseval = command("crosseval", "Score person-specific models on every person", train=True)
    crosseval.add_argument("--models", type=Path, help="Directory of personal checkpoints (trained if absent)")

    sweep = command("sweep", "Retrain the global model across window lengths", train=True)
    sweep.add_argument("--model", type=Path, required=True, help="Global model checkpoint")
    sweep.add_argument("--lengths", default="1-20,50", help="Comma-separated lengths and ranges")

    ngram = command("ngram", "Most frequent n-grams and their social transition probability")
    ngram.add_argument("--n", type=int, default=3)
    ngram.add_argument("--top", type=int, default=20)

    command("descriptives", "Usage statistics before and after cleaning")

    correlate = command("correlate", "Correlate per-person AUC with usage volume")
    correlate.add_argument("--results", type=Path, nargs="+", required=True, help="Per-person result CSVs")

    report = command("report", "Aggregate per-person results of a run directory", data=False)
    report.add_argument("--run-dir", type=Path, help="Directory with *_per_person.csv files (default: --out-dir)")
    return parser


@dataclass
class Invocation:
    args: argparse.Namespace
    document: dict[str, dict[str, Any]]
    runtime: RuntimeConfig
    manifest: RunManifest

    @property
    def out_dir(self) -> Path:
        return self.args.out_dir

    def section(self, name: str, defaults: Mapping[str, Any]) -> dict[str, Any]:
        flags = {key: getattr(self.args, key, None) for key in defaults}
        settings = merge_settings(defaults, self.document.get(name), flags)
        self.manifest.config[name] = settings
        return settings

    def output(self, frame: pd.DataFrame, name: str) -> Path:
        path = write_csv(frame, self.out_dir / name)
        self.manifest.add_output(path, self.out_dir)
        return path


def _optional_path(value: Any) -> Path | None:
    return Path(value) if value else None


def _load_context(inv: Invocation) -> tuple[ExperimentContext, frozenset[str]]:
    settings = inv.section("cohort", COHORT_DEFAULTS)
    with inv.manifest.stage("ingest"):
        events = read_log(inv.args.data, settings["max_malformed"])
        inv.manifest.add_input(inv.args.data)
        cleaning = CleaningConfig.from_files(
            _optional_path(settings["blocked_apps"]),
            _optional_path(settings["system_ui_patterns"]),
            filter_system=not settings["keep_system"],
        )
        social_file = _optional_path(settings["social_apps"])
        social = frozenset(a.lower() for a in load_list_file(social_file)) if social_file else DEFAULT_SOCIAL_APPS
        cohort = CohortConfig(
            min_days=int(settings["min_days"]),
            truncate_days=int(settings["truncate_days"]),
            min_sessions=int(settings["min_sessions"]),
            min_social_fraction=float(settings["min_social_fraction"]),
            social_apps=social,
        )
        ctx = ExperimentContext.build(events, cleaning, cohort)
    inv.manifest.config["split_hash"] = ctx.split_fingerprint
    return ctx, social


def _plan(inv: Invocation, regime: str, ctx: ExperimentContext, **overrides) -> ExperimentPlan:
    train = inv.section("train", TRAIN_DEFAULTS)
    settings = {
        "regime": regime,
        "architecture": train["arch"],
        "seq_len": int(train["seq_len"]),
        "same_day": bool(train["same_day"]),
        "weighted": bool(train["weighted"]),
        "filter_system": not inv.manifest.config["cohort"]["keep_system"],
        "hpo_budget": int(train["hpo_budget"]),
        "random_starts": int(train["random_starts"]),
        "max_epochs": int(train["max_epochs"]),
        "batch_size": int(train["batch_size"]),
        "patience": int(train["patience"]),
        "seed": inv.runtime.seed,
        "workers": inv.runtime.workers,
        "split_hash": ctx.split_fingerprint,
    }
    return ExperimentPlan(**(settings | overrides))


def _write_result(inv: Invocation, result: RegimeResult) -> None:
    label = result.label
    inv.output(result.per_person_frame(), f"{label}_per_person.csv")
    inv.output(result.distribution_frame(), f"{label}_distribution.csv")
    if result.pooled is not None:
        inv.output(pd.DataFrame([result.pooled.as_row()]), f"{label}_pooled.csv")
    if result.model is not None and result.model.trials is not None:
        inv.output(result.model.trials.to_frame(), f"{label}_trials.csv")
    skipped = pd.DataFrame(sorted(result.skipped.items()), columns=["user_id", "reason"])
    inv.output(skipped, f"{label}_skipped.csv")


def _save_model(inv: Invocation, model: TrainedModel, path: Path, ctx: ExperimentContext, label: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "label": label,
        "config": model.config,
        "split_hash": ctx.split_fingerprint,
        "vocab": ctx.vocab.apps,
        "seed": inv.runtime.seed,
    }
    save_checkpoint(path, model.spec, model.params, metadata)
    inv.manifest.add_output(path, inv.out_dir)


def _load_model(path: Path, ctx: ExperimentContext) -> tuple[TrainedModel, dict[str, Any]]:
    spec, params, metadata = load_checkpoint(path)
    if Vocab(metadata.get("vocab", [])) != ctx.vocab:
        raise VocabularyError(f"{path} was trained with a different vocabulary")
    return TrainedModel(spec, params, dict(metadata.get("config", {}))), metadata


def parse_lengths(text: str) -> list[int]:
    """
    ``"1-3,50"`` -> ``[1, 2, 3, 50]``.
    """
    lengths: list[int] = []
    try:
        for part in text.split(","):
            low, sep, high = part.strip().partition("-")
            lengths.extend(range(int(low), int(high) + 1) if sep else [int(low)])
    except ValueError as e:
        raise ConfigError(f"invalid length list '{text}'") from e
    if not lengths or min(lengths) < 1:
        raise ConfigError(f"lengths must be positive, got '{text}'")
    return sorted(set(lengths))


def cmd_simulate(inv: Invocation) -> None:
    settings = inv.section("simulate", SIMULATE_DEFAULTS)
    cfg = SynthConfig(**settings, seed=inv.runtime.seed)
    with inv.manifest.stage("simulate"):
        cohort = generate_cohort(cfg, inv.runtime.workers)
    csv_path = inv.args.out or inv.out_dir / "cohort.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    for path in cohort.write(csv_path):
        inv.manifest.add_output(path, inv.out_dir)


def cmd_ingest(inv: Invocation) -> None:
    ctx, _ = _load_context(inv)
    train = inv.section("train", TRAIN_DEFAULTS)
    inv.out_dir.mkdir(parents=True, exist_ok=True)
    cohort_csv = inv.out_dir / "cohort.csv"
    cohort_csv.write_bytes(ctx.cohort.to_csv_bytes())
    inv.manifest.add_output(cohort_csv, inv.out_dir)
    inv.output(ctx.cohort.exclusions, "exclusions.csv")
    inv.output(ctx.cohort.summaries.reset_index(), "users.csv")
    tallies = pd.DataFrame(sorted(ctx.cleaning_tallies.items()), columns=["rule", "removed"])
    inv.output(tallies, "cleaning.csv")
    with inv.manifest.stage("dataset"):
        dataset = ctx.dataset(int(train["seq_len"]), same_day=bool(train["same_day"]))
        paths = save_dataset(
            inv.out_dir / f"dataset_L{train['seq_len']}", dataset, ctx.vocab, source_hash=file_sha256(inv.args.data)
        )
    for path in paths:
        inv.manifest.add_output(path, inv.out_dir)


def cmd_train_global(inv: Invocation) -> None:
    ctx, _ = _load_context(inv)
    plan = _plan(inv, "global", ctx)
    with inv.manifest.stage(plan.label):
        result = run_regime(plan, ctx)
    _write_result(inv, result)
    _save_model(inv, result.model, inv.out_dir / f"{plan.label}.hlck", ctx, plan.label)


def _train_personal(inv: Invocation, ctx: ExperimentContext) -> RegimeResult:
    plan = _plan(inv, "personal", ctx)
    with inv.manifest.stage(plan.label):
        result = run_regime(plan, ctx)
    _write_result(inv, result)
    for uid, model in sorted(result.models.items()):
        _save_model(inv, model, inv.out_dir / "models" / plan.label / f"{uid}.hlck", ctx, plan.label)
    return result


def cmd_train_personal(inv: Invocation) -> None:
    ctx, _ = _load_context(inv)
    _train_personal(inv, ctx)


def _global_plan(inv: Invocation, ctx: ExperimentContext, regime: str) -> tuple[ExperimentPlan, TrainedModel]:
    model, metadata = _load_model(inv.args.model, ctx)
    inv.manifest.add_input(inv.args.model)
    plan = _plan(
        inv,
        regime,
        ctx,
        architecture=model.spec.kind,
        seq_len=model.spec.seq_len,
        split_hash=metadata.get("split_hash"),
    )
    return plan, model


def cmd_finetune(inv: Invocation) -> None:
    ctx, _ = _load_context(inv)
    plan, model = _global_plan(inv, ctx, f"finetune_{inv.args.mode}")
    with inv.manifest.stage(plan.label):
        result = run_regime(plan, ctx, model)
    _write_result(inv, result)


def cmd_crosseval(inv: Invocation) -> None:
    ctx, _ = _load_context(inv)
    if inv.args.models is None:
        personal = _train_personal(inv, ctx)
    else:
        models = {}
        for path in sorted(Path(inv.args.models).glob("*.hlck")):
            models[path.stem], _ = _load_model(path, ctx)
            inv.manifest.add_input(path)
        if not models:
            raise EmptyInputError(f"no checkpoints in {inv.args.models}")
        first = next(iter(models.values())).spec
        plan = _plan(inv, "personal", ctx, architecture=first.kind, seq_len=first.seq_len)
        personal = RegimeResult(plan, per_person={}, models=models)
    with inv.manifest.stage("crosseval"):
        cross = cross_generalization(personal, ctx)
    arch = personal.plan.architecture
    inv.output(cross.to_frame(), f"crosseval_{arch}.csv")
    inv.output(cross.matrix.reset_index(), f"crosseval_{arch}_matrix.csv")
    inv.output(cross.summary_frame(), f"crosseval_{arch}_summary.csv")


def cmd_sweep(inv: Invocation) -> None:
    ctx, _ = _load_context(inv)
    plan, model = _global_plan(inv, ctx, "global")
    lengths = parse_lengths(inv.args.lengths)
    with inv.manifest.stage("sweep"):
        frame = sequence_length_sweep(plan, ctx, model, lengths)
    inv.output(frame, f"sweep_{plan.architecture}.csv")


def cmd_ngram(inv: Invocation) -> None:
    ctx, _ = _load_context(inv)
    with inv.manifest.stage("ngram"):
        report = ngram_transition_report(ctx.cohort, inv.args.n, inv.args.top)
    inv.output(report.pooled, f"ngram{report.n}_pooled.csv")
    inv.output(report.per_user, f"ngram{report.n}_per_user.csv")


def cmd_descriptives(inv: Invocation) -> None:
    ctx, social = _load_context(inv)
    with inv.manifest.stage("descriptives"):
        descriptives = compute_descriptives(ctx.raw_events, ctx.cohort, social)
    inv.output(descriptives.user_summary, "descriptives_users.csv")
    inv.output(descriptives.app_table, "descriptives_apps.csv")
    inv.output(descriptives.per_user, "descriptives_per_user.csv")


def _result_label(path: Path) -> str:
    return path.stem.removesuffix("_per_person")


def cmd_correlate(inv: Invocation) -> None:
    ctx, _ = _load_context(inv)
    aucs = {}
    for path in inv.args.results:
        inv.manifest.add_input(path)
        aucs[_result_label(path)] = {uid: r.auc for uid, r in read_per_person(path).items()}
    inv.output(predictability_frequency_correlations(aucs, ctx.cohort.summaries), "correlations.csv")


def cmd_report(inv: Invocation) -> None:
    run_dir = inv.args.run_dir or inv.out_dir
    paths = sorted(Path(run_dir).glob("*_per_person.csv"))
    if not paths:
        raise EmptyInputError(f"no per-person results in {run_dir}")
    per_regime = {}
    for path in paths:
        inv.manifest.add_input(path)
        per_regime[_result_label(path)] = read_per_person(path)

    tables = []
    for label in sorted(per_regime):
        table = distribution_frame(per_regime[label])
        table.insert(0, "regime", label)
        tables.append(table)
    inv.output(pd.concat(tables, ignore_index=True), "report_distribution.csv")
    inv.output(auc_long_frame(per_regime), "report_auc_long.csv")

    aucs = {label: {uid: r.auc for uid, r in reports.items()} for label, reports in per_regime.items()}
    comparisons = [regime_comparison(aucs, ref) for ref in sorted(aucs) if ref.startswith("global_")]
    if comparisons:
        inv.output(pd.concat(comparisons, ignore_index=True), "report_fraction_improved.csv")


COMMANDS: dict[str, Callable[[Invocation], None]] = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "train-global": cmd_train_global,
    "train-personal": cmd_train_personal,
    "finetune": cmd_finetune,
    "crosseval": cmd_crosseval,
    "sweep": cmd_sweep,
    "ngram": cmd_ngram,
    "descriptives": cmd_descriptives,
    "correlate": cmd_correlate,
    "report": cmd_report,
}


def _invocation(args: argparse.Namespace) -> Invocation:
    document = load_config_document(args.config) if args.config else {}
    runtime_section = document.get("runtime", {})
    workers = args.jobs or runtime_section.get("workers") or default_workers()
    runtime = RuntimeConfig(workers=int(workers), seed=resolve_seed(args.seed, runtime_section))
    manifest = RunManifest(args.command, __version__, runtime.seed, config={"runtime": {"workers": runtime.workers}})
    return Invocation(args, document, runtime, manifest)


def run_command(argv: Sequence[str]) -> int:
    """
    Run one subcommand and return its exit code.
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return ExitCode.SUCCESS if e.code in (0, None) else ExitCode.USAGE

    init_tracing(args.traces)
    logger.info("command started", extra={"id": "start", "command": args.command})
    try:
        inv = _invocation(args)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](inv)
        inv.manifest.write(args.out_dir)
    except HabitlensError as e:
        logger.error("command failed", extra={"id": "error", "error_code": e.error_code, "reason": str(e)})
        sys.stderr.write(f"habitlens {args.command}: error: {e}\n")
        return ExitCode.FAILURE
    except OSError as e:
        logger.error("command failed", extra={"id": "error", "reason": str(e)})
        sys.stderr.write(f"habitlens {args.command}: error: {e}\n")
        return ExitCode.FAILURE
    logger.info("command finished", extra={"id": "stop", "command": args.command})
    return ExitCode.SUCCESS


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))
