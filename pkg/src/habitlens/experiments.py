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
Experiment runners.

Every regime consumes the same ``ExperimentContext``: one cohort, one split
table and one vocabulary. Per-person work runs as independent jobs on a
``Runtime``; results are keyed by user id.
"""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Literal

import numpy as np
import pandas as pd

from habitlens.dataset import (
    DEFAULT_FRACTIONS,
    DEFAULT_SEQ_LEN,
    SPLITS,
    SequenceDataset,
    SplitIndex,
    Vocab,
    build_cohort_dataset,
    build_vocab,
    split_hash,
    split_table,
    tabular_features,
    training_app_ids,
)
from habitlens.errors import ConfigError, DegeneratePersonError, EmptyInputError, SplitError, TrainingError
from habitlens.hpo import SPACES, HyperConfig, TrialLog, bayesian_search, spec_from_config
from habitlens.ingest import (
    DEFAULT_SOCIAL_APPS,
    CleaningConfig,
    CohortConfig,
    CohortLog,
    build_cohort,
    summarize_users,
    with_social_labels,
)
from habitlens.metrics import EvalReport, evaluate, fraction_improved, pearson_r, roc_auc
from habitlens.orchestration import Concurrency, Invoke, JobResults, Runtime
from habitlens.reports import distribution_frame, per_person_frame
from habitlens.seeding import derive_seed
from habitlens.tensorcore import ModelSpec, Parameters
from habitlens.training import (
    FINETUNE_LR,
    FitHistory,
    TrainConfig,
    fine_tune_frozen,
    fine_tune_full,
    fit,
    fit_logistic_baseline,
    predict,
)

logger = logging.getLogger(__name__)

Regime = Literal["global", "personal", "finetune_full", "finetune_frozen", "baseline_lr"]
REGIMES = ("global", "personal", "finetune_full", "finetune_frozen", "baseline_lr")
ARCHITECTURES = ("lstm", "transformer")
SWEEP_LENGTHS = (*range(1, 21), 50)
FREQUENCY_MEASURES = ("sessions", "social_sessions", "social_fraction")


@dataclass(frozen=True)
class ExperimentPlan:
    """
    Parameters
    ----------
    regime : Regime
        Modeling strategy.
    architecture : str
        ``lstm`` or ``transformer``; ignored by ``baseline_lr``.
    seq_len : int
        Predecessor window length.
    same_day : bool
        Restrict windows to the target's calendar date.
    weighted : bool
        Class-weighted training loss.
    filter_system : bool
        Drop system-UI events during cleaning; ``False`` selects the
        alternative cleaning variant.
    hpo_budget, random_starts : int
        Trials per search and how many of them are random.
    max_epochs, batch_size, patience : int
        Training loop settings.
    seed : int
        Root seed; every job derives its own stream from it.
    workers : int
        Size of the per-person worker pool.
    split_hash : str | None
        Required split fingerprint, checked before any training.
    """

    regime: Regime = "global"
    architecture: str = "lstm"
    seq_len: int = DEFAULT_SEQ_LEN
    same_day: bool = False
    weighted: bool = False
    filter_system: bool = True
    hpo_budget: int = 20
    random_starts: int = 5
    max_epochs: int = 1000
    batch_size: int = 1024
    patience: int = 5
    seed: int = 0
    workers: int = 1
    split_hash: str | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime '{self.regime}', expected one of {REGIMES}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture '{self.architecture}', expected one of {ARCHITECTURES}")
        if not self.hpo_budget >= self.random_starts >= 1:
            raise ConfigError("need hpo_budget >= random_starts >= 1")
        if self.seq_len < 1 or self.workers < 1:
            raise ConfigError("seq_len and workers must be positive")

    @property
    def label(self) -> str:
        return self.regime if self.regime == "baseline_lr" else f"{self.regime}_{self.architecture}"

    def cleaning(self) -> CleaningConfig:
        return CleaningConfig(filter_system=self.filter_system)


@dataclass
class ExperimentContext:
    """
    Cohort, split table and vocabulary shared by all regimes, plus cached
    sequence datasets per ``(seq_len, same_day)``.
    """

    cohort: CohortLog
    splits: dict[str, SplitIndex]
    vocab: Vocab
    raw_events: pd.DataFrame | None = None
    cleaning_tallies: dict[str, int] = field(default_factory=dict)
    _datasets: dict[tuple[int, bool], SequenceDataset] = field(default_factory=dict, repr=False)

    @classmethod
    def build(
        cls,
        events: pd.DataFrame,
        cleaning: CleaningConfig | None = None,
        cohort: CohortConfig | None = None,
        fractions: Sequence[float] = DEFAULT_FRACTIONS,
    ) -> "ExperimentContext":
        log, tallies = build_cohort(events, cleaning, cohort)
        if not log.user_ids:
            raise EmptyInputError("no user passed the cohort filters")
        splits = split_table(log, fractions)
        vocab = build_vocab(training_app_ids(log, splits))
        return cls(log, splits, vocab, raw_events=events, cleaning_tallies=tallies)

    @property
    def split_fingerprint(self) -> str:
        return split_hash(self.splits)

    def check_splits(self, expected: str | None) -> None:
        if expected is not None and expected != self.split_fingerprint:
            raise SplitError(f"split table {self.split_fingerprint[:12]} does not match the required {expected[:12]}")

    def dataset(self, seq_len: int = DEFAULT_SEQ_LEN, *, same_day: bool = False) -> SequenceDataset:
        key = (seq_len, same_day)
        if key not in self._datasets:
            self._datasets[key] = build_cohort_dataset(
                self.cohort, self.splits, self.vocab, seq_len, same_day=same_day
            )
        return self._datasets[key]

    def plan_dataset(self, plan: ExperimentPlan) -> SequenceDataset:
        self.check_splits(plan.split_hash)
        return self.dataset(plan.seq_len, same_day=plan.same_day)


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: Parameters
    config: HyperConfig
    trials: TrialLog | None = None
    history: FitHistory | None = None


@dataclass
class RegimeResult:
    """
    Outcome of one regime.

    ``model`` holds the pooled model of the global regime; ``models`` the
    per-person models of the others.
    """

    plan: ExperimentPlan
    per_person: dict[str, EvalReport]
    pooled: EvalReport | None = None
    skipped: dict[str, str] = field(default_factory=dict)
    model: TrainedModel | None = None
    models: dict[str, TrainedModel] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.plan.label

    def aucs(self) -> dict[str, float]:
        return {uid: r.auc for uid, r in self.per_person.items()}

    def per_person_frame(self) -> pd.DataFrame:
        return per_person_frame(self.per_person)

    def distribution_frame(self) -> pd.DataFrame:
        return distribution_frame(self.per_person)


def train_config(plan: ExperimentPlan, lr: float, *keys: object) -> TrainConfig:
    return TrainConfig(
        max_epochs=plan.max_epochs,
        batch_size=plan.batch_size,
        patience=plan.patience,
        lr=float(lr),
        shuffle_seed=derive_seed(plan.seed, *keys),
        weighted=plan.weighted,
    )


def search_model(
    plan: ExperimentPlan,
    vocab_size: int,
    train: SequenceDataset,
    val: SequenceDataset,
    *keys: object,
) -> TrainedModel | None:
    """
    Hyperparameter search on validation AUC; ``None`` if every trial failed.
    """
    fitted: list[tuple[ModelSpec, Parameters, HyperConfig] | None] = []

    def objective(config: HyperConfig) -> EvalReport:
        trial = len(fitted)
        fitted.append(None)
        spec = spec_from_config(plan.architecture, config, vocab_size, plan.seq_len)
        cfg = train_config(plan, config["lr"], *keys, "trial", trial)
        params, _ = fit(spec, train, val, cfg, init_seed=derive_seed(plan.seed, *keys, "init", trial))
        fitted[trial] = (spec, params, config)
        return evaluate(predict(params, spec, val), val.targets)

    space = SPACES[plan.architecture]
    best, trials = bayesian_search(
        space, objective, plan.hpo_budget, plan.random_starts, derive_seed(plan.seed, *keys, "search")
    )
    if best is None:
        return None
    spec, params, config = fitted[trials.best_index]
    return TrainedModel(spec, params, config, trials)


def _person_splits(dataset: SequenceDataset, user_id: str) -> tuple[SequenceDataset, ...]:
    person = dataset.user(user_id)
    return tuple(person.split(name) for name in SPLITS)


def _require_both_classes(user_id: str, **parts: SequenceDataset) -> None:
    for name, part in parts.items():
        if np.unique(part.targets).size < 2:
            raise DegeneratePersonError(f"user '{user_id}' has a single-class {name} split")


def per_person_reports(scores: np.ndarray, test: SequenceDataset) -> dict[str, EvalReport]:
    """
    Split pooled test scores into one report per person.
    """
    return {uid: evaluate(scores[test.user_ids == uid], test.targets[test.user_ids == uid]) for uid in test.users}


def _run_people(plan: ExperimentPlan, job, users: Sequence[str]) -> JobResults:
    block = Concurrency.of(Invoke(uid, partial(job, uid)) for uid in users)
    return Runtime(plan.workers).run(block)


def _person_result(plan: ExperimentPlan, results: JobResults) -> RegimeResult:
    outcome = RegimeResult(plan, per_person={uid: report for uid, (report, _) in results.values.items()})
    outcome.models = {uid: model for uid, (_, model) in results.values.items()}
    outcome.skipped = {uid: error.message for uid, error in results.errors.items()}
    _log_result(outcome)
    return outcome


def _log_result(result: RegimeResult) -> None:
    defined = [a for a in result.aucs().values() if not math.isnan(a)]
    logger.info(
        "regime finished",
        extra={
            "id": "regime",
            "regime": result.label,
            "pooled_auc": result.pooled.auc if result.pooled else None,
            "mean_person_auc": float(np.mean(defined)) if defined else None,
            "persons": len(result.per_person),
            "skipped": len(result.skipped),
        },
    )


def run_global(plan: ExperimentPlan, ctx: ExperimentContext) -> RegimeResult:
    """
    Search and train one model on the pooled data of every person.

    The winner is scored on the pooled test set and on each person's test
    rows.
    """
    dataset = ctx.plan_dataset(plan)
    train, val, test = (dataset.split(name) for name in SPLITS)
    model = search_model(plan, ctx.vocab.size, train, val, "global", plan.architecture)
    if model is None:
        raise TrainingError(f"every one of the {plan.hpo_budget} global trials failed")
    scores = predict(model.params, model.spec, test)
    result = RegimeResult(plan, per_person_reports(scores, test), pooled=evaluate(scores, test.targets), model=model)
    _log_result(result)
    return result


def _personal_job(plan: ExperimentPlan, dataset: SequenceDataset, vocab_size: int, user_id: str):
    train, val, test = _person_splits(dataset, user_id)
    _require_both_classes(user_id, train=train, val=val)
    model = search_model(plan, vocab_size, train, val, "personal", plan.architecture, user_id)
    if model is None:
        raise DegeneratePersonError(f"user '{user_id}': every trial failed")
    return evaluate(predict(model.params, model.spec, test), test.targets), model


def run_personal(plan: ExperimentPlan, ctx: ExperimentContext) -> RegimeResult:
    """
    Search and train one model per person on that person's splits.

    Persons whose training or validation split holds a single class are
    skipped and listed in ``skipped``.
    """
    dataset = ctx.plan_dataset(plan)
    job = partial(_personal_job, plan, dataset, ctx.vocab.size)
    return _person_result(plan, _run_people(plan, job, dataset.users))


def _require_global(global_model: TrainedModel | None, plan: ExperimentPlan) -> TrainedModel:
    if global_model is None:
        raise ConfigError(f"regime '{plan.regime}' needs a trained global model")
    if global_model.spec.seq_len != plan.seq_len:
        raise ConfigError(f"global model uses L={global_model.spec.seq_len}, plan asks for L={plan.seq_len}")
    return global_model


def _finetune_full_job(plan: ExperimentPlan, dataset: SequenceDataset, global_model: TrainedModel, user_id: str):
    train, val, test = _person_splits(dataset, user_id)
    cfg = train_config(plan, FINETUNE_LR, "finetune_full", user_id)
    params, history = fine_tune_full(global_model.spec, global_model.params, train, val, cfg)
    model = TrainedModel(global_model.spec, params, {**global_model.config, "lr": FINETUNE_LR}, history=history)
    return evaluate(predict(params, model.spec, test), test.targets), model


def run_finetune_full(plan: ExperimentPlan, ctx: ExperimentContext, global_model: TrainedModel) -> RegimeResult:
    """
    Continue training the whole global model on each person at a low learning rate.
    """
    dataset = ctx.plan_dataset(plan)
    job = partial(_finetune_full_job, plan, dataset, _require_global(global_model, plan))
    return _person_result(plan, _run_people(plan, job, dataset.users))


def _finetune_frozen_job(plan: ExperimentPlan, dataset: SequenceDataset, global_model: TrainedModel, user_id: str):
    train, val, test = _person_splits(dataset, user_id)
    _require_both_classes(user_id, val=val)
    try:
        tuned = fine_tune_frozen(
            global_model.spec,
            global_model.params,
            train,
            val,
            train_config(plan, FINETUNE_LR, "finetune_frozen", user_id),
            budget=plan.hpo_budget,
            random_starts=plan.random_starts,
            seed=derive_seed(plan.seed, "finetune_frozen", user_id, "search"),
        )
    except TrainingError as e:
        raise DegeneratePersonError(f"user '{user_id}': {e}") from e
    model = TrainedModel(tuned.spec, tuned.params, tuned.config, tuned.trials)
    return evaluate(predict(tuned.params, tuned.spec, test), test.targets), model


def run_finetune_frozen(plan: ExperimentPlan, ctx: ExperimentContext, global_model: TrainedModel) -> RegimeResult:
    """
    Retrain a searched dense head per person on the frozen global trunk.
    """
    dataset = ctx.plan_dataset(plan)
    job = partial(_finetune_frozen_job, plan, dataset, _require_global(global_model, plan))
    return _person_result(plan, _run_people(plan, job, dataset.users))


def run_baseline_lr(plan: ExperimentPlan, ctx: ExperimentContext) -> RegimeResult:
    """
    Pooled logistic regression over one-hot windows, scored like the global model.
    """
    dataset = ctx.plan_dataset(plan)
    train, val, test = (dataset.split(name) for name in SPLITS)
    baseline = fit_logistic_baseline(
        tabular_features(train), train.targets, tabular_features(val), val.targets
    )
    scores = baseline.model.predict_proba(tabular_features(test))
    result = RegimeResult(plan, per_person_reports(scores, test), pooled=evaluate(scores, test.targets))
    _log_result(result)
    return result


def run_regime(plan: ExperimentPlan, ctx: ExperimentContext, global_model: TrainedModel | None = None) -> RegimeResult:
    if plan.regime == "global":
        return run_global(plan, ctx)
    if plan.regime == "personal":
        return run_personal(plan, ctx)
    if plan.regime == "finetune_full":
        return run_finetune_full(plan, ctx, global_model)
    if plan.regime == "finetune_frozen":
        return run_finetune_frozen(plan, ctx, global_model)
    return run_baseline_lr(plan, ctx)


def regime_comparison(aucs: Mapping[str, Mapping[str, float]], reference: str) -> pd.DataFrame:
    """
    Share of persons on whom each other regime beats the reference AUC.

    ``aucs`` maps regime labels to per-person AUCs.
    """
    rows = [
        {"reference": reference, "regime": label, "fraction_improved": fraction_improved(aucs[reference], aucs[label])}
        for label in sorted(aucs)
        if label != reference
    ]
    return pd.DataFrame(rows, columns=["reference", "regime", "fraction_improved"])


@dataclass
class CrossMatrix:
    """
    AUC of person ``i``'s model (rows) on person ``j``'s test set (columns).
    """

    matrix: pd.DataFrame

    @property
    def diagonal(self) -> pd.Series:
        return pd.Series(np.diag(self.matrix.to_numpy()), index=self.matrix.index)

    def _off_diagonal(self) -> np.ndarray:
        values = self.matrix.to_numpy()
        return values[~np.eye(len(values), dtype=bool)]

    @property
    def diagonal_mean(self) -> float:
        return float(np.nanmean(self.diagonal)) if self.diagonal.notna().any() else math.nan

    @property
    def off_diagonal_mean(self) -> float:
        off = self._off_diagonal()
        return float(np.nanmean(off)) if np.isfinite(off).any() else math.nan

    @property
    def excluded(self) -> int:
        return int(np.isnan(self.matrix.to_numpy()).sum())

    @property
    def gap(self) -> float:
        return self.diagonal_mean - self.off_diagonal_mean

    def to_frame(self) -> pd.DataFrame:
        long = self.matrix.stack(future_stack=True).rename("auc").reset_index()
        long.columns = ["model_user", "test_user", "auc"]
        return long

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "diagonal_mean": self.diagonal_mean,
                    "off_diagonal_mean": self.off_diagonal_mean,
                    "gap": self.gap,
                    "excluded": self.excluded,
                    "persons": len(self.matrix),
                }
            ]
        )


def _cross_row(model: TrainedModel, tests: Mapping[str, SequenceDataset]) -> dict[str, float]:
    return {uid: roc_auc(predict(model.params, model.spec, test), test.targets) for uid, test in tests.items()}


def cross_generalization(
    personal: RegimeResult, ctx: ExperimentContext, workers: int | None = None
) -> CrossMatrix:
    """
    Score every person-specific model on every person's test set.

    Undefined AUCs stay ``NaN`` and are counted in ``CrossMatrix.excluded``.
    """
    dataset = ctx.plan_dataset(personal.plan)
    users = sorted(personal.models)
    tests = {uid: dataset.user(uid).split("test") for uid in users}
    block = Concurrency.of(Invoke(uid, partial(_cross_row, personal.models[uid], tests)) for uid in users)
    rows = Runtime(workers or personal.plan.workers).run(block).values
    matrix = pd.DataFrame([[rows[i][j] for j in users] for i in users], index=users, columns=users, dtype=float)
    matrix.index.name, matrix.columns.name = "model_user", "test_user"
    cross = CrossMatrix(matrix)
    logger.info(
        "cross evaluation finished",
        extra={
            "id": "crosseval",
            "persons": len(users),
            "diagonal_mean": cross.diagonal_mean,
            "off_diagonal_mean": cross.off_diagonal_mean,
        },
    )
    return cross


def _sweep_job(plan: ExperimentPlan, dataset: SequenceDataset, global_model: TrainedModel, seq_len: int):
    train, val, test = (dataset.split(name) for name in SPLITS)
    spec = replace(global_model.spec, seq_len=seq_len)
    cfg = train_config(plan, global_model.config["lr"], "sweep", seq_len)
    params, _ = fit(spec, train, val, cfg, init_seed=derive_seed(plan.seed, "sweep", seq_len, "init"))
    return evaluate(predict(params, spec, test), test.targets)


def sequence_length_sweep(
    plan: ExperimentPlan,
    ctx: ExperimentContext,
    global_model: TrainedModel,
    lengths: Sequence[int] = SWEEP_LENGTHS,
) -> pd.DataFrame:
    """
    Retrain the global architecture for each window length.

    Hyperparameters are those of ``global_model``; only the window changes.
    Returns one row per length with the pooled test metrics.
    """
    ctx.check_splits(plan.split_hash)
    datasets = {L: ctx.dataset(L, same_day=plan.same_day) for L in lengths}
    block = Concurrency.of(
        Invoke(f"L{L:04d}", partial(_sweep_job, plan, datasets[L], global_model, L)) for L in lengths
    )
    results = Runtime(plan.workers).run(block).values
    rows = [{"seq_len": L, **results[f"L{L:04d}"].as_row()} for L in lengths]
    frame = pd.DataFrame(rows)[["seq_len", "auc", "acc", "pre", "rec", "f1", "n"]]
    logger.info("sweep finished", extra={"id": "sweep", "lengths": len(lengths), "best_auc": frame["auc"].max()})
    return frame


@dataclass
class NgramReport:
    """
    ``pooled`` has columns ``ngram, probability, frequency``; ``per_user``
    additionally ``user_id`` first.
    """

    n: int
    pooled: pd.DataFrame
    per_user: pd.DataFrame


NGRAM_SEPARATOR = ", "


def ngram_occurrences(events: pd.DataFrame, n: int = 3) -> pd.DataFrame:
    """
    Every n-gram occurrence with a successor, per user, and whether the
    successor is a social app. Windows never cross users.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    frame = events[["user_id", "app_id", "is_social"]].reset_index(drop=True)
    grouped = frame.groupby("user_id", sort=False)
    parts = [grouped["app_id"].shift(-k) for k in range(n)]
    follower = grouped["is_social"].shift(-n)
    has_follower = follower.notna()
    ngram = parts[0] if n == 1 else parts[0].str.cat(parts[1:], sep=NGRAM_SEPARATOR)
    return pd.DataFrame(
        {
            "user_id": frame["user_id"][has_follower],
            "ngram": ngram[has_follower],
            "social_next": follower[has_follower].astype(bool),
        }
    ).reset_index(drop=True)


def _rank_ngrams(occurrences: pd.DataFrame, keys: list[str], top_k: int) -> pd.DataFrame:
    columns = [*keys, "probability", "frequency"]
    if occurrences.empty:
        return pd.DataFrame(columns=columns)
    counts = occurrences.groupby(keys, sort=True)["social_next"].agg(frequency="size", social="sum").reset_index()
    counts["probability"] = counts["social"] / counts["frequency"]
    group = keys[:-1]
    order = [*group, "frequency", "ngram"]
    ranked = counts.sort_values(order, ascending=[True] * len(group) + [False, True], kind="mergesort")
    ranked = ranked.groupby(group, sort=False).head(top_k) if group else ranked.head(top_k)
    return ranked[columns].reset_index(drop=True)


def ngram_transition_report(cohort: CohortLog, n: int = 3, top_k: int = 20) -> NgramReport:
    """
    Most frequent n-grams and the probability that a social app follows them.

    Streams are the full cleaned per-user logs, windows may cross days.
    """
    occurrences = ngram_occurrences(cohort.events, n)
    report = NgramReport(
        n=n,
        pooled=_rank_ngrams(occurrences, ["ngram"], top_k),
        per_user=_rank_ngrams(occurrences, ["user_id", "ngram"], top_k),
    )
    logger.info("n-grams counted", extra={"id": "ngram", "n": n, "occurrences": len(occurrences)})
    return report


def predictability_frequency_correlations(
    aucs: Mapping[str, Mapping[str, float]], summaries: pd.DataFrame
) -> pd.DataFrame:
    """
    Pearson r between per-person AUC and usage volume.

    Parameters
    ----------
    aucs : Mapping[str, Mapping[str, float]]
        Per-person AUCs keyed by regime label.
    summaries : pd.DataFrame
        Cohort user summaries indexed by user id.

    Returns
    -------
    pd.DataFrame
        Columns ``regime, measure, r, n, undefined``. ``r`` is ``NaN`` when
        fewer than three persons have a defined AUC or a vector is constant.
    """
    rows = []
    for label in sorted(aucs):
        per_person = aucs[label]
        users = [u for u in sorted(per_person) if u in summaries.index and not math.isnan(per_person[u])]
        auc_values = np.array([per_person[u] for u in users])
        for measure in FREQUENCY_MEASURES:
            r = math.nan
            if len(users) >= 3:
                r = pearson_r(auc_values, summaries.loc[users, measure].to_numpy(dtype=np.float64))
            rows.append({"regime": label, "measure": measure, "r": r, "n": len(users), "undefined": math.isnan(r)})
    return pd.DataFrame(rows, columns=["regime", "measure", "r", "n", "undefined"])


@dataclass
class Descriptives:
    """
    Parameters
    ----------
    user_summary : pd.DataFrame
        ``stage, measure, mean, median, sd, n`` for the per-user measures
        before (``raw``) and after (``cohort``) cleaning and filtering.
    app_table : pd.DataFrame
        ``app_id, sessions, session_share, users, user_share`` of the cohort,
        by decreasing session share.
    per_user : pd.DataFrame
        The per-user values behind the summary, for histograms.
    """

    user_summary: pd.DataFrame
    app_table: pd.DataFrame
    per_user: pd.DataFrame


def app_usage_table(events: pd.DataFrame) -> pd.DataFrame:
    columns = ["app_id", "sessions", "session_share", "users", "user_share"]
    if events.empty:
        return pd.DataFrame(columns=columns)
    grouped = events.groupby("app_id", sort=True)
    table = pd.DataFrame({"sessions": grouped.size(), "users": grouped["user_id"].nunique()}).reset_index()
    table["session_share"] = table["sessions"] / len(events)
    table["user_share"] = table["users"] / events["user_id"].nunique()
    table = table.sort_values(["session_share", "app_id"], ascending=[False, True], kind="mergesort")
    return table[columns].reset_index(drop=True)


def compute_descriptives(
    raw_events: pd.DataFrame, cohort: CohortLog, social_apps: frozenset[str] = DEFAULT_SOCIAL_APPS
) -> Descriptives:
    """
    Per-user usage statistics before and after cleaning, and the app table.
    """
    stages = {"raw": summarize_users(with_social_labels(raw_events, social_apps)), "cohort": cohort.summaries}
    per_user, summary = [], []
    for stage, table in stages.items():
        frame = table.reset_index()
        frame.insert(0, "stage", stage)
        per_user.append(frame)
        for measure in ("sessions", "distinct_apps", "social_fraction"):
            values = table[measure].astype(float)
            summary.append(
                {
                    "stage": stage,
                    "measure": measure,
                    "mean": values.mean(),
                    "median": values.median(),
                    "sd": values.std(ddof=1),
                    "n": len(values),
                }
            )
    return Descriptives(
        user_summary=pd.DataFrame(summary, columns=["stage", "measure", "mean", "median", "sd", "n"]),
        app_table=app_usage_table(cohort.events),
        per_user=pd.concat(per_user, ignore_index=True),
    )
