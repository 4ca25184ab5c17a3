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
import math

import numpy as np
import pytest

from habitlens.errors import ConfigError, SplitError
from habitlens.experiments import (
    ExperimentContext,
    ExperimentPlan,
    cross_generalization,
    run_global,
    run_regime,
    sequence_length_sweep,
)
from habitlens.ingest import CohortConfig
from habitlens.synthgen import SynthConfig, generate_cohort

FAST = {"hpo_budget": 2, "random_starts": 2, "max_epochs": 2, "batch_size": 256, "patience": 1, "seq_len": 4}


@pytest.fixture(scope="module")
def ctx() -> ExperimentContext:
    cohort = generate_cohort(
        SynthConfig(n_users=3, days=14, sessions_per_day=40.0, habit_strength=0.7, system_fraction=0.1, seed=2)
    )
    return ExperimentContext.build(cohort.events, cohort=CohortConfig(min_sessions=100))


@pytest.fixture(scope="module")
def global_result(ctx: ExperimentContext):
    return run_global(ExperimentPlan(regime="global", **FAST), ctx)


class TestContext:
    def test_cohort(self, ctx: ExperimentContext):
        assert ctx.cohort.user_ids == ["u000", "u001", "u002"], "Expected every synthetic user retained"
        assert ctx.cleaning_tallies["system"] > 0, "Expected system events removed during cleaning"
        assert ctx.vocab.size > 2, "Expected apps beyond padding and unknown"

    def test_dataset_cache(self, ctx: ExperimentContext):
        assert ctx.dataset(4) is ctx.dataset(4), "Expected one dataset per window setting"
        assert ctx.dataset(4) is not ctx.dataset(4, same_day=True), "Expected same-day windows cached apart"

    def test_split_fingerprint(self, ctx: ExperimentContext):
        ctx.check_splits(ctx.split_fingerprint)
        with pytest.raises(SplitError):
            ctx.plan_dataset(ExperimentPlan(split_hash="0" * 64, **FAST))


class TestGlobal:
    def test_scores_every_person(self, ctx, global_result):
        assert sorted(global_result.per_person) == ctx.cohort.user_ids, "Expected a report per person"
        assert global_result.pooled.n == len(ctx.dataset(4).split("test")), "Expected the pooled test set scored"
        assert len(global_result.model.trials) == FAST["hpo_budget"], "Expected the search budget spent"

    def test_frames(self, global_result):
        assert len(global_result.per_person_frame()) == 3, "Expected one row per person"
        assert global_result.distribution_frame()["metric"].tolist() == ["auc", "acc", "pre", "rec", "f1"], (
            "Expected one distribution row per metric"
        )


class TestPersonRegimes:
    @pytest.mark.parametrize("regime", ["personal", "finetune_full", "finetune_frozen"])
    def test_every_person_reported_or_skipped(self, ctx, global_result, regime: str):
        plan = ExperimentPlan(regime=regime, workers=2, **FAST)
        result = run_regime(plan, ctx, global_result.model)
        assert sorted([*result.per_person, *result.skipped]) == ctx.cohort.user_ids, (
            "Expected each person reported or skipped"
        )
        assert set(result.models) == set(result.per_person), "Expected one model per reported person"

    def test_finetune_needs_global_model(self, ctx):
        with pytest.raises(ConfigError):
            run_regime(ExperimentPlan(regime="finetune_full", **FAST), ctx)

    def test_finetune_needs_matching_window(self, ctx, global_result):
        with pytest.raises(ConfigError):
            run_regime(ExperimentPlan(regime="finetune_full", **(FAST | {"seq_len": 6})), ctx, global_result.model)

    def test_worker_count_does_not_change_results(self, ctx):
        serial = run_regime(ExperimentPlan(regime="personal", workers=1, **FAST), ctx)
        parallel = run_regime(ExperimentPlan(regime="personal", workers=3, **FAST), ctx)
        assert serial.aucs().keys() == parallel.aucs().keys(), "Expected the same persons"
        for uid, auc in serial.aucs().items():
            other = parallel.aucs()[uid]
            assert auc == other or (math.isnan(auc) and math.isnan(other)), f"Expected identical AUC for {uid}"


class TestBaseline:
    def test_pooled_logistic(self, ctx):
        result = run_regime(ExperimentPlan(regime="baseline_lr", **FAST), ctx)
        assert result.label == "baseline_lr", "Unexpected label"
        assert 0.0 <= result.pooled.auc <= 1.0, "Expected a defined pooled AUC"
        assert result.model is None, "Expected no neural model"


class TestAnalyses:
    def test_cross_generalization(self, ctx):
        personal = run_regime(ExperimentPlan(regime="personal", **FAST), ctx)
        cross = cross_generalization(personal, ctx)
        users = sorted(personal.models)
        assert list(cross.matrix.index) == users, "Expected rows per personal model"
        diagonal = cross.diagonal.to_numpy()
        expected = np.array([personal.per_person[u].auc for u in users])
        assert np.allclose(diagonal, expected, equal_nan=True), "Expected the diagonal to equal own test AUCs"

    def test_sequence_length_sweep(self, ctx, global_result):
        frame = sequence_length_sweep(ExperimentPlan(**FAST), ctx, global_result.model, lengths=(1, 3))
        assert frame["seq_len"].tolist() == [1, 3], "Expected one row per length"
        assert list(frame.columns) == ["seq_len", "auc", "acc", "pre", "rec", "f1", "n"], "Unexpected columns"
