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
from collections import Counter

import numpy as np
import pandas as pd
import pytest

from habitlens.errors import ConfigError
from habitlens.experiments import (
    CrossMatrix,
    ExperimentPlan,
    app_usage_table,
    compute_descriptives,
    ngram_occurrences,
    ngram_transition_report,
    predictability_frequency_correlations,
    regime_comparison,
)
from habitlens.ingest import AppEvent, CohortConfig, events_frame, filter_and_truncate_users

DAY_MS = 86_400_000


def labelled(rows: list[tuple[str, str]]) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=["user_id", "app_id"])
    frame["timestamp"] = np.arange(len(frame), dtype=np.int64) * 1000
    frame["is_social"] = frame["app_id"] == "s"
    return frame


class TestNgrams:
    @pytest.fixture(scope="class")
    def occurrences(self) -> pd.DataFrame:
        return ngram_occurrences(labelled([("u1", a) for a in ["a", "b", "a", "b", "s"]]), n=2)

    def test_occurrences(self, occurrences):
        assert occurrences["ngram"].tolist() == ["a, b", "b, a", "a, b"], "Expected every bigram with a successor"
        assert occurrences["social_next"].tolist() == [False, False, True], "Expected the successor labels"

    def test_pooled_ranking(self):
        events = labelled([("u1", a) for a in ["a", "b", "a", "b", "s"]])
        pooled = ngram_transition_report_from(events, n=2).pooled
        assert pooled["ngram"].tolist() == ["a, b", "b, a"], "Expected n-grams by decreasing frequency"
        assert pooled["frequency"].tolist() == [2, 1], "Unexpected n-gram counts"
        assert pooled["probability"].tolist() == [0.5, 0.0], "Unexpected social-next probabilities"

    def test_windows_stay_within_users(self):
        events = labelled([("u1", "a"), ("u1", "b"), ("u2", "s"), ("u2", "a"), ("u2", "s")])
        found = ngram_occurrences(events, n=2)
        assert found["user_id"].tolist() == ["u2"], "Expected no n-gram spanning two users"
        assert found["ngram"].tolist() == ["s, a"], "Expected only the in-user bigram with a successor"

    def test_per_user_top_k(self):
        events = labelled([("u1", a) for a in "abcabcas"] + [("u2", a) for a in "ssas"])
        per_user = ngram_transition_report_from(events, n=1, top_k=2).per_user
        assert per_user.groupby("user_id").size().to_dict() == {"u1": 2, "u2": 2}, "Expected at most k per user"
        assert list(per_user.columns) == ["user_id", "ngram", "probability", "frequency"], "Unexpected columns"

    def test_invalid_order(self):
        with pytest.raises(ConfigError):
            ngram_occurrences(labelled([("u1", "a")]), n=0)


def ngram_transition_report_from(events: pd.DataFrame, n: int, top_k: int = 20):
    """
    N-gram report of a labelled stream without cohort rules.
    """
    cohort = filter_and_truncate_users(
        events[["user_id", "timestamp", "app_id"]],
        CohortConfig(min_days=1, truncate_days=1, min_sessions=0, min_social_fraction=1e-9, social_apps=frozenset("s")),
    )
    return ngram_transition_report(cohort, n=n, top_k=top_k)


def counting_oracle(streams: dict[str, list[str]], n: int) -> dict[str, tuple[float, int]]:
    counts, social = Counter(), Counter()
    for stream in streams.values():
        for i in range(len(stream) - n):
            gram = ", ".join(stream[i : i + n])
            counts[gram] += 1
            social[gram] += stream[i + n] == "s"
    return {gram: (social[gram] / counts[gram], counts[gram]) for gram in counts}


class TestNgramCountingOracle:
    @pytest.fixture(scope="class", params=[1, 2, 3])
    def n(self, request: pytest.FixtureRequest) -> int:
        return request.param

    def test_random_streams(self, n: int):
        rng = np.random.default_rng(n)
        mismatches = []
        for index in range(100):
            streams = {
                f"u{k}": [*rng.choice(list("abcs"), size=int(rng.integers(0, 30))), "s"]
                for k in range(int(rng.integers(1, 4)))
            }
            events = labelled([(uid, app) for uid, stream in streams.items() for app in stream])
            pooled = ngram_transition_report_from(events, n=n, top_k=1000).pooled
            found = dict(zip(pooled["ngram"], zip(pooled["probability"], pooled["frequency"])))
            if found != counting_oracle(streams, n):
                mismatches.append(index)
        assert not mismatches, f"Expected the counting oracle reproduced, streams {mismatches[:5]} differ"

    def test_hand_counted_trigrams(self):
        events = labelled([("u1", a) for a in ["a", "b", "a", "b", "s"]])
        pooled = ngram_transition_report_from(events, n=3).pooled.set_index("ngram")
        assert pooled.loc["a, b, a", "probability"] == 0.0, "Expected no social app after a, b, a"
        assert pooled.loc["b, a, b", "probability"] == 1.0, "Expected the social app after b, a, b"
        assert pooled["frequency"].tolist() == [1, 1], "Expected each trigram once"


class TestRegimeComparison:
    def test_fraction_improved_over_defined_persons(self):
        aucs = {
            "global_lstm": {"u1": 0.6, "u2": 0.7, "u3": 0.8},
            "personal_lstm": {"u1": 0.7, "u2": 0.6, "u3": math.nan},
            "baseline_lr": {"u1": 0.5, "u2": 0.5, "u3": 0.5},
        }
        frame = regime_comparison(aucs, "global_lstm")
        assert frame["regime"].tolist() == ["baseline_lr", "personal_lstm"], "Expected the other regimes, sorted"
        assert frame["fraction_improved"].tolist() == [0.0, 0.5], "Expected shares over persons with both AUCs"


class TestCrossMatrix:
    @pytest.fixture(scope="class")
    def cross(self) -> CrossMatrix:
        users = ["u1", "u2"]
        return CrossMatrix(pd.DataFrame([[0.9, 0.6], [0.5, math.nan]], index=users, columns=users))

    def test_means(self, cross: CrossMatrix):
        assert cross.diagonal_mean == pytest.approx(0.9), "Expected undefined diagonal cells ignored"
        assert cross.off_diagonal_mean == pytest.approx(0.55), "Unexpected off-diagonal mean"
        assert cross.gap == pytest.approx(0.35), "Expected own-person advantage"
        assert cross.excluded == 1, "Expected one undefined cell"

    def test_long_frame(self, cross: CrossMatrix):
        frame = cross.to_frame()
        assert list(frame.columns) == ["model_user", "test_user", "auc"], "Unexpected columns"
        assert len(frame) == 4, "Expected every cell, undefined included"


class TestCorrelations:
    @pytest.fixture(scope="class")
    def summaries(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"sessions": [100, 200, 300, 400], "social_sessions": [10, 10, 10, 10], "social_fraction": [0.1] * 4},
            index=pd.Index(["u1", "u2", "u3", "u4"], name="user_id"),
        )

    def test_defined_and_constant(self, summaries):
        aucs = {"global_lstm": {"u1": 0.6, "u2": 0.7, "u3": 0.8, "u4": math.nan}}
        frame = predictability_frequency_correlations(aucs, summaries).set_index("measure")
        assert frame.loc["sessions", "r"] == pytest.approx(1.0), "Expected a perfect linear relation"
        assert frame.loc["sessions", "n"] == 3, "Expected undefined AUCs left out"
        assert frame.loc["social_sessions", "undefined"], "Expected a constant measure to be undefined"

    def test_too_few_persons(self, summaries):
        frame = predictability_frequency_correlations({"personal_lstm": {"u1": 0.6, "u2": 0.9}}, summaries)
        assert frame["undefined"].all(), "Expected no correlation from two persons"


class TestDescriptives:
    @pytest.fixture(scope="class")
    def descriptives(self):
        raw = events_frame(
            [AppEvent("u1", k * DAY_MS, "com.whatsapp" if k % 2 else "org.a") for k in range(4)]
            + [AppEvent("u2", k * DAY_MS, "org.a") for k in range(2)]
            + [AppEvent("u3", 0, "org.b")]
        )
        cohort = filter_and_truncate_users(
            raw, CohortConfig(min_days=2, truncate_days=14, min_sessions=2, min_social_fraction=0.4)
        )
        return compute_descriptives(raw, cohort)

    def test_stage_counts(self, descriptives):
        summary = descriptives.user_summary.set_index(["stage", "measure"])
        assert summary.loc[("raw", "sessions"), "n"] == 3, "Expected every raw user"
        assert summary.loc[("cohort", "sessions"), "n"] == 1, "Expected the filtered cohort"
        assert summary.loc[("raw", "sessions"), "mean"] == pytest.approx(7 / 3), "Unexpected raw mean"
        assert summary.loc[("cohort", "social_fraction"), "median"] == pytest.approx(0.5), "Unexpected social share"

    def test_app_table(self, descriptives):
        table = descriptives.app_table
        assert table["app_id"].tolist() == ["com.whatsapp", "org.a"], "Expected apps by decreasing share"
        assert table["session_share"].tolist() == [0.5, 0.5], "Unexpected session shares"
        assert table["user_share"].tolist() == [1.0, 1.0], "Unexpected user shares"

    def test_empty_app_table(self):
        empty = pd.DataFrame({"user_id": [], "app_id": []})
        assert app_usage_table(empty).empty, "Expected an empty table"


@pytest.mark.parametrize(
    "overrides",
    [{"regime": "pooled"}, {"architecture": "gru"}, {"hpo_budget": 2, "random_starts": 3}, {"workers": 0}],
)
def test_invalid_plan(overrides: dict):
    with pytest.raises(ConfigError):
        ExperimentPlan(**overrides)


def test_plan_labels():
    personal = ExperimentPlan(regime="personal", architecture="transformer")
    baseline = ExperimentPlan(regime="baseline_lr", architecture="transformer")
    assert personal.label == "personal_transformer", "Expected regime and architecture"
    assert baseline.label == "baseline_lr", "Expected the baseline without architecture"
