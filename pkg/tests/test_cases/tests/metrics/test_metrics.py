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
from sklearn.metrics import roc_auc_score

from habitlens.errors import MetricError
from habitlens.metrics import (
    brute_force_auc,
    confusion_oracle,
    evaluate,
    fraction_improved,
    pearson_r,
    roc_auc,
    summarize_distribution,
    threshold_metrics,
)


class TestRocAuc:
    @pytest.fixture(scope="class", params=[0, 1, 2, 3, 4])
    def test_config(self, request: pytest.FixtureRequest) -> dict:
        rng = np.random.default_rng(request.param)
        n = 200
        labels = rng.integers(0, 2, size=n)
        # Coarse rounding forces ties between classes.
        scores = np.round(rng.random(n) * 0.5 + 0.3 * labels, 1)
        return {"scores": scores, "labels": labels}

    def test_matches_sklearn(self, test_config: dict):
        expected = roc_auc_score(test_config["labels"], test_config["scores"])
        assert roc_auc(test_config["scores"], test_config["labels"]) == pytest.approx(expected, abs=1e-12), (
            "Expected the rank statistic to agree with the reference implementation"
        )

    def test_matches_pair_counting(self, test_config: dict):
        expected = brute_force_auc(test_config["scores"], test_config["labels"])
        assert roc_auc(test_config["scores"], test_config["labels"]) == pytest.approx(expected, abs=1e-12), (
            "Expected ties to count one half"
        )


def small_instances(count: int, seed: int):
    """
    Random instances of 2 to 50 rows with scores on a coarse grid, so ties are common.
    """
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 51))
        yield rng.integers(0, 6, size=n) / 5, rng.integers(0, 2, size=n)


def test_rank_statistic_equals_pair_counting_on_small_instances():
    mismatches = []
    for index, (scores, labels) in enumerate(small_instances(1000, seed=7)):
        ranked, counted = roc_auc(scores, labels), brute_force_auc(scores, labels)
        if not (ranked == counted or (math.isnan(ranked) and math.isnan(counted))):
            mismatches.append((index, ranked, counted))
    assert not mismatches, f"Expected identical AUCs, first mismatches {mismatches[:3]}"


class TestAucSymmetries:
    @pytest.fixture(scope="class", params=[0, 1, 2, 3, 4])
    def test_config(self, request: pytest.FixtureRequest) -> dict:
        rng = np.random.default_rng(request.param)
        labels = rng.permutation(np.repeat([0, 1], 20))
        # Continuous scores are tie-free.
        return {"scores": rng.random(40) + 0.3 * labels, "labels": labels}

    def test_label_flip(self, test_config: dict):
        scores, labels = test_config["scores"], test_config["labels"]
        assert roc_auc(scores, 1 - labels) == pytest.approx(1 - roc_auc(scores, labels), abs=1e-12), (
            "Expected flipped labels to mirror the AUC"
        )

    @pytest.mark.parametrize(
        "transform",
        [np.exp, np.arctan, lambda s: 3 * s - 1, lambda s: s**3],
        ids=["exp", "arctan", "affine", "cube"],
    )
    def test_increasing_transform(self, test_config: dict, transform):
        scores, labels = test_config["scores"], test_config["labels"]
        assert roc_auc(transform(scores), labels) == roc_auc(scores, labels), (
            "Expected a strictly increasing transform to keep the AUC"
        )


class TestRocAucEdges:
    def test_perfect_ranking(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0, "Expected AUC 1 for a perfect ranking"

    def test_reversed_ranking(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0, "Expected AUC 0 for a reversed ranking"

    def test_constant_scores(self):
        assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5, "Expected AUC 0.5 when every pair is tied"

    @pytest.mark.parametrize("labels", [[0, 0, 0], [1, 1, 1]])
    def test_single_class_is_undefined(self, labels: list[int]):
        assert math.isnan(roc_auc([0.1, 0.5, 0.9], labels)), "Expected an undefined AUC"

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            roc_auc([0.1, 0.2], [0, 1, 1])


class TestMajorityClassPredictor:
    """
    Always predicting "not social" at 25.9% prevalence.
    """

    @pytest.fixture(scope="class")
    def results(self) -> dict[str, float]:
        labels = np.array([1] * 259 + [0] * 741)
        return threshold_metrics(np.zeros(1000), labels)

    def test_accuracy(self, results: dict[str, float]):
        assert results["acc"] == pytest.approx(0.741), "Expected accuracy equal to the majority share"

    def test_macro_precision(self, results: dict[str, float]):
        assert results["pre"] == pytest.approx(0.3705), "Expected (0.741 + 0) / 2"

    def test_macro_recall(self, results: dict[str, float]):
        assert results["rec"] == pytest.approx(0.5), "Expected (1 + 0) / 2"

    def test_macro_f1(self, results: dict[str, float]):
        f1_negative = 2 * 0.741 / (1 + 0.741)
        assert results["f1"] == pytest.approx(f1_negative / 2), "Expected half the negative-class F1"


class TestThresholdMetricsOracle:
    @pytest.fixture(scope="class", params=[0, 1, 2])
    def test_config(self, request: pytest.FixtureRequest) -> dict:
        rng = np.random.default_rng(100 + request.param)
        return {"scores": rng.random(150), "labels": rng.integers(0, 2, size=150)}

    def test_matches_confusion_counting(self, test_config: dict):
        fast = threshold_metrics(test_config["scores"], test_config["labels"])
        slow = confusion_oracle(test_config["scores"], test_config["labels"])
        for metric in ("acc", "pre", "rec", "f1"):
            assert fast[metric] == pytest.approx(slow[metric]), f"Mismatch in {metric}"


def test_threshold_is_inclusive():
    assert threshold_metrics([0.5], [1])["acc"] == 1.0, "Expected score == threshold to predict positive"


def test_evaluate_flags_undefined_auc():
    report = evaluate([0.2, 0.7], [0, 0])
    assert report.undefined, "Expected the report flagged undefined"
    assert report.n == 2, "Expected the row count"
    assert report.positive_fraction == 0.0, "Expected the prevalence"


class TestDistributionSummary:
    @pytest.fixture(scope="class")
    def results(self):
        return summarize_distribution([0.6, float("nan"), 0.8, 0.7, 0.9])

    def test_excludes_undefined(self, results):
        assert results.n == 4, "Expected four defined values"
        assert results.excluded == 1, "Expected the NaN counted as excluded"

    def test_quartiles(self, results):
        row = results.as_row()
        assert row["25%"] == pytest.approx(0.675), "Expected the linearly interpolated first quartile"
        assert row["50%"] == pytest.approx(0.75), "Expected the median"
        assert row["75%"] == pytest.approx(0.825), "Expected the linearly interpolated third quartile"

    def test_sample_standard_deviation(self, results):
        assert results.std == pytest.approx(np.std([0.6, 0.8, 0.7, 0.9], ddof=1)), "Expected ddof=1"

    def test_single_value(self):
        single = summarize_distribution([0.7])
        assert single.single, "Expected the single-value flag"
        assert single.std == 0.0, "Expected a zero standard deviation"

    def test_only_undefined(self):
        with pytest.raises(MetricError):
            summarize_distribution([float("nan")])


class TestCorrelation:
    def test_constant_vector_is_undefined(self):
        assert math.isnan(pearson_r([1, 2, 3], [5, 5, 5])), "Expected NaN for a constant vector"

    def test_perfect_linear(self):
        assert pearson_r([1, 2, 3, 4], [2, 4, 6, 8]) == pytest.approx(1.0), "Expected r = 1"

    def test_too_short(self):
        with pytest.raises(MetricError):
            pearson_r([1], [2])


def test_fraction_improved_skips_undefined():
    baseline = {"a": 0.6, "b": 0.7, "c": float("nan"), "d": 0.5}
    candidate = {"a": 0.65, "b": 0.6, "c": 0.9, "d": 0.5}
    assert fraction_improved(baseline, candidate) == pytest.approx(1 / 3), (
        "Expected only persons with both values to count, ties not improving"
    )
