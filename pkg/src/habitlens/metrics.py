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
Classification metrics and distribution summaries.

Undefined values are reported as ``NaN``.
"""

import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from habitlens.errors import MetricError

UNDEFINED = float("nan")
DEFAULT_THRESHOLD = 0.5
DISTRIBUTION_COLUMNS = ("mean", "std", "min", "25%", "50%", "75%", "max")


def _as_arrays(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise MetricError(f"{len(scores)} scores given for {len(labels)} labels")
    return scores, labels


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve via the Mann-Whitney rank statistic.

    Tied scores receive average ranks, so a tied positive/negative pair counts
    one half. Returns ``NaN`` if either class is absent.
    """
    scores, labels = _as_arrays(scores, labels)
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = stats.rankdata(scores, method="average")
    u_statistic = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u_statistic / (n_pos * n_neg))


def brute_force_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Pairwise-count AUC; quadratic, used as a reference for ``roc_auc``.
    """
    scores, labels = _as_arrays(scores, labels)
    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    if len(positives) == 0 or len(negatives) == 0:
        return UNDEFINED
    wins = 0.0
    for p in positives:
        for q in negatives:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(positives) * len(negatives))


def _safe_ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def threshold_metrics(
    scores: Sequence[float], labels: Sequence[int], threshold: float = DEFAULT_THRESHOLD
) -> dict[str, float]:
    """
    Accuracy plus macro-averaged precision, recall and F1.

    Predictions are ``score >= threshold``. A per-class precision or recall
    with a zero denominator counts as 0 before averaging.
    """
    scores, labels = _as_arrays(scores, labels)
    if len(labels) == 0:
        raise MetricError("threshold metrics of an empty set")
    predicted = (scores >= threshold).astype(np.int64)
    precision, recall, f1 = [], [], []
    for cls in (0, 1):
        tp = np.count_nonzero((predicted == cls) & (labels == cls))
        fp = np.count_nonzero((predicted == cls) & (labels != cls))
        fn = np.count_nonzero((predicted != cls) & (labels == cls))
        p = _safe_ratio(tp, tp + fp)
        r = _safe_ratio(tp, tp + fn)
        precision.append(p)
        recall.append(r)
        f1.append(_safe_ratio(2 * p * r, p + r))
    return {
        "acc": float(np.mean(predicted == labels)),
        "pre": float(np.mean(precision)),
        "rec": float(np.mean(recall)),
        "f1": float(np.mean(f1)),
    }


def confusion_oracle(
    scores: Sequence[float], labels: Sequence[int], threshold: float = DEFAULT_THRESHOLD
) -> dict[str, float]:
    """
    Element-by-element confusion counting; reference for ``threshold_metrics``.
    """
    counts = {(t, p): 0 for t in (0, 1) for p in (0, 1)}
    for score, label in zip(scores, labels):
        counts[(int(label), int(score >= threshold))] += 1
    n = sum(counts.values())
    per_class = []
    for cls in (0, 1):
        other = 1 - cls
        tp, fp, fn = counts[(cls, cls)], counts[(other, cls)], counts[(cls, other)]
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        per_class.append((p, r, 2 * p * r / (p + r) if p + r else 0.0))
    return {
        "acc": (counts[(0, 0)] + counts[(1, 1)]) / n,
        "pre": (per_class[0][0] + per_class[1][0]) / 2,
        "rec": (per_class[0][1] + per_class[1][1]) / 2,
        "f1": (per_class[0][2] + per_class[1][2]) / 2,
    }


@dataclass(frozen=True)
class EvalReport:
    """
    Metrics of one model on one evaluation set.

    ``undefined`` is set when the set holds a single class and AUC is ``NaN``.
    """

    auc: float
    acc: float
    pre: float
    rec: float
    f1: float
    n: int
    positive_fraction: float
    undefined: bool

    def as_row(self) -> dict[str, float]:
        return asdict(self)


def evaluate(scores: Sequence[float], labels: Sequence[int], threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    scores, labels = _as_arrays(scores, labels)
    auc = roc_auc(scores, labels)
    return EvalReport(
        auc=auc,
        **threshold_metrics(scores, labels, threshold),
        n=len(labels),
        positive_fraction=float(labels.mean()),
        undefined=math.isnan(auc),
    )


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Product-moment correlation; ``NaN`` when either vector is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"cannot correlate vectors of lengths {len(x)} and {len(y)}")
    if len(x) < 2:
        raise MetricError("correlation needs at least two observations")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return UNDEFINED
    return float(np.clip(stats.pearsonr(x, y).statistic, -1.0, 1.0))


@dataclass(frozen=True)
class SummaryDistribution:
    """
    Summary of per-person values.

    Parameters
    ----------
    n : int
        Number of defined values summarized.
    excluded : int
        Number of undefined values left out.
    single : bool
        Only one value was given; ``std`` is reported as 0.
    """

    mean: float
    std: float
    min: float
    q25: float
    q50: float
    q75: float
    max: float
    n: int
    excluded: int
    single: bool

    def as_row(self) -> dict[str, float]:
        return dict(
            zip(
                DISTRIBUTION_COLUMNS,
                (self.mean, self.std, self.min, self.q25, self.q50, self.q75, self.max),
            )
        ) | {"n": self.n, "excluded": self.excluded}


def summarize_distribution(values: Sequence[float]) -> SummaryDistribution:
    """
    Mean, sample standard deviation and linearly interpolated quartiles.

    ``NaN`` entries are excluded and counted.
    """
    values = np.asarray(values, dtype=np.float64)
    defined = values[~np.isnan(values)]
    if len(defined) == 0:
        raise MetricError("no defined values to summarize")
    q25, q50, q75 = np.percentile(defined, [25, 50, 75], method="linear")
    single = len(defined) == 1
    return SummaryDistribution(
        mean=float(defined.mean()),
        std=0.0 if single else float(defined.std(ddof=1)),
        min=float(defined.min()),
        q25=float(q25),
        q50=float(q50),
        q75=float(q75),
        max=float(defined.max()),
        n=len(defined),
        excluded=len(values) - len(defined),
        single=single,
    )


def fraction_improved(baseline: Mapping[str, float], candidate: Mapping[str, float]) -> float:
    """
    Share of persons whose candidate value exceeds the baseline.

    Only persons with both values defined are counted.
    """
    keys = [
        k
        for k in sorted(set(baseline) & set(candidate))
        if not (math.isnan(baseline[k]) or math.isnan(candidate[k]))
    ]
    if not keys:
        return UNDEFINED
    return sum(candidate[k] > baseline[k] for k in keys) / len(keys)
