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
Bayesian hyperparameter search.

The first ``random_starts`` trials are sampled at random. Later trials
maximize expected improvement under a Gaussian-process surrogate with a
Matern 5/2 kernel on the unit cube (log-scaled dimensions are normalized in
log space). The objective is maximized.
"""

import logging
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from scipy import linalg, stats

from habitlens.errors import SearchSpaceError
from habitlens.metrics import EvalReport
from habitlens.tensorcore import ModelSpec

logger = logging.getLogger(__name__)

HyperConfig = dict[str, Any]

GP_NOISE = 1e-6
LENGTHSCALE_GRID = (0.1, 0.2, 0.5, 1.0, 2.0)
N_CANDIDATES = 1024
PERTURB_ATTEMPTS = 100


@dataclass(frozen=True)
class GridDim:
    """
    Evenly spaced values ``low, low + step, ..., high``.
    """

    name: str
    low: float
    high: float
    step: float

    @property
    def integral(self) -> bool:
        return all(float(v).is_integer() for v in (self.low, self.high, self.step))

    @property
    def n_points(self) -> int:
        return int(round((self.high - self.low) / self.step)) + 1

    def validate(self) -> None:
        if self.step <= 0 or self.low > self.high:
            raise SearchSpaceError(f"{self.name}: invalid grid [{self.low}, {self.high}] step {self.step}")
        span = (self.high - self.low) / self.step
        if abs(span - round(span)) > 1e-9:
            raise SearchSpaceError(f"{self.name}: step {self.step} does not divide [{self.low}, {self.high}]")

    def value(self, k: int):
        v = self.low + k * self.step
        return int(round(v)) if self.integral else round(v, 10)

    def sample(self, rng: np.random.Generator):
        return self.value(int(rng.integers(self.n_points)))

    def to_unit(self, v: float) -> float:
        return 0.0 if self.high == self.low else (v - self.low) / (self.high - self.low)

    def from_unit(self, u: float):
        k = int(round(min(max(u, 0.0), 1.0) * (self.n_points - 1)))
        return self.value(k)


@dataclass(frozen=True)
class LogDim:
    """
    Continuous values, sampled log-uniformly in ``[low, high]``.
    """

    name: str
    low: float
    high: float

    def validate(self) -> None:
        if not 0 < self.low <= self.high:
            raise SearchSpaceError(f"{self.name}: invalid log range [{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator) -> float:
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))

    def to_unit(self, v: float) -> float:
        if self.high == self.low:
            return 0.0
        return (math.log(v) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))

    def from_unit(self, u: float) -> float:
        u = min(max(u, 0.0), 1.0)
        return float(math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low))))


Dimension = GridDim | LogDim


@dataclass(frozen=True)
class SearchSpace:
    name: str
    dims: tuple[Dimension, ...]

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if not names or len(set(names)) != len(names):
            raise SearchSpaceError(f"space '{self.name}' needs unique, non-empty dimension names")
        for d in self.dims:
            d.validate()

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    @property
    def finite_size(self) -> int | None:
        if any(isinstance(d, LogDim) for d in self.dims):
            return None
        return math.prod(d.n_points for d in self.dims)

    def encode(self, config: Mapping[str, Any]) -> np.ndarray:
        return np.array([d.to_unit(config[d.name]) for d in self.dims])

    def decode(self, unit: np.ndarray) -> HyperConfig:
        return {d.name: d.from_unit(float(u)) for d, u in zip(self.dims, unit)}


def _architecture_dims(lr_low: float) -> tuple[Dimension, ...]:
    return (
        GridDim("embed_dim", 5, 50, 5),
        GridDim("num_layers", 1, 3, 1),
        GridDim("layer_units", 4, 64, 4),
        GridDim("dense_units", 4, 64, 4),
        GridDim("dropout_top", 0.2, 0.5, 0.1),
        GridDim("recurrent_or_attention_dropout", 0.2, 0.5, 0.1),
        LogDim("l1_layer", 1e-5, 1e-3),
        LogDim("l2_layer", 1e-4, 1e-2),
        LogDim("l1_dense", 1e-5, 1e-3),
        LogDim("l2_dense", 1e-4, 1e-2),
        LogDim("lr", lr_low, 1e-2),
    )


LSTM_SPACE = SearchSpace("lstm", _architecture_dims(1e-5))
TRANSFORMER_SPACE = SearchSpace("transformer", _architecture_dims(1e-4))
FINETUNE_SPACE = SearchSpace(
    "finetune",
    (
        GridDim("dense_units", 4, 64, 4),
        GridDim("dropout_top", 0.2, 0.5, 0.1),
        LogDim("l1_dense", 1e-5, 1e-3),
        LogDim("l2_dense", 1e-4, 1e-2),
        LogDim("lr", 1e-4, 1e-2),
    ),
)
SPACES = {"lstm": LSTM_SPACE, "transformer": TRANSFORMER_SPACE, "finetune": FINETUNE_SPACE}


def spec_from_config(kind: str, config: Mapping[str, Any], vocab_size: int, seq_len: int) -> ModelSpec:
    """
    Model spec for a sampled architecture config; ``lr`` is not part of it.
    """
    return ModelSpec(
        kind=kind,
        embed_dim=int(config["embed_dim"]),
        num_layers=int(config["num_layers"]),
        layer_units=int(config["layer_units"]),
        dense_units=int(config["dense_units"]),
        dropout_top=float(config["dropout_top"]),
        recurrent_or_attention_dropout=float(config["recurrent_or_attention_dropout"]),
        l1_layer=float(config["l1_layer"]),
        l2_layer=float(config["l2_layer"]),
        l1_dense=float(config["l1_dense"]),
        l2_dense=float(config["l2_dense"]),
        vocab_size=vocab_size,
        seq_len=seq_len,
    ).validate()


def sample_random_config(space: SearchSpace, rng: np.random.Generator) -> HyperConfig:
    """
    Grid dimensions uniform over their points, log dimensions log-uniform.
    """
    return {d.name: d.sample(rng) for d in space.dims}


def expected_improvement(mean: np.ndarray, std: np.ndarray, best_so_far: float) -> np.ndarray:
    """
    ``(mean - best) * Phi(z) + std * phi(z)`` with ``z = (mean - best) / std``.

    Where ``std`` is zero the improvement is ``max(mean - best, 0)``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    gain = mean - best_so_far
    safe_std = np.where(std > 0, std, 1.0)
    z = gain / safe_std
    ei = gain * stats.norm.cdf(z) + std * stats.norm.pdf(z)
    return np.maximum(np.where(std > 0, ei, gain), 0.0)


def matern52(a: np.ndarray, b: np.ndarray, lengthscale: float) -> np.ndarray:
    r = np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1), 0.0)) / lengthscale
    s = math.sqrt(5.0) * r
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


class GaussianProcess:
    """
    Zero-mean GP on standardized targets with a profiled signal variance.

    The isotropic lengthscale maximizes the marginal likelihood over
    ``LENGTHSCALE_GRID``.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, noise: float = GP_NOISE):
        self.x = x
        self.y_mean = float(y.mean())
        self.y_std = float(y.std()) or 1.0
        self.y = (y - self.y_mean) / self.y_std
        self.noise = noise
        best = None
        for lengthscale in LENGTHSCALE_GRID:
            fitted = self._fit(lengthscale)
            if fitted is not None and (best is None or fitted[0] > best[0]):
                best = fitted
        if best is None:
            raise SearchSpaceError("surrogate covariance is not positive definite")
        _, self.lengthscale, self.factor, self.alpha, self.signal = best

    def _fit(self, lengthscale: float):
        n = len(self.y)
        cov = matern52(self.x, self.x, lengthscale) + self.noise * np.eye(n)
        try:
            factor = linalg.cho_factor(cov, lower=True)
        except linalg.LinAlgError:
            return None
        alpha = linalg.cho_solve(factor, self.y)
        signal = max(float(self.y @ alpha) / n, 1e-12)
        log_det = 2.0 * np.log(np.diag(factor[0])).sum()
        log_likelihood = -0.5 * n * math.log(signal) - 0.5 * log_det
        return log_likelihood, lengthscale, factor, alpha, signal

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Posterior mean and standard deviation in standardized units.
        """
        cross = matern52(x, self.x, self.lengthscale)
        mean = cross @ self.alpha
        solved = linalg.cho_solve(self.factor, cross.T)
        var = self.signal * np.maximum(1.0 - (cross * solved.T).sum(axis=1), 0.0)
        return mean, np.sqrt(var)

    def standardize(self, value: float) -> float:
        return (value - self.y_mean) / self.y_std


@dataclass
class Trial:
    index: int
    config: HyperConfig
    score: float
    report: EvalReport | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class TrialLog:
    space: SearchSpace
    trials: list[Trial] = field(default_factory=list)

    @property
    def best_index(self) -> int | None:
        finite = [t for t in self.trials if math.isfinite(t.score)]
        if not finite:
            return None
        return max(finite, key=lambda t: (t.score, -t.index)).index

    @property
    def failures(self) -> list[Trial]:
        return [t for t in self.trials if t.failed]

    def __len__(self) -> int:
        return len(self.trials)

    def to_frame(self) -> pd.DataFrame:
        """
        One row per trial ordered by rank: ``rank, acc, pre, rec, f1, auc,
        trial`` followed by the hyperparameters. Failed trials rank last.
        """
        ordered = sorted(self.trials, key=lambda t: (-t.score if math.isfinite(t.score) else math.inf, t.index))
        rows = []
        for rank, t in enumerate(ordered, start=1):
            r = t.report
            metrics = {
                "acc": r.acc if r else math.nan,
                "pre": r.pre if r else math.nan,
                "rec": r.rec if r else math.nan,
                "f1": r.f1 if r else math.nan,
                "auc": r.auc if r else (t.score if math.isfinite(t.score) else math.nan),
            }
            rows.append({"rank": rank, **metrics, "trial": t.index, **{n: t.config[n] for n in self.space.names}})
        return pd.DataFrame(rows, columns=["rank", "acc", "pre", "rec", "f1", "auc", "trial", *self.space.names])


def _config_key(space: SearchSpace, config: Mapping[str, Any]) -> tuple:
    return tuple(config[n] for n in space.names)


def _propose(space: SearchSpace, log: TrialLog, rng: np.random.Generator) -> HyperConfig:
    scores = np.array([t.score for t in log.trials])
    finite = np.isfinite(scores)
    candidates = [sample_random_config(space, rng) for _ in range(N_CANDIDATES)]
    if not finite.any():
        return candidates[0]
    scores = np.where(finite, scores, scores[finite].min())
    gp = GaussianProcess(np.array([space.encode(t.config) for t in log.trials]), scores)
    mean, std = gp.predict(np.array([space.encode(c) for c in candidates]))
    ei = expected_improvement(mean, std, gp.standardize(float(scores.max())))
    return candidates[int(np.argmax(ei))]


def _deduplicate(space: SearchSpace, config: HyperConfig, seen: set, rng: np.random.Generator) -> HyperConfig:
    if _config_key(space, config) not in seen:
        return config
    size = space.finite_size
    if size is not None and len(seen) >= size:
        return config
    unit = space.encode(config)
    for attempt in range(1, PERTURB_ATTEMPTS + 1):
        candidate = space.decode(unit + rng.normal(0.0, 0.05 * attempt / 10, size=len(unit)))
        if _config_key(space, candidate) not in seen:
            return candidate
    return sample_random_config(space, rng)


def bayesian_search(
    space: SearchSpace,
    objective: Callable[[HyperConfig], float | EvalReport],
    budget: int = 20,
    random_starts: int = 5,
    seed: int = 0,
) -> tuple[HyperConfig | None, TrialLog]:
    """
    Maximize ``objective`` over ``space`` with exactly ``budget`` trials.

    Parameters
    ----------
    space : SearchSpace
        Hyperparameter space.
    objective : Callable
        Returns a score or an ``EvalReport`` whose AUC is the score. Raised
        exceptions and undefined scores are recorded as failed trials with
        score ``-inf``.
    budget : int
        Total number of trials, random starts included.
    random_starts : int
        Number of initial random trials.
    seed : int
        Seeds sampling and candidate generation.
    """
    if not budget >= random_starts >= 1:
        raise SearchSpaceError(f"need budget >= random_starts >= 1, got {budget} and {random_starts}")
    rng = np.random.default_rng(seed)
    log = TrialLog(space)
    seen: set = set()
    for index in range(budget):
        if index < random_starts:
            config = sample_random_config(space, rng)
        else:
            config = _propose(space, log, rng)
        config = _deduplicate(space, config, seen, rng)
        seen.add(_config_key(space, config))

        report, error = None, None
        try:
            outcome = objective(config)
            if isinstance(outcome, EvalReport):
                report, score = outcome, float(outcome.auc)
            else:
                score = float(outcome)
            if math.isnan(score):
                error, score = "objective undefined", -math.inf
        except Exception as e:
            error, score = f"{type(e).__name__}: {e}", -math.inf
            logger.warning("trial failed", extra={"id": "trial_failed", "trial": index, "reason": error})
        log.trials.append(Trial(index, config, score, report, error))
        logger.info("trial finished", extra={"id": "trial", "trial": index, "score": score})

    best = log.best_index
    if best is None:
        logger.warning(
            "every trial failed",
            extra={"id": "search_failed", "trials": budget, "first_error": log.trials[0].error},
        )
        return None, log
    return dict(log.trials[best].config), log
