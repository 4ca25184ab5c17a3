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
Model fitting with early stopping, fine-tuning regimes and the logistic baseline.
"""

import logging
import math
from collections.abc import Collection, Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.special import expit

from habitlens.dataset import ClassWeights, SequenceDataset, class_weights
from habitlens.errors import DegeneratePersonError, TrainingError
from habitlens.hpo import FINETUNE_SPACE, SearchSpace, TrialLog, bayesian_search
from habitlens.metrics import EvalReport, evaluate, roc_auc
from habitlens.seeding import derive_rng, derive_seed
from habitlens.tensorcore import (
    ModelSpec,
    Parameters,
    adam_step,
    data_loss,
    head_loss_and_gradients,
    head_probabilities,
    init_head,
    init_model,
    init_optimizer,
    is_head_key,
    loss_and_gradients,
    model_forward,
    trunk_features,
)

logger = logging.getLogger(__name__)

FINETUNE_LR = 1e-4
PREDICT_BATCH = 4096
LR_L2_GRID = tuple(float(v) for v in np.logspace(-4, 2, 7))


@dataclass(frozen=True)
class TrainConfig:
    """
    Parameters
    ----------
    max_epochs : int
        Upper bound of training epochs.
    batch_size : int
        Mini-batch size; the last partial batch is kept.
    patience : int
        Epochs without validation improvement before stopping.
    lr : float
        Adam learning rate.
    shuffle_seed : int
        Seeds the per-epoch shuffles and dropout masks.
    weighted : bool
        Scale per-example losses by inverse class frequency.
    min_delta : float
        Minimum validation loss decrease counted as improvement.
    """

    max_epochs: int = 1000
    batch_size: int = 1024
    patience: int = 5
    lr: float = 1e-3
    shuffle_seed: int = 0
    weighted: bool = False
    min_delta: float = 0.0

    def __post_init__(self):
        if self.patience < 1:
            raise TrainingError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise TrainingError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.lr <= 0:
            raise TrainingError(f"lr must be positive, got {self.lr}")


@dataclass
class FitHistory:
    """
    Per-epoch losses. Epoch 0, when present, scores the initial parameters.
    """

    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def record(self, epoch: int, train_loss: float, val_loss: float) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.epochs.index(self.best_epoch)]

    def __len__(self) -> int:
        return len(self.epochs)


def history_frame(history: FitHistory) -> pd.DataFrame:
    return pd.DataFrame({"epoch": history.epochs, "train_loss": history.train_loss, "val_loss": history.val_loss})


class Trainer:
    """
    Mini-batch Adam with early stopping on validation loss.

    The returned parameters are the snapshot of the best validation epoch.

    Parameters
    ----------
    spec : ModelSpec
        Architecture of the fitted parameters.
    cfg : TrainConfig
        Loop settings.
    weights : ClassWeights | None
        Class weights for the weighted variant; ``None`` for unweighted loss.
    trainable : Collection[str] | None
        Parameters updated by the optimizer; all if ``None``.
    """

    def __init__(
        self,
        spec: ModelSpec,
        cfg: TrainConfig,
        weights: ClassWeights | None = None,
        trainable: Collection[str] | None = None,
    ):
        self.spec = spec
        self.cfg = cfg
        self.weights = weights
        self.trainable = trainable

    def _example_weights(self, targets: np.ndarray) -> np.ndarray | None:
        return None if self.weights is None else self.weights.per_example(targets)

    def batch_loss_and_gradients(self, params, inputs, targets, rng) -> tuple[float, Parameters]:
        return loss_and_gradients(params, self.spec, inputs, targets, self._example_weights(targets), "train", rng)

    def validation_loss(self, params: Mapping[str, np.ndarray], val: SequenceDataset) -> float:
        """
        Unregularized eval-mode loss; class-weighted only in the weighted variant.
        """
        total = 0.0
        for begin in range(0, len(val), PREDICT_BATCH):
            targets = val.targets[begin : begin + PREDICT_BATCH]
            inputs = val.inputs[begin : begin + PREDICT_BATCH]
            total += data_loss(params, self.spec, inputs, targets, self._example_weights(targets)) * len(targets)
        return total / len(val)

    def fit(
        self,
        params: Parameters,
        train: SequenceDataset,
        val: SequenceDataset,
        *,
        score_initial: bool = False,
    ) -> tuple[Parameters, FitHistory]:
        """
        Train from ``params``.

        Parameters
        ----------
        params : Parameters
            Starting weights; not modified.
        train, val : SequenceDataset
            Training and validation rows.
        score_initial : bool
            Record the starting weights as epoch 0 and let them win the
            best-snapshot selection.
        """
        if len(train) == 0 or len(val) == 0:
            raise TrainingError(f"empty training ({len(train)}) or validation ({len(val)}) set")
        if train.vocab_size != val.vocab_size or train.seq_len != val.seq_len:
            raise TrainingError("training and validation sets disagree on vocabulary or sequence length")

        cfg = self.cfg
        shuffle_rng = derive_rng(cfg.shuffle_seed, "shuffle")
        dropout_rng = derive_rng(cfg.shuffle_seed, "dropout")
        state = init_optimizer(params, [k for k in params if self.trainable is None or k in self.trainable])
        history = FitHistory()
        best_params, best_loss = dict(params), math.inf
        if score_initial:
            best_loss = self.validation_loss(params, val)
            history.record(0, math.nan, best_loss)

        for epoch in range(1, cfg.max_epochs + 1):
            order = shuffle_rng.permutation(len(train))
            epoch_loss = 0.0
            for begin in range(0, len(order), cfg.batch_size):
                idx = order[begin : begin + cfg.batch_size]
                loss, grads = self.batch_loss_and_gradients(params, train.inputs[idx], train.targets[idx], dropout_rng)
                state, params = adam_step(state, params, grads, cfg.lr)
                epoch_loss += loss * len(idx)
            val_loss = self.validation_loss(params, val)
            history.record(epoch, epoch_loss / len(train), val_loss)
            if not math.isfinite(val_loss):
                logger.warning(
                    "validation loss diverged", extra={"id": "fit_diverged", "epoch": epoch, "val_loss": val_loss}
                )
                raise TrainingError(f"validation loss is {val_loss} at epoch {epoch}")
            logger.debug(
                "epoch finished",
                extra={"id": "epoch", "epoch": epoch, "train_loss": history.train_loss[-1], "val_loss": val_loss},
            )
            if val_loss < best_loss - cfg.min_delta:
                best_loss, best_params, history.best_epoch = val_loss, dict(params), epoch
            elif epoch - history.best_epoch >= cfg.patience:
                break

        history.stopped_epoch = history.epochs[-1] if history.epochs else 0
        logger.info(
            "fit finished",
            extra={
                "id": "fit",
                "best_epoch": history.best_epoch,
                "stopped_epoch": history.stopped_epoch,
                "best_val_loss": best_loss,
            },
        )
        return best_params, history


def feature_view(dataset: SequenceDataset, features: np.ndarray) -> SequenceDataset:
    """
    The rows of ``dataset`` with trunk features in place of input codes.
    """
    return replace(dataset, inputs=features)


class HeadTrainer(Trainer):
    """
    Trains the dense head over fixed trunk features.

    Datasets passed to ``fit`` carry ``(N, U)`` features as inputs, see
    ``feature_view``.
    """

    def batch_loss_and_gradients(self, params, inputs, targets, rng) -> tuple[float, Parameters]:
        return head_loss_and_gradients(params, self.spec, inputs, targets, self._example_weights(targets), "train", rng)

    def validation_loss(self, params: Mapping[str, np.ndarray], val: SequenceDataset) -> float:
        probs = head_probabilities(params, val.inputs)
        per_example = -(val.targets * np.log(probs) + (1 - val.targets) * np.log1p(-probs))
        weights = self._example_weights(val.targets)
        if weights is not None:
            per_example = per_example * weights
        return float(per_example.mean())


def _weights_for(train: SequenceDataset, cfg: TrainConfig) -> ClassWeights | None:
    return class_weights(train.targets) if cfg.weighted else None


def fit(
    spec: ModelSpec,
    train: SequenceDataset,
    val: SequenceDataset,
    cfg: TrainConfig,
    params: Parameters | None = None,
    init_seed: int = 0,
) -> tuple[Parameters, FitHistory]:
    """
    Fit a model from scratch, or continue from ``params`` when given.
    """
    start = init_model(spec, init_seed) if params is None else params
    return Trainer(spec, cfg, _weights_for(train, cfg)).fit(start, train, val)


def fine_tune_full(
    spec: ModelSpec,
    global_params: Parameters,
    train: SequenceDataset,
    val: SequenceDataset,
    cfg: TrainConfig | None = None,
) -> tuple[Parameters, FitHistory]:
    """
    Continue training every layer of the global model on one person.

    The optimizer starts fresh, and the global weights compete as epoch 0, so
    the result never has a higher validation loss than the global model.
    """
    cfg = cfg or TrainConfig(lr=FINETUNE_LR)
    return Trainer(spec, cfg, _weights_for(train, cfg)).fit(global_params, train, val, score_initial=True)


@dataclass
class FrozenFineTune:
    params: Parameters
    spec: ModelSpec
    config: dict
    trials: TrialLog


def fine_tune_frozen(
    spec: ModelSpec,
    global_params: Parameters,
    train: SequenceDataset,
    val: SequenceDataset,
    cfg: TrainConfig | None = None,
    space: SearchSpace = FINETUNE_SPACE,
    budget: int = 20,
    random_starts: int = 5,
    seed: int = 0,
) -> FrozenFineTune:
    """
    Retrain a fresh dense head on the frozen embedding and sequence layers.

    The head hyperparameters and learning rate are searched with
    ``bayesian_search`` on validation AUC. Trunk arrays are returned as-is.
    """
    cfg = cfg or TrainConfig(lr=FINETUNE_LR)
    trunk = {k: v for k, v in global_params.items() if not is_head_key(k)}
    train_view = feature_view(train, trunk_features(global_params, spec, train.inputs))
    val_view = feature_view(val, trunk_features(global_params, spec, val.inputs))
    weights = _weights_for(train, cfg)
    fitted: list[tuple[ModelSpec, Parameters] | None] = []

    def objective(config: dict) -> EvalReport:
        trial = len(fitted)
        fitted.append(None)
        head_spec = replace(
            spec,
            dense_units=int(config["dense_units"]),
            dropout_top=float(config["dropout_top"]),
            l1_dense=float(config["l1_dense"]),
            l2_dense=float(config["l2_dense"]),
        )
        head = {k: v.astype(np.float32) for k, v in init_head(head_spec, derive_rng(seed, "head", trial)).items()}
        trial_cfg = replace(cfg, lr=float(config["lr"]), shuffle_seed=derive_seed(seed, "shuffle", trial))
        head, _ = HeadTrainer(head_spec, trial_cfg, weights).fit(head, train_view, val_view)
        fitted[trial] = (head_spec, head)
        return evaluate(head_probabilities(head, val_view.inputs), val.targets)

    best, trials = bayesian_search(space, objective, budget=budget, random_starts=random_starts, seed=seed)
    if trials.best_index is None:
        raise TrainingError(f"all {budget} head searches failed")
    head_spec, head = fitted[trials.best_index]
    return FrozenFineTune({**trunk, **head}, head_spec, best, trials)


def predict(params: Mapping[str, np.ndarray], spec: ModelSpec, dataset: SequenceDataset) -> np.ndarray:
    """
    Eval-mode probabilities for every row, in row order.
    """
    if len(dataset) == 0:
        return np.empty(0)
    return np.concatenate(
        [
            model_forward(params, spec, dataset.inputs[begin : begin + PREDICT_BATCH])
            for begin in range(0, len(dataset), PREDICT_BATCH)
        ]
    )


@dataclass(frozen=True)
class LogisticModel:
    coef: np.ndarray
    intercept: float
    l2: float

    def predict_proba(self, features: sparse.spmatrix) -> np.ndarray:
        return expit(features @ self.coef + self.intercept)


@dataclass
class LogisticBaseline:
    model: LogisticModel
    val_auc: float
    grid: dict[float, float]


def _fit_logistic(
    features: sparse.csr_matrix,
    targets: np.ndarray,
    l2: float,
    start: LogisticModel | None,
    max_iter: int,
    tol: float,
) -> LogisticModel:
    n, p = features.shape
    y = targets.astype(np.float64)
    # Curvature bound of the mean loss: a quarter of the largest row norm plus the intercept.
    row_ones = int(features.getnnz(axis=1).max())
    step = 1.0 / (0.25 * (row_ones + 1) + 2.0 * l2)
    coef = np.zeros(p) if start is None else start.coef.copy()
    intercept = 0.0 if start is None else start.intercept
    features_t = features.T.tocsr()
    for _ in range(max_iter):
        residual = expit(features @ coef + intercept) - y
        grad_coef = features_t @ residual / n + 2.0 * l2 * coef
        grad_intercept = float(residual.mean())
        if math.sqrt(float(grad_coef @ grad_coef) + grad_intercept**2) < tol:
            break
        coef -= step * grad_coef
        intercept -= step * grad_intercept
    return LogisticModel(coef, float(intercept), l2)


def fit_logistic_baseline(
    train_features: sparse.csr_matrix,
    train_targets: np.ndarray,
    val_features: sparse.csr_matrix,
    val_targets: np.ndarray,
    l2_grid: Sequence[float] = LR_L2_GRID,
    max_iter: int = 10_000,
    tol: float = 1e-6,
) -> LogisticBaseline:
    """
    L2-regularized logistic regression over one-hot window features.

    Each grid strength is fitted by full-batch gradient descent with a fixed
    step; the strength with the best validation AUC wins (first on ties).
    Fits are warm-started from the next stronger penalty.
    """
    if np.unique(train_targets).size < 2:
        raise DegeneratePersonError("logistic baseline needs both classes in training")
    models: dict[float, LogisticModel] = {}
    previous = None
    for l2 in sorted(l2_grid, reverse=True):
        previous = _fit_logistic(train_features, train_targets, float(l2), previous, max_iter, tol)
        models[float(l2)] = previous

    grid = {float(l2): roc_auc(models[float(l2)].predict_proba(val_features), val_targets) for l2 in l2_grid}
    best_l2 = max(grid, key=lambda l2: -math.inf if math.isnan(grid[l2]) else grid[l2])
    logger.info("logistic baseline fitted", extra={"id": "baseline", "l2": best_l2, "val_auc": grid[best_l2]})
    return LogisticBaseline(models[best_l2], grid[best_l2], grid)
