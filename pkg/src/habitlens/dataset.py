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
Temporal splits, vocabulary and fixed-length predecessor windows.
"""

import hashlib
import json
import logging
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from habitlens.errors import DegeneratePersonError, EmptyInputError, SplitError, VocabularyError
from habitlens.ingest import MS_PER_DAY, CohortLog

logger = logging.getLogger(__name__)

PAD = 0
OOV = 1
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.5, 0.25, 0.25)
DEFAULT_SEQ_LEN = 20


@dataclass(frozen=True)
class SplitIndex:
    """
    Boundaries into one user's ordered event list.

    Training events are ``[0, train_end)``, validation ``[train_end, val_end)``
    and test ``[val_end, n)``.
    """

    train_end: int
    val_end: int
    n: int

    def bounds(self, split: str) -> tuple[int, int]:
        return {
            "train": (0, self.train_end),
            "val": (self.train_end, self.val_end),
            "test": (self.val_end, self.n),
        }[split]

    def tags(self) -> np.ndarray:
        tags = np.empty(self.n, dtype="<U5")
        for split in SPLITS:
            begin, end = self.bounds(split)
            tags[begin:end] = split
        return tags


def temporal_split(n_events: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> SplitIndex:
    """
    Split a time-ordered list of ``n_events`` into training, validation and test.

    Boundaries are floored; the remainder falls to the test set.

    Parameters
    ----------
    n_events : int
        Number of events of the user.
    fractions : Sequence[float]
        Training, validation and test shares.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"split fractions must be three positive shares summing to 1, got {fractions}")
    if n_events < 4:
        raise SplitError(f"cannot split {n_events} events into three non-degenerate sets")
    train_end = int(np.floor(fractions[0] * n_events))
    val_end = int(np.floor((fractions[0] + fractions[1]) * n_events))
    return SplitIndex(train_end, val_end, n_events)


def split_table(cohort: CohortLog, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> dict[str, SplitIndex]:
    """
    Per-user splits of a cohort, keyed by user id in sorted order.
    """
    counts = cohort.events.groupby("user_id", sort=True).size()
    return {str(user): temporal_split(int(n), fractions) for user, n in counts.items()}


def split_hash(splits: Mapping[str, SplitIndex]) -> str:
    """
    Fingerprint of a split table; equal for bit-identical boundaries.
    """
    digest = hashlib.sha256()
    for user in sorted(splits):
        s = splits[user]
        digest.update(f"{user}\t{s.train_end}\t{s.val_end}\t{s.n}\n".encode())
    return digest.hexdigest()


class Vocab:
    """
    Mapping of app ids to integer codes.

    Code 0 is padding and code 1 stands for apps unseen in training. Known apps
    start at code 2.
    """

    def __init__(self, apps: Sequence[str]):
        self._apps = ["<pad>", "<oov>", *apps]
        self._codes = {app: code for code, app in enumerate(self._apps) if code >= 2}
        if len(self._codes) != len(apps):
            raise VocabularyError("duplicate app ids in vocabulary")

    @property
    def size(self) -> int:
        return len(self._apps)

    @property
    def apps(self) -> list[str]:
        return self._apps[2:]

    def code(self, app_id: str) -> int:
        return self._codes.get(app_id, OOV)

    def encode(self, app_ids: Iterable[str]) -> np.ndarray:
        return np.fromiter((self._codes.get(a, OOV) for a in app_ids), dtype=np.int32)

    def decode(self, code: int) -> str:
        if not 0 <= code < self.size:
            raise VocabularyError(f"code {code} outside vocabulary of size {self.size}")
        return self._apps[code]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self._apps == other._apps

    def __repr__(self) -> str:
        return f"Vocab(size={self.size})"


def build_vocab(training_app_ids: Iterable[str]) -> Vocab:
    """
    Build a vocabulary from the pooled training events.

    Apps are ordered by descending frequency, ties broken lexicographically.
    """
    counts = Counter(training_app_ids)
    if not counts:
        raise VocabularyError("empty training pool")
    ordered = sorted(counts, key=lambda app: (-counts[app], app))
    return Vocab(ordered)


def training_app_ids(cohort: CohortLog, splits: Mapping[str, SplitIndex]) -> list[str]:
    """
    App ids of every training event in the cohort, user by user.
    """
    apps: list[str] = []
    for user, frame in cohort.events.groupby("user_id", sort=True):
        apps.extend(frame["app_id"].iloc[: splits[str(user)].train_end])
    return apps


@dataclass
class SequenceDataset:
    """
    Fixed-length predecessor windows with binary targets.

    Parameters
    ----------
    inputs : np.ndarray
        ``(N, L)`` int32 codes, left-padded with 0.
    targets : np.ndarray
        ``(N,)`` uint8 social flag of the target event.
    user_ids : np.ndarray
        ``(N,)`` user of each row.
    splits : np.ndarray
        ``(N,)`` split tag of each row.
    timestamps : np.ndarray
        ``(N,)`` int64 timestamp of the target event.
    seq_len : int
        Window length ``L``.
    vocab_size : int
        Vocabulary size ``V`` the codes refer to.
    same_day : bool
        Predecessors restricted to the target's UTC date.
    """

    inputs: np.ndarray
    targets: np.ndarray
    user_ids: np.ndarray
    splits: np.ndarray
    timestamps: np.ndarray
    seq_len: int
    vocab_size: int
    same_day: bool = False

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, mask: np.ndarray) -> "SequenceDataset":
        return SequenceDataset(
            self.inputs[mask],
            self.targets[mask],
            self.user_ids[mask],
            self.splits[mask],
            self.timestamps[mask],
            self.seq_len,
            self.vocab_size,
            self.same_day,
        )

    def split(self, name: str) -> "SequenceDataset":
        return self.subset(self.splits == name)

    def user(self, user_id: str) -> "SequenceDataset":
        return self.subset(self.user_ids == user_id)

    @property
    def users(self) -> list[str]:
        return sorted(set(self.user_ids.tolist()))

    @property
    def positive_fraction(self) -> float:
        return float(self.targets.mean()) if len(self) else float("nan")


def _windows(values: np.ndarray, seq_len: int, fill: int) -> np.ndarray:
    padded = np.concatenate([np.full(seq_len, fill, dtype=values.dtype), values])
    return sliding_window_view(padded, seq_len)[: len(values)]


def build_sequences(
    user_events: pd.DataFrame,
    split: SplitIndex,
    vocab: Vocab,
    seq_len: int = DEFAULT_SEQ_LEN,
    *,
    same_day: bool = False,
) -> SequenceDataset:
    """
    One row per event of a single user.

    Windows are built separately within each split, so no row looks across a
    split boundary. With ``same_day`` only predecessors on the target's UTC
    date are kept; the shortfall is zero-padded.

    Parameters
    ----------
    user_events : pd.DataFrame
        Time-ordered events of one user with ``app_id``, ``timestamp`` and
        ``is_social`` columns.
    split : SplitIndex
        Boundaries for the user's events.
    vocab : Vocab
        Shared vocabulary.
    seq_len : int
        Window length ``L``.
    same_day : bool
        Restrict predecessors to the target's calendar date.
    """
    if seq_len < 1:
        raise SplitError(f"sequence length must be >= 1, got {seq_len}")
    if len(user_events) != split.n:
        raise SplitError(f"split covers {split.n} events but {len(user_events)} were given")

    codes = vocab.encode(user_events["app_id"])
    days = (user_events["timestamp"].to_numpy(dtype=np.int64) // MS_PER_DAY).astype(np.int64)
    parts = []
    for name in SPLITS:
        begin, end = split.bounds(name)
        segment = codes[begin:end]
        windows = _windows(segment, seq_len, PAD)
        if same_day:
            segment_days = days[begin:end]
            same = _windows(segment_days, seq_len, -1) == segment_days[:, None]
            windows = np.where(same, windows, PAD)
        parts.append(windows.astype(np.int32, copy=False))

    user_id = str(user_events["user_id"].iloc[0]) if len(user_events) else ""
    return SequenceDataset(
        inputs=np.concatenate(parts).reshape(-1, seq_len),
        targets=user_events["is_social"].to_numpy(dtype=np.uint8),
        user_ids=np.full(split.n, user_id, dtype=object),
        splits=split.tags(),
        timestamps=user_events["timestamp"].to_numpy(dtype=np.int64),
        seq_len=seq_len,
        vocab_size=vocab.size,
        same_day=same_day,
    )


def concat_datasets(parts: Sequence[SequenceDataset]) -> SequenceDataset:
    if not parts:
        raise EmptyInputError("no datasets to concatenate")
    first = parts[0]
    if any(p.seq_len != first.seq_len or p.vocab_size != first.vocab_size for p in parts):
        raise VocabularyError("datasets disagree on sequence length or vocabulary size")
    return SequenceDataset(
        inputs=np.concatenate([p.inputs for p in parts]),
        targets=np.concatenate([p.targets for p in parts]),
        user_ids=np.concatenate([p.user_ids for p in parts]),
        splits=np.concatenate([p.splits for p in parts]),
        timestamps=np.concatenate([p.timestamps for p in parts]),
        seq_len=first.seq_len,
        vocab_size=first.vocab_size,
        same_day=first.same_day,
    )


def build_cohort_dataset(
    cohort: CohortLog,
    splits: Mapping[str, SplitIndex],
    vocab: Vocab,
    seq_len: int = DEFAULT_SEQ_LEN,
    *,
    same_day: bool = False,
) -> SequenceDataset:
    """
    Sequences of every user in the cohort, concatenated in user order.

    The pooled split of the result is the union of the per-user splits.
    """
    parts = [
        build_sequences(frame.reset_index(drop=True), splits[str(user)], vocab, seq_len, same_day=same_day)
        for user, frame in cohort.events.groupby("user_id", sort=True)
    ]
    dataset = concat_datasets(parts)
    logger.info(
        "sequences built",
        extra={"id": "dataset", "rows": len(dataset), "seq_len": seq_len, "same_day": same_day},
    )
    return dataset


@dataclass(frozen=True)
class ClassWeights:
    weight_negative: float
    weight_positive: float

    def per_example(self, targets: np.ndarray) -> np.ndarray:
        return np.where(targets == 1, self.weight_positive, self.weight_negative)


UNIT_WEIGHTS = ClassWeights(1.0, 1.0)


def class_weights(targets: np.ndarray) -> ClassWeights:
    """
    Inverse-frequency class weights ``n / (2 * n_c)``.

    Parameters
    ----------
    targets : np.ndarray
        Binary targets of the training rows.
    """
    n = len(targets)
    n_pos = int(np.count_nonzero(targets))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegeneratePersonError(f"training set of {n} rows holds a single class")
    return ClassWeights(n / (2 * n_neg), n / (2 * n_pos))


def tabular_features(dataset: SequenceDataset) -> sparse.csr_matrix:
    """
    One-hot design matrix with ``L * V`` columns.

    Position ``p`` holding code ``c`` sets column ``p * V + c``.
    """
    n, seq_len = dataset.inputs.shape
    v = dataset.vocab_size
    rows = np.repeat(np.arange(n), seq_len)
    cols = (np.arange(seq_len)[None, :] * v + dataset.inputs).ravel()
    data = np.ones(n * seq_len, dtype=np.float64)
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, seq_len * v))


def save_dataset(
    path: Path,
    dataset: SequenceDataset,
    vocab: Vocab,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    source_hash: str = "",
) -> tuple[Path, Path]:
    """
    Write ``<path>.npz`` columns and a ``<path>.json`` sidecar.
    """
    path = Path(path)
    data_path, meta_path = path.with_suffix(".npz"), path.with_suffix(".json")
    np.savez(
        data_path,
        inputs=dataset.inputs,
        targets=dataset.targets,
        user_ids=dataset.user_ids.astype(str),
        splits=dataset.splits.astype(str),
        timestamps=dataset.timestamps,
    )
    sidecar = {
        "seq_len": dataset.seq_len,
        "vocab_size": dataset.vocab_size,
        "same_day": dataset.same_day,
        "fractions": list(fractions),
        "vocab": vocab.apps,
        "source_hash": source_hash,
    }
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return data_path, meta_path


def load_dataset(path: Path) -> tuple[SequenceDataset, Vocab, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    vocab = Vocab(sidecar["vocab"])
    if vocab.size != sidecar["vocab_size"]:
        raise VocabularyError("dataset sidecar vocabulary does not match its declared size")
    with np.load(path.with_suffix(".npz"), allow_pickle=False) as columns:
        dataset = SequenceDataset(
            inputs=columns["inputs"],
            targets=columns["targets"],
            user_ids=columns["user_ids"].astype(object),
            splits=columns["splits"],
            timestamps=columns["timestamps"],
            seq_len=int(sidecar["seq_len"]),
            vocab_size=int(sidecar["vocab_size"]),
            same_day=bool(sidecar["same_day"]),
        )
    return dataset, vocab, sidecar
