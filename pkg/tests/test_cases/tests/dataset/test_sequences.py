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
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from habitlens.dataset import (
    OOV,
    PAD,
    SequenceDataset,
    SplitIndex,
    Vocab,
    build_sequences,
    build_vocab,
    class_weights,
    load_dataset,
    save_dataset,
    split_hash,
    tabular_features,
    temporal_split,
)
from habitlens.errors import DegeneratePersonError, SplitError, VocabularyError
from habitlens.ingest import MS_PER_DAY

DAY0 = 1_704_067_200_000


def frame_of(apps: list[str], timestamps: list[int], social: set[str]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "user_id": "u1",
            "timestamp": np.array(timestamps, dtype=np.int64),
            "app_id": apps,
            "is_social": [a in social for a in apps],
        }
    )


class TestTemporalSplit:
    @pytest.mark.parametrize(
        ("n_events", "expected"),
        [(10, (5, 7)), (4, (2, 3)), (1000, (500, 750)), (7, (3, 5))],
    )
    def test_floored_boundaries(self, n_events: int, expected: tuple[int, int]):
        split = temporal_split(n_events)
        assert (split.train_end, split.val_end) == expected, f"Unexpected boundaries for {n_events} events"
        assert split.n == n_events, "Expected the test set to take the remainder"

    def test_too_few_events(self):
        with pytest.raises(SplitError):
            temporal_split(3)

    @pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.0), (0.6, 0.3, 0.3), (0.5, 0.5)])
    def test_invalid_fractions(self, fractions):
        with pytest.raises(SplitError):
            temporal_split(100, fractions)

    def test_tags_cover_every_event(self):
        tags = temporal_split(10).tags()
        assert tags.tolist() == ["train"] * 5 + ["val"] * 2 + ["test"] * 3, "Expected contiguous split tags"

    def test_hash_tracks_boundaries(self):
        first = split_hash({"u1": SplitIndex(5, 7, 10)})
        assert first == split_hash({"u1": SplitIndex(5, 7, 10)}), "Expected equal hashes for equal splits"
        assert first != split_hash({"u1": SplitIndex(5, 8, 10)}), "Expected a different hash for moved boundaries"


class TestVocabulary:
    @pytest.fixture(scope="class")
    def vocab(self) -> Vocab:
        return build_vocab(["b", "a", "b", "c", "a", "b"])

    def test_frequency_order(self, vocab: Vocab):
        assert vocab.apps == ["b", "a", "c"], "Expected apps by descending training frequency"
        assert vocab.size == 5, "Expected padding and unknown codes in the size"

    def test_codes(self, vocab: Vocab):
        assert vocab.encode(["b", "a", "c", "zzz"]).tolist() == [2, 3, 4, OOV], "Expected unseen apps to map to OOV"
        assert vocab.decode(PAD) == "<pad>", "Expected code 0 to be padding"

    def test_ties_broken_lexicographically(self):
        assert build_vocab(["y", "x", "z", "x", "y", "z"]).apps == ["x", "y", "z"], "Expected name order on ties"

    def test_decode_out_of_range(self, vocab: Vocab):
        with pytest.raises(VocabularyError):
            vocab.decode(vocab.size)

    def test_empty_pool(self):
        with pytest.raises(VocabularyError):
            build_vocab([])


class TestWindows:
    @pytest.fixture(scope="class")
    def test_config(self) -> dict:
        return {"seq_len": 3, "apps": [f"x{k}" for k in range(10)], "social": {"x4", "x8"}}

    @pytest.fixture(scope="class")
    def results(self, test_config: dict) -> SequenceDataset:
        apps = test_config["apps"]
        events = frame_of(apps, [DAY0 + 1000 * k for k in range(10)], test_config["social"])
        return build_sequences(events, SplitIndex(5, 7, 10), Vocab(apps), test_config["seq_len"])

    def test_shape(self, results: SequenceDataset):
        assert results.inputs.shape == (10, 3), "Expected one row per event"
        assert results.inputs.dtype == np.int32, "Expected int32 codes"

    def test_windows_never_cross_splits(self, results: SequenceDataset):
        expected = [
            [0, 0, 0],
            [0, 0, 2],
            [0, 2, 3],
            [2, 3, 4],
            [3, 4, 5],
            [0, 0, 0],
            [0, 0, 7],
            [0, 0, 0],
            [0, 0, 9],
            [0, 9, 10],
        ]
        assert results.inputs.tolist() == expected, "Expected left-padded predecessor windows restarting per split"

    def test_targets(self, results: SequenceDataset):
        assert np.flatnonzero(results.targets).tolist() == [4, 8], "Expected social targets at x4 and x8"

    def test_split_views(self, results: SequenceDataset):
        assert [len(results.split(s)) for s in ("train", "val", "test")] == [5, 2, 3], "Expected split sizes"
        assert results.users == ["u1"], "Expected a single user"


class TestSameDayWindows:
    @pytest.fixture(scope="class")
    def events(self) -> pd.DataFrame:
        timestamps = [
            DAY0 + MS_PER_DAY - 60_000,
            DAY0 + MS_PER_DAY - 30_000,
            DAY0 + MS_PER_DAY + 10_000,
            DAY0 + MS_PER_DAY + 60_000,
            DAY0 + MS_PER_DAY + 120_000,
            DAY0 + 2 * MS_PER_DAY,
        ]
        return frame_of([f"x{k}" for k in range(6)], timestamps, {"x5"})

    @pytest.fixture(scope="class")
    def vocab(self) -> Vocab:
        return Vocab([f"x{k}" for k in range(6)])

    def test_same_day_masks_earlier_days(self, events: pd.DataFrame, vocab: Vocab):
        dataset = build_sequences(events, SplitIndex(6, 6, 6), vocab, 3, same_day=True)
        assert dataset.inputs[2].tolist() == [0, 0, 0], "Expected predecessors from the previous day removed"
        assert dataset.inputs[4].tolist() == [0, 4, 5], "Expected same-day predecessors kept"
        assert dataset.inputs[5].tolist() == [0, 0, 0], "Expected the first event of a day to have no context"

    def test_default_windows_cross_days(self, events: pd.DataFrame, vocab: Vocab):
        dataset = build_sequences(events, SplitIndex(6, 6, 6), vocab, 3)
        assert dataset.inputs[2].tolist() == [0, 2, 3], "Expected windows to span midnight by default"


class TestClassWeights:
    def test_inverse_frequency(self):
        weights = class_weights(np.array([1, 0, 0, 0]))
        assert weights.weight_negative == pytest.approx(4 / 6), "Expected n / (2 * n_negative)"
        assert weights.weight_positive == pytest.approx(2.0), "Expected n / (2 * n_positive)"
        assert weights.per_example(np.array([0, 1])).tolist() == pytest.approx([4 / 6, 2.0]), "Expected per-row lookup"

    def test_single_class_is_degenerate(self):
        with pytest.raises(DegeneratePersonError):
            class_weights(np.zeros(5, dtype=np.uint8))


def test_one_hot_columns():
    dataset = SequenceDataset(
        inputs=np.array([[2, 0], [1, 3]], dtype=np.int32),
        targets=np.array([0, 1], dtype=np.uint8),
        user_ids=np.array(["u1", "u1"], dtype=object),
        splits=np.array(["train", "train"]),
        timestamps=np.array([1, 2], dtype=np.int64),
        seq_len=2,
        vocab_size=4,
    )
    features = tabular_features(dataset)
    assert features.shape == (2, 8), "Expected L * V columns"
    assert [sorted(features[i].indices.tolist()) for i in range(2)] == [[2, 4], [1, 7]], (
        "Expected column p * V + code for every position"
    )


def test_saved_dataset_loads_back(tmp_path: Path):
    apps = [f"x{k}" for k in range(10)]
    events = frame_of(apps, [DAY0 + 1000 * k for k in range(10)], {"x3"})
    vocab = Vocab(apps)
    dataset = build_sequences(events, SplitIndex(5, 7, 10), vocab, 4)
    save_dataset(tmp_path / "dataset_L4", dataset, vocab, source_hash="abc")
    loaded, loaded_vocab, sidecar = load_dataset(tmp_path / "dataset_L4")
    assert np.array_equal(loaded.inputs, dataset.inputs), "Expected identical windows"
    assert loaded_vocab == vocab, "Expected the vocabulary restored from the sidecar"
    assert sidecar["source_hash"] == "abc", "Expected the source hash recorded"
    assert loaded.splits.tolist() == dataset.splits.tolist(), "Expected split tags restored"
