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
import json
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import pytest
from cli_scenario import CliScenario, ScenarioResult, write_synthetic_log

from habitlens.dataset import load_dataset


class TestIngest(CliScenario):
    @pytest.fixture(scope="class")
    def scenario_name(self) -> str:
        return "ingest"

    @pytest.fixture(scope="class")
    def test_config(self) -> dict[str, Any]:
        return {
            "runtime": {"workers": 1, "seed": 0},
            "cohort": {"min_sessions": 100},
            "train": {"seq_len": 5},
        }

    @pytest.fixture(scope="class")
    def data_file(self, tmp_path_factory: pytest.TempPathFactory) -> Path:
        return write_synthetic_log(tmp_path_factory.mktemp("data"), system_fraction=0.1)

    @pytest.fixture(scope="class")
    def extra_args(self, data_file: Path) -> list[str]:
        return ["--data", str(data_file)]

    def test_cohort_outputs(self, results: ScenarioResult):
        cohort = pd.read_csv(results.out_dir / "cohort.csv")
        assert list(cohort.columns) == ["user_id", "timestamp", "app_id", "is_social"], "Unexpected cohort columns"
        assert sorted(cohort["user_id"].unique()) == ["u000", "u001", "u002", "u003"], "Expected all users retained"
        assert not cohort["app_id"].str.contains("systemui").any(), "Expected system UI events removed"
        users = pd.read_csv(results.out_dir / "users.csv")
        assert users["sessions"].sum() == len(cohort), "Expected user summaries to cover the cohort"

    def test_cleaning_tallies(self, results: ScenarioResult):
        tallies = pd.read_csv(results.out_dir / "cleaning.csv").set_index("rule")["removed"]
        assert sorted(tallies.index) == ["blocked", "empty", "system"], "Expected one tally per cleaning rule"
        assert tallies["system"] > 0, "Expected system events tallied"

    def test_dataset(self, results: ScenarioResult):
        dataset, vocab, sidecar = load_dataset(results.out_dir / "dataset_L5")
        assert dataset.seq_len == 5, "Expected the configured window length"
        assert dataset.inputs.shape == (len(dataset), 5), "Expected one window per event"
        assert vocab.size == sidecar["vocab_size"], "Expected the vocabulary stored with the dataset"
        assert set(np.unique(dataset.splits)) == {"train", "val", "test"}, "Expected every split tagged"

    def test_manifest(self, results: ScenarioResult, data_file: Path):
        manifest = json.loads((results.out_dir / "manifest_ingest.json").read_text())
        assert str(data_file) in manifest["inputs"], "Expected the input log hashed"
        assert len(manifest["config"]["split_hash"]) == 64, "Expected the split fingerprint recorded"
        assert {"cohort.csv", "dataset_L5.npz", "dataset_L5.json"} <= set(manifest["outputs"]), (
            "Expected every artifact hashed"
        )
        assert manifest["config"]["cohort"]["min_sessions"] == 100, "Expected config values merged"


class TestIngestFlagsOverrideConfig(TestIngest):
    @pytest.fixture(scope="class")
    def test_config(self) -> dict[str, Any]:
        return {
            "runtime": {"workers": 1, "seed": 0},
            "cohort": {"min_sessions": 5000},
            "train": {"seq_len": 5},
        }

    @pytest.fixture(scope="class")
    def extra_args(self, data_file: Path) -> list[str]:
        return ["--data", str(data_file), "--min-sessions", "100"]


class TestNgram(CliScenario):
    @pytest.fixture(scope="class")
    def scenario_name(self) -> str:
        return "ngram"

    @pytest.fixture(scope="class")
    def test_config(self) -> dict[str, Any]:
        return {"runtime": {"workers": 1, "seed": 0}, "cohort": {"min_sessions": 100}}

    @pytest.fixture(scope="class")
    def extra_args(self, tmp_path_factory: pytest.TempPathFactory) -> list[str]:
        data = write_synthetic_log(tmp_path_factory.mktemp("data"))
        return ["--data", str(data), "--n", "2", "--top", "5"]

    def test_tables(self, results: ScenarioResult):
        pooled = pd.read_csv(results.out_dir / "ngram2_pooled.csv")
        per_user = pd.read_csv(results.out_dir / "ngram2_per_user.csv")
        assert len(pooled) == 5, "Expected the top five bigrams"
        assert pooled["frequency"].is_monotonic_decreasing, "Expected bigrams by decreasing frequency"
        assert pooled["probability"].between(0, 1).all(), "Expected probabilities"
        assert per_user.groupby("user_id").size().max() <= 5, "Expected at most five bigrams per user"


class TestDescriptives(CliScenario):
    @pytest.fixture(scope="class")
    def scenario_name(self) -> str:
        return "descriptives"

    @pytest.fixture(scope="class")
    def test_config(self) -> dict[str, Any]:
        return {"runtime": {"workers": 1, "seed": 0}, "cohort": {"min_sessions": 100}}

    @pytest.fixture(scope="class")
    def extra_args(self, tmp_path_factory: pytest.TempPathFactory) -> list[str]:
        return ["--data", str(write_synthetic_log(tmp_path_factory.mktemp("data")))]

    def test_tables(self, results: ScenarioResult):
        summary = pd.read_csv(results.out_dir / "descriptives_users.csv")
        assert set(summary["stage"]) == {"raw", "cohort"}, "Expected both stages summarized"
        apps = pd.read_csv(results.out_dir / "descriptives_apps.csv")
        assert apps["session_share"].sum() == pytest.approx(1.0), "Expected session shares to add up"
