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
import itertools
import math

import numpy as np
import pandas as pd
import pytest

from habitlens.dataset import build_sequences, build_vocab, temporal_split
from habitlens.errors import ConfigError, GeneratorMismatchError
from habitlens.synthgen import (
    EPOCH_START_MS,
    SYSTEM_APP,
    GeneratorModel,
    MotifFilter,
    SynthConfig,
    UserModel,
    bayes_oracle_scores,
    build_generator,
    generate_cohort,
    load_generator,
    manifest_path_for,
    oracle_event_scores,
    simulate_events,
    simulate_user,
)

APPS = ("com.instagram.android", "org.synth.a", "org.synth.b")


def single_user_model(habit_strength: float, motifs: tuple, base: np.ndarray | None = None) -> GeneratorModel:
    base = np.full((3, 3), 1.0 / 3) if base is None else base
    user = UserModel(habit_strength=habit_strength, sessions_per_day=50.0, base=base, motifs=motifs)
    return GeneratorModel(apps=APPS, social_apps=frozenset(APPS[:1]), users={"u": user}, days=1)


def sequence_probability(user: UserModel, sequence: list[int]) -> float:
    """
    Probability of an app sequence, summing over every motif/base choice path.
    """
    n_motifs = len(user.motifs)
    uniform = np.full(len(user.base), 1.0 / len(user.base))

    def walk(i: int, state: tuple[int, int] | None, prev: int) -> float:
        if i == len(sequence):
            return 1.0
        app = sequence[i]
        row = uniform if prev < 0 else user.base[prev]
        total = (1.0 - user.habit_strength) * row[app] * walk(i + 1, None, app)
        if state is None:
            candidates = [(m, 0, user.habit_strength / n_motifs) for m in range(n_motifs)]
        else:
            candidates = [(state[0], state[1], user.habit_strength)]
        for m, k, weight in candidates:
            motif = user.motifs[m]
            if motif[k] == app:
                following = (m, k + 1) if k + 1 < len(motif) else None
                total += weight * walk(i + 1, following, app)
        return total

    return walk(0, None, -1)


class TestMotifFilter:
    @pytest.fixture(scope="class")
    def model(self) -> GeneratorModel:
        base = np.random.default_rng(0).dirichlet(np.ones(3), size=3)
        return single_user_model(0.6, ((1, 2, 0), (1, 0), (2,)), base)

    @pytest.mark.parametrize("length", [0, 1, 2, 3, 4])
    def test_matches_path_enumeration(self, model: GeneratorModel, length: int):
        user = model.user("u")
        for history in itertools.product(range(3), repeat=length):
            before = sequence_probability(user, list(history))
            expected = [sequence_probability(user, [*history, a]) / before for a in range(3)]
            predicted = model.next_distribution("u", [APPS[a] for a in history])
            assert predicted == pytest.approx(expected, abs=1e-12), f"Filter disagrees after history {history}"

    def test_predictive_is_distribution(self, model: GeneratorModel):
        predicted = model.next_distribution("u", [APPS[a] for a in (1, 2, 2, 0, 1)])
        assert predicted.sum() == pytest.approx(1.0), "Expected a normalized next-app distribution"

    def test_full_habit_is_deterministic(self):
        model = single_user_model(1.0, ((0, 1, 2),))
        for history, expected in [([], 0), ([0], 1), ([0, 1], 2), ([0, 1, 2], 0)]:
            predicted = model.next_distribution("u", [APPS[a] for a in history])
            assert predicted.tolist() == pytest.approx(np.eye(3)[expected].tolist()), (
                f"Expected app {expected} certain after {history}"
            )

    def test_impossible_event(self):
        chain = MotifFilter(single_user_model(1.0, ((0, 1),)).user("u"))
        with pytest.raises(GeneratorMismatchError):
            chain.update(chain.initial_belief(), -1, 1)

    def test_no_habit_scores_social_share(self):
        model = build_generator(SynthConfig(n_users=1, habit_strength=0.0, base_structure=0.0, seed=5))
        apps = simulate_user(model, "u000")["app_id"].head(50).tolist()
        scores = oracle_event_scores(model, "u000", apps)
        assert np.allclose(scores, 2 / 12), "Expected the social share of a uniform chain"


class TestGeneration:
    @pytest.fixture(scope="class")
    def cfg(self) -> SynthConfig:
        return SynthConfig(n_users=3, days=2, sessions_per_day=30.0, system_fraction=0.2, seed=9)

    @pytest.fixture(scope="class")
    def cohort(self, cfg: SynthConfig):
        return generate_cohort(cfg)

    def test_same_seed_same_bytes(self, cfg, cohort):
        again = generate_cohort(cfg, workers=3)
        assert again.to_csv_bytes() == cohort.to_csv_bytes(), "Expected identical logs for one seed"
        assert again.manifest_bytes() == cohort.manifest_bytes(), "Expected identical manifests for one seed"

    def test_other_seed_differs(self, cohort):
        other = generate_cohort(SynthConfig(n_users=3, days=2, sessions_per_day=30.0, system_fraction=0.2, seed=10))
        assert other.to_csv_bytes() != cohort.to_csv_bytes(), "Expected a different log for another seed"

    def test_layout(self, cfg, cohort):
        events = cohort.events
        assert list(events.columns) == ["user_id", "timestamp", "app_id"], "Expected the ingest CSV columns"
        assert sorted(events["user_id"].unique()) == ["u000", "u001", "u002"], "Expected every user simulated"
        for _, frame in events.groupby("user_id"):
            stamps = frame["timestamp"].to_numpy()
            assert np.all(np.diff(stamps) > 0), "Expected strictly increasing timestamps"
            assert stamps.min() > EPOCH_START_MS, "Expected events after the log start"
            assert stamps.max() < EPOCH_START_MS + cfg.days * 86_400_000, "Expected events inside the window"

    def test_system_events_follow_app_events(self, cohort):
        events = cohort.events
        system = events.index[events["app_id"] == SYSTEM_APP]
        assert len(system) > 0, "Expected overlaid system events"
        previous = events.loc[system - 1]
        assert (previous["app_id"] != SYSTEM_APP).all(), "Expected system events only after app events"
        assert np.all(events.loc[system, "timestamp"].to_numpy() - previous["timestamp"].to_numpy() == 1), (
            "Expected system events 1 ms after their app event"
        )

    def test_oracle_skips_system_events(self, cohort):
        user = cohort.events[cohort.events["user_id"] == "u001"]
        scores = oracle_event_scores(cohort.model, "u001", user["app_id"].tolist())
        is_system = (user["app_id"] == SYSTEM_APP).to_numpy()
        assert np.isnan(scores[is_system]).all(), "Expected system events unscored"
        assert np.isfinite(scores[~is_system]).all(), "Expected every app event scored"

    def test_manifest_round_trip(self, cohort, tmp_path):
        _, manifest = cohort.write(tmp_path / "log.csv")
        assert manifest == manifest_path_for(tmp_path / "log.csv"), "Expected the manifest next to the log"
        loaded = load_generator(manifest)
        assert loaded.to_manifest() == cohort.model.to_manifest(), "Expected the generator restored"
        history = cohort.events[cohort.events["user_id"] == "u000"]["app_id"]
        history = [a for a in history.head(20) if a != SYSTEM_APP]
        restored = loaded.next_distribution("u000", history)
        assert np.allclose(restored, cohort.model.next_distribution("u000", history)), (
            "Expected the restored generator to predict the same"
        )

    def test_unknown_user_and_app(self, cohort):
        with pytest.raises(GeneratorMismatchError):
            cohort.model.next_distribution("nobody", [])
        with pytest.raises(GeneratorMismatchError):
            oracle_event_scores(cohort.model, "u000", ["org.unknown"])


class TestBayesOracle:
    @pytest.fixture(scope="class")
    def setup(self):
        model = build_generator(SynthConfig(n_users=1, days=3, sessions_per_day=80.0, habit_strength=0.8, seed=4))
        events = simulate_events(model)
        user_events = events.assign(is_social=events["app_id"].isin(model.social_apps))
        vocab = build_vocab(user_events["app_id"])
        dataset = build_sequences(user_events, temporal_split(len(user_events)), vocab, 5)
        return model, events, dataset

    def test_scores_every_row(self, setup):
        model, events, dataset = setup
        oracle = bayes_oracle_scores(model, events, dataset)
        assert oracle.scores.shape == (len(dataset),), "Expected one score per row"
        assert np.all((oracle.scores > 0) & (oracle.scores < 1)), "Expected probabilities"
        assert 0.5 < oracle.auc <= 1.0, f"Expected strong habits to be predictable, got {oracle.auc:.3f}"

    def test_label_disagreement(self, setup):
        model, events, dataset = setup
        flipped = dataset.subset(np.ones(len(dataset), dtype=bool))
        flipped.targets = 1 - flipped.targets
        with pytest.raises(GeneratorMismatchError):
            bayes_oracle_scores(model, events, flipped)

    def test_row_without_event(self, setup):
        model, _, dataset = setup
        with pytest.raises(GeneratorMismatchError):
            bayes_oracle_scores(model, pd.DataFrame({"user_id": [], "timestamp": [], "app_id": []}), dataset)


@pytest.mark.parametrize(
    "overrides",
    [{"n_apps": 2}, {"habit_strength": 1.5}, {"n_social": 0}, {"days": 0}, {"volume_coupling": 2.0}],
)
def test_invalid_config(overrides: dict):
    with pytest.raises(ConfigError):
        SynthConfig(**overrides)


def test_habit_spread_is_clipped():
    model = build_generator(SynthConfig(n_users=30, habit_strength=0.9, habit_spread=0.5, seed=1))
    strengths = [u.habit_strength for u in model.users.values()]
    assert min(strengths) >= 0.0 and max(strengths) <= 1.0, "Expected habit strengths inside [0, 1]"
    assert not math.isclose(min(strengths), max(strengths)), "Expected varied habit strengths"
