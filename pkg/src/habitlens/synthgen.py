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
Synthetic app-log cohorts with planted habit structure.

Each user follows a first-order Markov chain over apps, interleaved with
habit motifs: short fixed app sequences, some ending in a social app. At every
step the next app continues (or starts) a motif with probability ``h``, the
user's habit strength; otherwise the motif is abandoned and the app is drawn
from the base chain. The motif state is latent, so the exact predictive
distribution is obtained by filtering it from the observed apps. The same
filter drives generation and the Bayes-oracle scores.
"""

import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from habitlens.dataset import SequenceDataset
from habitlens.errors import ConfigError, GeneratorMismatchError
from habitlens.ingest import DEFAULT_SOCIAL_APPS, MS_PER_DAY
from habitlens.metrics import roc_auc
from habitlens.orchestration import Concurrency, Invoke, Runtime
from habitlens.seeding import derive_rng

logger = logging.getLogger(__name__)

SOCIAL_POOL = tuple(sorted(DEFAULT_SOCIAL_APPS))
SYSTEM_APP = "com.android.systemui"
EPOCH_START_MS = 1_704_067_200_000  # 2024-01-01T00:00:00Z
ROW_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SynthConfig:
    """
    Parameters
    ----------
    n_users : int
        Number of simulated users.
    days : int
        Length of every user's log in calendar days.
    sessions_per_day : float
        Mean event rate of a user with average volume.
    n_apps : int
        Size of the app universe, social apps included.
    n_social : int
        Number of social apps, named after real social packages.
    habit_strength : float
        Probability of following a motif at each step.
    motif_length : int
        Apps per motif.
    motifs_per_user : int
        Motifs in each user's repertoire.
    idiosyncrasy : float
        Probability that a user's motif or base chain is private rather than
        drawn from the shared pool.
    base_structure : float
        0 gives a uniform base chain, 1 fully random Dirichlet rows.
    social_motif_fraction : float
        Probability that a motif ends in a social app.
    system_fraction : float
        Probability of a system-UI event after each app event.
    habit_spread : float
        Standard deviation of per-user habit strength around ``habit_strength``.
    volume_spread : float
        Log-scale standard deviation of per-user event rates.
    volume_coupling : float
        Correlation between a user's habit strength and event-rate deviations.
    seed : int
        Root seed.
    """

    n_users: int = 20
    days: int = 14
    sessions_per_day: float = 100.0
    n_apps: int = 12
    n_social: int = 2
    habit_strength: float = 0.5
    motif_length: int = 3
    motifs_per_user: int = 3
    idiosyncrasy: float = 0.5
    base_structure: float = 0.0
    social_motif_fraction: float = 0.5
    system_fraction: float = 0.0
    habit_spread: float = 0.0
    volume_spread: float = 0.0
    volume_coupling: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1 or self.days < 1 or self.sessions_per_day <= 0:
            raise ConfigError("n_users, days and sessions_per_day must be positive")
        if self.motif_length < 1 or self.motifs_per_user < 1:
            raise ConfigError("motif_length and motifs_per_user must be >= 1")
        if not 1 <= self.n_social <= len(SOCIAL_POOL):
            raise ConfigError(f"n_social must be in [1, {len(SOCIAL_POOL)}], got {self.n_social}")
        if self.n_apps <= self.n_social:
            raise ConfigError("n_apps must exceed n_social")
        for name in ("habit_strength", "idiosyncrasy", "base_structure", "social_motif_fraction", "system_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.habit_spread < 0 or self.volume_spread < 0:
            raise ConfigError("spreads must be non-negative")
        if not -1.0 <= self.volume_coupling <= 1.0:
            raise ConfigError(f"volume_coupling must be in [-1, 1], got {self.volume_coupling}")

    @property
    def apps(self) -> tuple[str, ...]:
        others = tuple(f"org.synth.app{k:03d}" for k in range(self.n_apps - self.n_social))
        return SOCIAL_POOL[: self.n_social] + others


@dataclass(frozen=True)
class UserModel:
    """
    Generator of a single user.

    ``base`` is a row-stochastic ``(V, V)`` transition matrix and ``motifs``
    are sequences of app indices.
    """

    habit_strength: float
    sessions_per_day: float
    base: np.ndarray
    motifs: tuple[tuple[int, ...], ...]

    def validate(self, n_apps: int) -> None:
        if self.base.shape != (n_apps, n_apps):
            raise ConfigError(f"base chain must be {n_apps}x{n_apps}, got {self.base.shape}")
        if np.any(self.base < 0) or np.max(np.abs(self.base.sum(axis=1) - 1.0)) > ROW_TOLERANCE:
            raise ConfigError("base chain rows must be distributions")
        if not self.motifs or any(not m or min(m) < 0 or max(m) >= n_apps for m in self.motifs):
            raise ConfigError("motifs must be non-empty and reference known apps")
        if not 0.0 <= self.habit_strength <= 1.0:
            raise ConfigError(f"habit strength must be in [0, 1], got {self.habit_strength}")


class MotifFilter:
    """
    Exact filtering of a user's latent motif state.

    State 0 means no motif is in progress; every other state is a motif
    position with at least one element still to come.
    """

    def __init__(self, user: UserModel):
        self.h = user.habit_strength
        self.base = user.base
        self.initial = np.full(len(user.base), 1.0 / len(user.base))
        next_app, successor = [-1], [0]
        start_app, start_state = [], []
        for motif in user.motifs:
            first = len(next_app)
            start_app.append(motif[0])
            start_state.append(first if len(motif) > 1 else 0)
            for k in range(len(motif) - 1):
                next_app.append(motif[k + 1])
                successor.append(len(next_app) if k + 2 < len(motif) else 0)
        self.next_app = np.array(next_app)
        self.successor = np.array(successor)
        self.start_app = np.array(start_app)
        self.start_state = np.array(start_state)
        self.start_weight = np.full(len(start_app), 1.0 / len(start_app))

    @property
    def n_states(self) -> int:
        return len(self.next_app)

    def initial_belief(self) -> np.ndarray:
        belief = np.zeros(self.n_states)
        belief[0] = 1.0
        return belief

    def _base_row(self, prev: int) -> np.ndarray:
        return self.initial if prev < 0 else self.base[prev]

    def predictive(self, belief: np.ndarray, prev: int) -> np.ndarray:
        motif = np.zeros(len(self.initial))
        np.add.at(motif, self.next_app[1:], belief[1:])
        np.add.at(motif, self.start_app, belief[0] * self.start_weight)
        return self.h * motif + (1.0 - self.h) * self._base_row(prev)

    def update(self, belief: np.ndarray, prev: int, app: int) -> np.ndarray:
        posterior = np.zeros(self.n_states)
        posterior[0] = (1.0 - self.h) * self._base_row(prev)[app] * belief.sum()
        hits = np.flatnonzero(self.next_app[1:] == app) + 1
        np.add.at(posterior, self.successor[hits], self.h * belief[hits])
        starts = np.flatnonzero(self.start_app == app)
        np.add.at(posterior, self.start_state[starts], self.h * belief[0] * self.start_weight[starts])
        total = posterior.sum()
        if total <= 0.0:
            raise GeneratorMismatchError(f"app index {app} is impossible under the generator")
        return posterior / total


@dataclass(frozen=True)
class GeneratorModel:
    apps: tuple[str, ...]
    social_apps: frozenset[str]
    users: Mapping[str, UserModel]
    days: int = 14
    seed: int = 0
    config: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for user in self.users.values():
            user.validate(len(self.apps))

    @property
    def social_mask(self) -> np.ndarray:
        return np.array([a in self.social_apps for a in self.apps])

    def user(self, user_id: str) -> UserModel:
        try:
            return self.users[user_id]
        except KeyError:
            raise GeneratorMismatchError(f"user '{user_id}' is not part of the generator") from None

    def app_index(self, app_id: str) -> int:
        try:
            return self.apps.index(app_id)
        except ValueError:
            raise GeneratorMismatchError(f"app '{app_id}' is not part of the generator") from None

    def next_distribution(self, user_id: str, history: Sequence[str]) -> np.ndarray:
        """
        Probability of every app being next, given the user's full history.
        """
        chain = MotifFilter(self.user(user_id))
        belief, prev = chain.initial_belief(), -1
        for app_id in history:
            app = self.app_index(app_id)
            belief, prev = chain.update(belief, prev, app), app
        return chain.predictive(belief, prev)

    def to_manifest(self) -> dict[str, Any]:
        return {
            "apps": list(self.apps),
            "social_apps": sorted(self.social_apps),
            "days": self.days,
            "seed": self.seed,
            "config": dict(self.config),
            "users": {
                uid: {
                    "habit_strength": u.habit_strength,
                    "sessions_per_day": u.sessions_per_day,
                    "base": u.base.tolist(),
                    "motifs": [[self.apps[i] for i in m] for m in u.motifs],
                }
                for uid, u in sorted(self.users.items())
            },
        }

    @classmethod
    def from_manifest(cls, manifest: Mapping[str, Any]) -> "GeneratorModel":
        apps = tuple(manifest["apps"])
        users = {
            uid: UserModel(
                habit_strength=float(u["habit_strength"]),
                sessions_per_day=float(u["sessions_per_day"]),
                base=np.asarray(u["base"], dtype=np.float64),
                motifs=tuple(tuple(apps.index(a) for a in m) for m in u["motifs"]),
            )
            for uid, u in manifest["users"].items()
        }
        return cls(
            apps=apps,
            social_apps=frozenset(manifest["social_apps"]),
            users=users,
            days=int(manifest["days"]),
            seed=int(manifest["seed"]),
            config=manifest.get("config", {}),
        )


def _draw_motif(cfg: SynthConfig, rng: np.random.Generator) -> tuple[int, ...]:
    social = np.arange(cfg.n_social)
    other = np.arange(cfg.n_social, cfg.n_apps)
    prefix = rng.choice(other, size=cfg.motif_length - 1).tolist()
    last_pool = social if rng.random() < cfg.social_motif_fraction else other
    return tuple(int(a) for a in [*prefix, rng.choice(last_pool)])


def _draw_base(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    rows = rng.dirichlet(np.ones(cfg.n_apps), size=cfg.n_apps)
    base = (1.0 - cfg.base_structure) / cfg.n_apps + cfg.base_structure * rows
    return base / base.sum(axis=1, keepdims=True)


def build_generator(cfg: SynthConfig) -> GeneratorModel:
    """
    Draw the per-user generators of a cohort.
    """
    shared = derive_rng(cfg.seed, "shared")
    shared_motifs = [_draw_motif(cfg, shared) for _ in range(cfg.motifs_per_user)]
    shared_base = _draw_base(cfg, shared)
    users = {}
    for index in range(cfg.n_users):
        rng = derive_rng(cfg.seed, "user-model", index)
        motifs = tuple(
            _draw_motif(cfg, rng) if rng.random() < cfg.idiosyncrasy else shared_motifs[slot]
            for slot in range(cfg.motifs_per_user)
        )
        base = _draw_base(cfg, rng) if rng.random() < cfg.idiosyncrasy else shared_base
        volume, noise = rng.standard_normal(2)
        habit_noise = cfg.volume_coupling * volume + math.sqrt(1.0 - cfg.volume_coupling**2) * noise
        users[f"u{index:03d}"] = UserModel(
            habit_strength=float(np.clip(cfg.habit_strength + cfg.habit_spread * habit_noise, 0.0, 1.0)),
            sessions_per_day=float(cfg.sessions_per_day * math.exp(cfg.volume_spread * volume)),
            base=base,
            motifs=motifs,
        )
    return GeneratorModel(
        apps=cfg.apps,
        social_apps=frozenset(SOCIAL_POOL[: cfg.n_social]),
        users=users,
        days=cfg.days,
        seed=cfg.seed,
        config=asdict(cfg),
    )


def simulate_user(model: GeneratorModel, user_id: str, system_fraction: float = 0.0) -> pd.DataFrame:
    """
    Events of one user over ``model.days`` days, at least 2 ms apart.

    System-UI events are overlaid 1 ms after an app event and do not enter
    the habit chain.
    """
    user = model.user(user_id)
    rng = derive_rng(model.seed, "events", user_id)
    chain = MotifFilter(user)
    mean_gap = MS_PER_DAY / user.sessions_per_day
    end = EPOCH_START_MS + model.days * MS_PER_DAY
    belief, prev, t = chain.initial_belief(), -1, EPOCH_START_MS
    timestamps, apps = [], []
    while True:
        t += max(2, int(rng.exponential(mean_gap)))
        if t >= end:
            break
        p = chain.predictive(belief, prev)
        app = int(rng.choice(len(p), p=p / p.sum()))
        belief, prev = chain.update(belief, prev, app), app
        timestamps.append(t)
        apps.append(model.apps[app])
        if system_fraction and rng.random() < system_fraction:
            timestamps.append(t + 1)
            apps.append(SYSTEM_APP)
    return pd.DataFrame({"user_id": user_id, "timestamp": np.array(timestamps, dtype=np.int64), "app_id": apps})


@dataclass
class SyntheticCohort:
    events: pd.DataFrame
    model: GeneratorModel

    def to_csv_bytes(self) -> bytes:
        return self.events.to_csv(index=False, lineterminator="\n").encode("utf-8")

    def manifest_bytes(self) -> bytes:
        return (json.dumps(self.model.to_manifest(), sort_keys=True, indent=2) + "\n").encode("utf-8")

    def write(self, csv_path: Path) -> tuple[Path, Path]:
        csv_path = Path(csv_path)
        manifest_path = manifest_path_for(csv_path)
        csv_path.write_bytes(self.to_csv_bytes())
        manifest_path.write_bytes(self.manifest_bytes())
        return csv_path, manifest_path


def manifest_path_for(csv_path: Path) -> Path:
    """
    Ground-truth manifest written next to a generated log.
    """
    return Path(csv_path).with_suffix(".manifest.json")


def load_generator(path: Path) -> GeneratorModel:
    return GeneratorModel.from_manifest(json.loads(Path(path).read_text(encoding="utf-8")))


def simulate_events(model: GeneratorModel, system_fraction: float = 0.0, workers: int = 1) -> pd.DataFrame:
    """
    Events of every user, simulated as independent jobs.
    """
    block = Concurrency.of(
        Invoke(uid, partial(simulate_user, model, uid, system_fraction)) for uid in sorted(model.users)
    )
    frames = Runtime(workers).run(block).values
    return pd.concat([frames[uid] for uid in sorted(frames)], ignore_index=True)


def generate_cohort(cfg: SynthConfig, workers: int = 1) -> SyntheticCohort:
    """
    Draw generators and simulate a full cohort in the ingest CSV layout.
    """
    model = build_generator(cfg)
    events = simulate_events(model, cfg.system_fraction, workers)
    logger.info(
        "synthetic cohort generated",
        extra={"id": "simulate", "users": cfg.n_users, "events": len(events), "seed": cfg.seed},
    )
    return SyntheticCohort(events, model)


def oracle_event_scores(model: GeneratorModel, user_id: str, app_ids: Sequence[str]) -> np.ndarray:
    """
    Exact probability that each event is social given all earlier events.

    System-UI events are skipped and scored ``NaN``.
    """
    chain = MotifFilter(model.user(user_id))
    social = model.social_mask
    belief, prev = chain.initial_belief(), -1
    scores = np.full(len(app_ids), np.nan)
    for i, app_id in enumerate(app_ids):
        if app_id == SYSTEM_APP:
            continue
        app = model.app_index(app_id)
        scores[i] = float(chain.predictive(belief, prev)[social].sum())
        belief, prev = chain.update(belief, prev, app), app
    return scores


@dataclass(frozen=True)
class OracleScores:
    scores: np.ndarray
    auc: float


def bayes_oracle_scores(model: GeneratorModel, events: pd.DataFrame, dataset: SequenceDataset) -> OracleScores:
    """
    Bayes-optimal scores for the rows of a dataset built from ``events``.

    Rows are matched to events by user and target timestamp. The latent
    motif state is filtered over each user's full history, which bounds any
    model that sees only a window of it.

    Raises
    ------
    GeneratorMismatchError
        A row, user or app has no counterpart in the generator, or a row's
        label disagrees with the generator's social apps.
    """
    scores = np.full(len(dataset), np.nan)
    for user_id in dataset.users:
        user_events = events[events["user_id"] == user_id].sort_values("timestamp", kind="mergesort")
        per_event = oracle_event_scores(model, user_id, user_events["app_id"].tolist())
        lookup = dict(zip(user_events["timestamp"].to_numpy(dtype=np.int64).tolist(), per_event.tolist()))
        rows = np.flatnonzero(dataset.user_ids == user_id)
        for row in rows:
            score = lookup.get(int(dataset.timestamps[row]))
            if score is None or math.isnan(score):
                raise GeneratorMismatchError(f"row {row} of user '{user_id}' has no generated event")
            scores[row] = score
        social = user_events.set_index("timestamp")["app_id"].isin(model.social_apps)
        labels = social.loc[dataset.timestamps[rows]].to_numpy(dtype=np.uint8)
        if not np.array_equal(labels, dataset.targets[rows]):
            raise GeneratorMismatchError(f"labels of user '{user_id}' disagree with the generator")
    return OracleScores(scores, roc_auc(scores, dataset.targets))
