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
App-log ingestion: parsing, cleaning, cohort filtering and social labelling.

Event streams are ``pandas.DataFrame`` objects with the columns of
``EVENT_COLUMNS``. Timestamps are UTC epoch milliseconds (``int64``); ``record``
is the 0-based index of the record in its source and breaks timestamp ties.
Streams are grouped by user (sorted by ``user_id``) and sorted by
``(timestamp, record)`` within each user.
"""

import io
import json
import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Literal

import numpy as np
import pandas as pd

from habitlens.config import load_list_file
from habitlens.errors import ConfigError, EmptyInputError, LogParseError, MalformedLogError

logger = logging.getLogger(__name__)

EVENT_COLUMNS = ["user_id", "timestamp", "app_id", "record"]
REQUIRED_FIELDS = ("user_id", "timestamp", "app_id")
MS_PER_DAY = 86_400_000
UNIX_EPOCH = pd.Timestamp(0, tz="UTC")

# Social-media apps by canonical Android package name.
DEFAULT_SOCIAL_APPS = frozenset(
    {
        "com.discord",  # Discord
        "com.facebook.katana",  # Facebook
        "com.facebook.lite",  # Facebook Lite
        "com.facebook.local",  # Facebook Local
        "com.instagram.android",  # Instagram
        "kik.android",  # Kik
        "com.linkedin.android",  # LinkedIn
        "com.pinterest",  # Pinterest
        "com.reddit.frontpage",  # Reddit
        "com.snapchat.android",  # Snapchat
        "com.zhiliaoapp.musically",  # TikTok
        "com.tumblr",  # Tumblr
        "com.twitter.android",  # Twitter
        "com.google.android.youtube",  # Youtube
    }
)

DEFAULT_BLOCKED_APPS = frozenset({"edu.stanford.screenomics"})
DEFAULT_SYSTEM_UI_PATTERNS = ("launcher", "systemui", "com.android.settings.intelligence")


@dataclass(frozen=True)
class AppEvent:
    """
    One logged app session.

    Parameters
    ----------
    user_id : str
        Opaque user identifier.
    timestamp : int
        UTC epoch milliseconds.
    app_id : str
        Lowercased Android package name.
    """

    user_id: str
    timestamp: int
    app_id: str


def events_frame(events: Iterable[AppEvent]) -> pd.DataFrame:
    """
    Build a sorted event stream from ``AppEvent`` records.
    """
    rows = [(e.user_id, int(e.timestamp), e.app_id.lower(), i) for i, e in enumerate(events)]
    frame = pd.DataFrame(rows, columns=EVENT_COLUMNS)
    return _sort_events(_typed(frame))


def _typed(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.astype({"user_id": str, "timestamp": "int64", "app_id": str, "record": "int64"})


def _sort_events(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.sort_values(["user_id", "timestamp", "record"], kind="mergesort")
    return frame.reset_index(drop=True)


def empty_events() -> pd.DataFrame:
    return _typed(pd.DataFrame({c: [] for c in EVENT_COLUMNS}))


@dataclass
class ParseResult:
    """
    Outcome of ``parse_log_file``.

    Parameters
    ----------
    events : pd.DataFrame
        Well-formed events, grouped by user and time-sorted.
    errors : list[LogParseError]
        One entry per malformed record.
    n_records : int
        Number of records read, malformed ones included.
    """

    events: pd.DataFrame
    errors: list[LogParseError] = field(default_factory=list)
    n_records: int = 0

    @property
    def malformed_fraction(self) -> float:
        return len(self.errors) / self.n_records if self.n_records else 0.0

    def check_tolerance(self, max_malformed_fraction: float = 0.01) -> None:
        """
        Abort when more than ``max_malformed_fraction`` of the records are malformed.
        """
        if self.malformed_fraction > max_malformed_fraction:
            first = "; ".join(str(e) for e in self.errors[:3])
            raise MalformedLogError(
                f"{len(self.errors)} of {self.n_records} records malformed "
                f"(tolerance {max_malformed_fraction:.2%}): {first}"
            )


def _parse_timestamps(values: pd.Series) -> pd.Series:
    """
    Parse ISO-8601 strings or integer epoch milliseconds to epoch milliseconds.

    Unparseable values become ``NaN``.
    """
    text = values.astype(str).str.strip()
    result = pd.Series(np.nan, index=values.index, dtype="float64")

    is_epoch = text.str.fullmatch(r"-?\d+")
    if is_epoch.any():
        result[is_epoch] = pd.to_numeric(text[is_epoch], errors="coerce")

    iso = ~is_epoch & (text != "")
    if iso.any():
        parsed = pd.to_datetime(text[iso], utc=True, format="ISO8601", errors="coerce")
        valid = parsed.notna()
        millis = (parsed[valid] - UNIX_EPOCH) // pd.Timedelta(1, unit="ms")
        result[parsed[valid].index] = millis.astype("float64")
    return result


# Raw bytes that are not UTF-8 are kept as lone surrogates and reported per record.
_UNDECODABLE = "[\udc80-\udcff]"
_WIDE_ROW = "\x00wide"


def _records_from_csv(data: bytes) -> tuple[pd.DataFrame, list[int], list[LogParseError]]:
    text = data.decode("utf-8", errors="surrogateescape")
    if not text.strip():
        return pd.DataFrame(columns=list(REQUIRED_FIELDS)), [], []
    try:
        # header=None keeps pandas from reading a wide first row as an index column.
        raw = pd.read_csv(
            io.StringIO(text),
            header=None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
            engine="python",
            on_bad_lines=lambda fields: [_WIDE_ROW, str(len(fields))],
        )
    except pd.errors.ParserError as e:
        raise OSError(f"unreadable CSV log: {e}") from e
    header = raw.iloc[0].fillna("").astype(str).str.strip().tolist()
    missing = [c for c in REQUIRED_FIELDS if c not in header]
    if missing:
        raise OSError(f"CSV log header lacks required columns {missing}")
    raw = raw.iloc[1:].set_axis(header, axis=1)
    # Header is line 1.
    lines = np.arange(2, len(raw) + 2)

    wide = (raw.iloc[:, 0] == _WIDE_ROW).to_numpy()
    widths = raw.iloc[:, 1].to_numpy()
    errors = [
        LogParseError(int(n), f"expected {len(header)} fields, saw {w}") for n, w in zip(lines[wide], widths[wide])
    ]
    frame = raw[list(REQUIRED_FIELDS)]
    undecodable = frame.apply(lambda col: col.fillna("").astype(str).str.contains(_UNDECODABLE)).any(axis=1)
    undecodable = undecodable.to_numpy() & ~wide
    errors += [LogParseError(int(n), "invalid UTF-8") for n in lines[undecodable]]
    blank = (frame.isna().all(axis=1) | (frame.fillna("") == "").all(axis=1)).to_numpy()
    keep = ~(wide | undecodable | blank)
    return frame[keep].reset_index(drop=True), lines[keep].tolist(), errors


def _field_text(value: object) -> str | None:
    """
    JSON scalar as text; integral numbers lose their ``.0``.
    """
    if value is None or isinstance(value, str):
        return value
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    if isinstance(value, int | float | bool):
        return str(value)
    return json.dumps(value)


def _records_from_jsonl(data: bytes) -> tuple[pd.DataFrame, list[int], list[LogParseError]]:
    rows, lines, errors = [], [], []
    for number, encoded in enumerate(data.splitlines(), start=1):
        try:
            raw = encoded.decode("utf-8")
        except UnicodeDecodeError:
            errors.append(LogParseError(number, "invalid UTF-8"))
            continue
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as e:
            errors.append(LogParseError(number, f"invalid JSON: {e.msg}"))
            continue
        if not isinstance(record, dict):
            errors.append(LogParseError(number, "record is not an object"))
            continue
        rows.append({k: _field_text(record.get(k)) for k in REQUIRED_FIELDS})
        lines.append(number)
    return pd.DataFrame(rows, columns=list(REQUIRED_FIELDS), dtype=object), lines, errors


def parse_log_file(source: BinaryIO, log_format: Literal["csv", "jsonl"] = "csv") -> ParseResult:
    """
    Parse a raw app-log export.

    Records missing a required field, or whose timestamp cannot be parsed, are
    collected as ``LogParseError`` entries with their line number instead of
    being dropped silently. Call ``ParseResult.check_tolerance`` to enforce the
    malformed-record threshold.

    Parameters
    ----------
    source : BinaryIO
        UTF-8 byte stream.
    log_format : str
        ``"csv"`` (header ``user_id,timestamp,app_id``) or ``"jsonl"``.
    """
    data = source.read()
    if log_format == "csv":
        records, lines, errors = _records_from_csv(data)
    elif log_format == "jsonl":
        records, lines, errors = _records_from_jsonl(data)
    else:
        raise ConfigError(f"unsupported log format '{log_format}'")

    errors.sort(key=lambda e: e.line)
    n_records = len(records) + len(errors)
    if records.empty:
        return ParseResult(empty_events(), errors, n_records)

    records = records.copy()
    records["line"] = lines
    user = records["user_id"]
    app = records["app_id"]
    missing_user = user.isna() | (user.astype(str).str.strip() == "")
    missing_ts = records["timestamp"].isna() | (records["timestamp"].astype(str).str.strip() == "")
    missing_app = app.isna()
    timestamps = _parse_timestamps(records["timestamp"].fillna(""))
    bad_ts = ~missing_ts & timestamps.isna()

    for row in records.itertuples():
        i = row.Index
        if missing_user[i]:
            errors.append(LogParseError(row.line, "missing field 'user_id'"))
        elif missing_ts[i]:
            errors.append(LogParseError(row.line, "missing field 'timestamp'"))
        elif missing_app[i]:
            errors.append(LogParseError(row.line, "missing field 'app_id'"))
        elif bad_ts[i]:
            errors.append(LogParseError(row.line, f"unparseable timestamp '{row.timestamp}'"))

    valid = ~(missing_user | missing_ts | missing_app | bad_ts)
    events = pd.DataFrame(
        {
            "user_id": user[valid].astype(str).str.strip(),
            "timestamp": timestamps[valid].astype("int64"),
            "app_id": app[valid].astype(str).str.strip().str.lower(),
            "record": records.index[valid],
        }
    )
    errors.sort(key=lambda e: e.line)
    logger.info(
        "log parsed",
        extra={"id": "parse", "records": n_records, "events": int(valid.sum()), "malformed": len(errors)},
    )
    return ParseResult(_sort_events(_typed(events)), errors, n_records)


def read_log(path: Path, max_malformed_fraction: float = 0.01) -> pd.DataFrame:
    """
    Parse a log file by extension (``.jsonl`` or CSV) and enforce the tolerance.
    """
    path = Path(path)
    log_format = "jsonl" if path.suffix.lower() in (".jsonl", ".ndjson") else "csv"
    with open(path, "rb") as source:
        result = parse_log_file(source, log_format)
    result.check_tolerance(max_malformed_fraction)
    return result.events


@dataclass(frozen=True)
class CleaningConfig:
    """
    Parameters
    ----------
    blocked_app_ids : frozenset[str]
        Exact package names to drop (the data-collection app).
    system_ui_patterns : tuple[str, ...]
        Substrings identifying navigational and system UI processes.
    drop_empty : bool
        Drop events without an app id.
    filter_system : bool
        Apply ``system_ui_patterns``. Disabled for the alternative cleaning
        variant that keeps launcher and system UI events.
    """

    blocked_app_ids: frozenset[str] = DEFAULT_BLOCKED_APPS
    system_ui_patterns: tuple[str, ...] = DEFAULT_SYSTEM_UI_PATTERNS
    drop_empty: bool = True
    filter_system: bool = True

    def __post_init__(self):
        if self.filter_system and not self.system_ui_patterns:
            raise ConfigError("system_ui_patterns must be non-empty when system filtering is enabled")

    @classmethod
    def from_files(
        cls,
        blocked_apps: Path | None = None,
        system_ui_patterns: Path | None = None,
        *,
        filter_system: bool = True,
        drop_empty: bool = True,
    ) -> "CleaningConfig":
        return cls(
            blocked_app_ids=(
                frozenset(a.lower() for a in load_list_file(blocked_apps)) if blocked_apps else DEFAULT_BLOCKED_APPS
            ),
            system_ui_patterns=(
                tuple(p.lower() for p in load_list_file(system_ui_patterns))
                if system_ui_patterns
                else DEFAULT_SYSTEM_UI_PATTERNS
            ),
            drop_empty=drop_empty,
            filter_system=filter_system,
        )


@dataclass
class CleaningResult:
    events: pd.DataFrame
    tallies: dict[str, int]


def clean_events(events: pd.DataFrame, cfg: CleaningConfig) -> CleaningResult:
    """
    Drop empty, blocked and system UI events, preserving relative order.

    Each removed event is tallied once, in the category order
    ``empty``, ``blocked``, ``system``.
    """
    app = events["app_id"].astype(str)
    empty = (app.str.strip() == "") if cfg.drop_empty else pd.Series(False, index=events.index)
    blocked = ~empty & app.isin(cfg.blocked_app_ids)
    system = pd.Series(False, index=events.index)
    if cfg.filter_system:
        for pattern in cfg.system_ui_patterns:
            system |= app.str.contains(pattern, regex=False)
        system &= ~empty & ~blocked

    tallies = {"empty": int(empty.sum()), "blocked": int(blocked.sum()), "system": int(system.sum())}
    kept = events[~(empty | blocked | system)].reset_index(drop=True)
    logger.info("events cleaned", extra={"id": "clean", "kept": len(kept), **tallies})
    return CleaningResult(kept, tallies)


def label_social(app_id: str, social_apps: frozenset[str] = DEFAULT_SOCIAL_APPS) -> bool:
    return app_id in social_apps


@dataclass(frozen=True)
class CohortConfig:
    """
    Parameters
    ----------
    min_days : int
        Minimum number of UTC calendar days spanned by a user's events.
    truncate_days : int
        Length of the retained observation window in calendar days.
    min_sessions : int
        Minimum number of events after truncation.
    min_social_fraction : float
        Minimum (inclusive) share of social-media events after truncation.
    social_apps : frozenset[str]
        Package names labelled as social media.
    """

    min_days: int = 14
    truncate_days: int = 14
    min_sessions: int = 1000
    min_social_fraction: float = 0.05
    social_apps: frozenset[str] = DEFAULT_SOCIAL_APPS

    def __post_init__(self):
        if not 0 < self.min_social_fraction < 1:
            raise ConfigError(f"min_social_fraction must be in (0, 1), got {self.min_social_fraction}")
        if self.min_days < 1 or self.truncate_days < 1:
            raise ConfigError("min_days and truncate_days must be positive")
        if self.min_sessions < 0:
            raise ConfigError("min_sessions must be non-negative")

    @classmethod
    def with_social_file(cls, path: Path, **kwargs) -> "CohortConfig":
        return cls(social_apps=frozenset(a.lower() for a in load_list_file(path)), **kwargs)


EXCLUSION_RULES = ("min_days", "min_sessions", "min_social_fraction")


@dataclass
class CohortLog:
    """
    Cleaned, filtered and truncated cohort.

    Parameters
    ----------
    events : pd.DataFrame
        ``EVENT_COLUMNS`` plus ``is_social``; grouped by user, time-sorted.
    summaries : pd.DataFrame
        Per user: ``sessions``, ``distinct_apps``, ``social_sessions``,
        ``social_fraction``; indexed by ``user_id``.
    exclusions : pd.DataFrame
        Exclusion ledger with columns ``user_id``, ``rule``.
    truncated_events : int
        Events removed by the truncation rule from retained and excluded users.
    excluded_events : int
        Events of excluded users remaining after truncation.
    """

    events: pd.DataFrame
    summaries: pd.DataFrame
    exclusions: pd.DataFrame
    truncated_events: int = 0
    excluded_events: int = 0

    @property
    def user_ids(self) -> list[str]:
        return list(self.summaries.index)

    def user_events(self, user_id: str) -> pd.DataFrame:
        return self.events[self.events["user_id"] == user_id].reset_index(drop=True)

    def to_csv_bytes(self) -> bytes:
        """
        Deterministic serialization of the retained events.
        """
        frame = self.events[["user_id", "timestamp", "app_id", "is_social"]].astype({"is_social": int})
        return frame.to_csv(index=False, lineterminator="\n").encode("utf-8")

    def exclusions_csv_bytes(self) -> bytes:
        return self.exclusions.to_csv(index=False, lineterminator="\n").encode("utf-8")


def summarize_users(events: pd.DataFrame) -> pd.DataFrame:
    """
    Per-user session counts, distinct apps and social fraction.

    ``events`` must carry an ``is_social`` column.
    """
    if events.empty:
        return pd.DataFrame(
            {"sessions": [], "distinct_apps": [], "social_sessions": [], "social_fraction": []},
            index=pd.Index([], name="user_id", dtype=str),
        )
    grouped = events.groupby("user_id", sort=True)
    summaries = pd.DataFrame(
        {
            "sessions": grouped.size(),
            "distinct_apps": grouped["app_id"].nunique(),
            "social_sessions": grouped["is_social"].sum().astype("int64"),
        }
    )
    summaries["social_fraction"] = summaries["social_sessions"] / summaries["sessions"]
    summaries.index.name = "user_id"
    return summaries


def with_social_labels(events: pd.DataFrame, social_apps: frozenset[str]) -> pd.DataFrame:
    labelled = events.copy()
    labelled["is_social"] = labelled["app_id"].isin(social_apps)
    return labelled


def filter_and_truncate_users(events: pd.DataFrame, cfg: CohortConfig) -> CohortLog:
    """
    Apply the cohort rules in order.

    1. Drop users whose events span fewer than ``min_days`` UTC calendar days.
    2. Keep events dated within the first ``truncate_days`` calendar days,
       counted from the UTC date of the user's first event.
    3. Drop users with fewer than ``min_sessions`` events.
    4. Drop users whose social fraction is below ``min_social_fraction``.
    """
    labelled = with_social_labels(events, cfg.social_apps)
    empty_ledger = pd.DataFrame({"user_id": pd.Series([], dtype=str), "rule": pd.Series([], dtype=str)})
    if labelled.empty:
        return CohortLog(labelled, summarize_users(labelled), empty_ledger)

    day = labelled["timestamp"] // MS_PER_DAY
    first_day = day.groupby(labelled["user_id"]).transform("min")
    last_day = day.groupby(labelled["user_id"]).transform("max")
    span = last_day - first_day + 1

    ledger: list[tuple[str, str]] = []
    short = span < cfg.min_days
    ledger += [(u, "min_days") for u in sorted(labelled.loc[short, "user_id"].unique())]

    in_window = (day - first_day) < cfg.truncate_days
    truncated_events = int((~in_window).sum())
    kept = labelled[in_window & ~short]
    excluded_events = int((in_window & short).sum())

    counts = kept.groupby("user_id", sort=True).agg(sessions=("app_id", "size"), social=("is_social", "sum"))
    few = counts.index[counts["sessions"] < cfg.min_sessions]
    ledger += [(u, "min_sessions") for u in few]
    # Inclusive bound; tolerance absorbs float rounding of fraction * sessions.
    low_social = counts.index[
        (counts["sessions"] >= cfg.min_sessions)
        & (counts["social"] < cfg.min_social_fraction * counts["sessions"] - 1e-9)
    ]
    ledger += [(u, "min_social_fraction") for u in low_social]

    dropped = set(few) | set(low_social)
    excluded_events += int(kept["user_id"].isin(dropped).sum())
    retained = kept[~kept["user_id"].isin(dropped)].reset_index(drop=True)

    exclusions = pd.DataFrame(ledger, columns=["user_id", "rule"]).sort_values("user_id", kind="mergesort")
    logger.info(
        "cohort filtered",
        extra={
            "id": "cohort",
            "users": int(retained["user_id"].nunique()),
            "excluded": len(exclusions),
            "events": len(retained),
        },
    )
    return CohortLog(
        events=retained,
        summaries=summarize_users(retained),
        exclusions=exclusions.reset_index(drop=True),
        truncated_events=truncated_events,
        excluded_events=excluded_events,
    )


def build_cohort(
    events: pd.DataFrame,
    cleaning: CleaningConfig | None = None,
    cohort: CohortConfig | None = None,
) -> tuple[CohortLog, dict[str, int]]:
    """
    Clean then filter a parsed event stream.

    Returns the cohort and the cleaning tallies.
    """
    if events is None:
        raise EmptyInputError("no events given")
    cleaned = clean_events(events, cleaning or CleaningConfig())
    return filter_and_truncate_users(cleaned.events, cohort or CohortConfig()), cleaned.tallies
