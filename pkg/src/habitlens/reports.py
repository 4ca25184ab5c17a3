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
CSV report tables and the run manifest.

Report files contain no wall-clock values, so identical runs produce
identical bytes. Timing lives only in the manifest.
"""

import hashlib
import json
import logging
import time
from collections.abc import Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pandas as pd

from habitlens.errors import MetricError
from habitlens.metrics import DISTRIBUTION_COLUMNS, EvalReport, summarize_distribution

logger = logging.getLogger(__name__)

MANIFEST_PREFIX = "manifest"
REPORT_METRICS = ("auc", "acc", "pre", "rec", "f1")


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def per_person_frame(reports: Mapping[str, EvalReport]) -> pd.DataFrame:
    """
    One row per person, sorted by user id.
    """
    rows = [{"user_id": uid, **reports[uid].as_row()} for uid in sorted(reports)]
    columns = ["user_id", "auc", "acc", "pre", "rec", "f1", "n", "positive_fraction", "undefined"]
    return pd.DataFrame(rows, columns=columns)


def distribution_frame(reports: Mapping[str, EvalReport]) -> pd.DataFrame:
    """
    Distribution of each metric across persons.

    One row per metric with ``mean, std, min, 25%, 50%, 75%, max`` plus the
    number of persons summarized and excluded as undefined.
    """
    rows = []
    for metric in REPORT_METRICS:
        values = [getattr(reports[uid], metric) for uid in sorted(reports)]
        try:
            rows.append({"metric": metric, **summarize_distribution(values).as_row()})
        except MetricError:
            rows.append({"metric": metric, "n": 0, "excluded": len(values)})
    return pd.DataFrame(rows, columns=["metric", *DISTRIBUTION_COLUMNS, "n", "excluded"])


def auc_long_frame(per_regime: Mapping[str, Mapping[str, EvalReport]]) -> pd.DataFrame:
    """
    Per-person AUCs of several regimes in long format, one row per (regime, person).
    """
    rows = []
    for regime in sorted(per_regime):
        reports = per_regime[regime]
        rows.extend({"regime": regime, "user_id": uid, "auc": reports[uid].auc} for uid in sorted(reports))
    return pd.DataFrame(rows, columns=["regime", "user_id", "auc"])


def read_per_person(path: Path) -> dict[str, EvalReport]:
    """
    Per-person reports back from a ``per_person_frame`` CSV.
    """
    frame = pd.read_csv(path, dtype={"user_id": str})
    return {
        row.user_id: EvalReport(
            auc=float(row.auc),
            acc=float(row.acc),
            pre=float(row.pre),
            rec=float(row.rec),
            f1=float(row.f1),
            n=int(row.n),
            positive_fraction=float(row.positive_fraction),
            undefined=bool(row.undefined),
        )
        for row in frame.itertuples(index=False)
    }


@dataclass
class RunManifest:
    """
    Record of one command run, written as ``manifest_<command>.json`` at the
    root of the output directory.
    """

    command: str
    version: str
    seed: int
    config: dict[str, Any] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    stages: list[dict[str, Any]] = field(default_factory=list)

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def add_output(self, path: Path, root: Path) -> Path:
        resolved, root = Path(path).resolve(), Path(root).resolve()
        key = resolved.relative_to(root) if resolved.is_relative_to(root) else resolved
        self.outputs[key.as_posix()] = file_sha256(path)
        return path

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        logger.info("stage started", extra={"id": "stage", "stage": name, "location": "begin"})
        start = time.perf_counter()
        try:
            yield
        finally:
            seconds = round(time.perf_counter() - start, 3)
            self.stages.append({"name": name, "seconds": seconds})
            logger.info("stage finished", extra={"id": "stage", "stage": name, "location": "end", "seconds": seconds})

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "stages": self.stages,
        }

    def write(self, out_dir: Path) -> Path:
        path = manifest_path(out_dir, self.command)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def manifest_path(out_dir: Path, command: str) -> Path:
    return Path(out_dir) / f"{MANIFEST_PREFIX}_{command.replace('-', '_')}.json"
