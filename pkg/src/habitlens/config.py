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
Configuration documents and plain-text list files.

A configuration document has the same shape as the scenario input of the
component tests::

    {
        "runtime": {"workers": 4, "seed": 7},
        "cohort": {"min_sessions": 1000},
        "train": {"max_epochs": 1000}
    }

It can also be written as ``section.key=value`` lines. Values are parsed as
JSON when possible and kept as strings otherwise.
"""

import json
import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import psutil

from habitlens.errors import ConfigError

SEED_ENV_VAR = "HABITLENS_SEED"
DEFAULT_SEED = 0


def load_list_file(path: Path) -> list[str]:
    """
    Read one entry per line, skipping blank lines and ``#`` comments.

    Parameters
    ----------
    path : Path
        Path to the list file.
    """
    entries = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            entries.append(line)
    return entries


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config_document(path: Path) -> dict[str, dict[str, Any]]:
    """
    Load a JSON or ``section.key=value`` configuration document.

    Parameters
    ----------
    path : Path
        Path to the configuration file.
    """
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            document = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON config {path}: {e}") from e
        if not isinstance(document, dict) or not all(isinstance(v, dict) for v in document.values()):
            raise ConfigError(f"config {path} must map section names to objects")
        return document

    document: dict[str, dict[str, Any]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"{path}:{number}: expected 'section.key=value', got '{raw}'")
        document.setdefault(section, {})[name.strip()] = _parse_value(value.strip())
    return document


def merge_settings(
    defaults: Mapping[str, Any],
    config: Mapping[str, Any] | None,
    flags: Mapping[str, Any] | None,
) -> dict[str, Any]:
    """
    Merge settings with precedence flags > config > defaults.

    Flags set to ``None`` count as not given. Unknown config keys are rejected.
    """
    merged = dict(defaults)
    for key, value in (config or {}).items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{key}'")
        merged[key] = value
    for key, value in (flags or {}).items():
        if value is not None:
            merged[key] = value
    return merged


def default_workers() -> int:
    return psutil.cpu_count(logical=True) or 1


def resolve_seed(flag: int | None, config: Mapping[str, Any] | None) -> int:
    """
    Resolve the root seed: flag, then config ``runtime.seed``, then the
    ``HABITLENS_SEED`` environment variable, then ``DEFAULT_SEED``.
    """
    if flag is not None:
        return int(flag)
    if config and config.get("seed") is not None:
        return int(config["seed"])
    env_value = os.environ.get(SEED_ENV_VAR, "")
    if env_value:
        try:
            return int(env_value)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got '{env_value}'") from e
    return DEFAULT_SEED


@dataclass(frozen=True)
class RuntimeConfig:
    """
    Worker runtime settings.

    Parameters
    ----------
    workers : int
        Upper bound of concurrently executing jobs.
    seed : int
        Root seed from which every random stream is derived.
    """

    workers: int
    seed: int

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
