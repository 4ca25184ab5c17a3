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
Bounded worker runtime for independent per-person jobs.

A ``Concurrency`` groups named ``Invoke`` actions. The ``Runtime`` executes them
on at most ``workers`` threads; results are assembled keyed by job name in
sorted order, so the outcome does not depend on completion order.

Recoverable errors (``HabitlensError.is_recoverable``) are caught per job and
reported in ``JobResults.errors``. Any other exception is re-raised once every
started job has finished.
"""

import logging
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Generic, TypeVar

from habitlens.errors import HabitlensError

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class Invoke(Generic[T]):
    """
    A named unit of work.
    """

    name: str
    function: Callable[[], T]


@dataclass(frozen=True)
class Concurrency(Generic[T]):
    """
    Jobs without mutual dependencies, allowed to run in parallel.
    """

    actions: tuple[Invoke[T], ...]

    @classmethod
    def of(cls, actions: Iterable[Invoke[T]]) -> "Concurrency[T]":
        actions = tuple(actions)
        names = [a.name for a in actions]
        if len(set(names)) != len(names):
            raise ValueError("job names in a concurrency block must be unique")
        return cls(actions)


@dataclass(frozen=True)
class CaughtError:
    job: str
    error_code: int
    message: str


@dataclass
class JobResults(Generic[T]):
    values: dict[str, T] = field(default_factory=dict)
    errors: dict[str, CaughtError] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.values) + len(self.errors)


class Runtime:
    """
    Parameters
    ----------
    workers : int
        Maximum number of jobs executing at the same time.
    """

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self._workers = workers

    @property
    def workers(self) -> int:
        return self._workers

    def _run_one(self, action: Invoke[T]) -> tuple[str, Any, Exception | None]:
        logger.debug("job started", extra={"id": "job", "job": action.name, "location": "begin"})
        try:
            value = action.function()
        except Exception as e:
            return action.name, None, e
        logger.debug("job finished", extra={"id": "job", "job": action.name, "location": "end"})
        return action.name, value, None

    def run(self, block: Concurrency[T]) -> JobResults[T]:
        if self._workers == 1 or len(block.actions) <= 1:
            outcomes = [self._run_one(action) for action in block.actions]
        else:
            with ThreadPoolExecutor(max_workers=self._workers) as pool:
                outcomes = list(pool.map(self._run_one, block.actions))

        results: JobResults[T] = JobResults()
        fatal: Exception | None = None
        for name, value, error in sorted(outcomes, key=lambda o: o[0]):
            if error is None:
                results.values[name] = value
            elif isinstance(error, HabitlensError) and error.is_recoverable:
                logger.warning(
                    "job failed with recoverable error",
                    extra={"id": "job_error", "job": name, "error_code": error.error_code, "reason": str(error)},
                )
                results.errors[name] = CaughtError(name, error.error_code, str(error))
            elif fatal is None:
                fatal = error
        if fatal is not None:
            raise fatal
        return results
