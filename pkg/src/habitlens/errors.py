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
Error hierarchy.

Every error carries an ``error_code`` and an ``is_recoverable`` flag.
Recoverable errors are caught per job by the worker runtime and reported,
unrecoverable ones abort the run.
"""


class HabitlensError(Exception):
    """
    Base class of all errors raised by the toolkit.
    """

    error_code: int = 1
    is_recoverable: bool = False


class ConfigError(HabitlensError):
    error_code = 10


class LogParseError(HabitlensError):
    """
    A single malformed log record.

    Parameters
    ----------
    line : int
        1-based line number of the record in the source file.
    reason : str
        Human readable reason.
    """

    error_code = 20

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class MalformedLogError(HabitlensError):
    error_code = 21


class EmptyInputError(HabitlensError):
    error_code = 22


class SplitError(HabitlensError):
    error_code = 30


class VocabularyError(HabitlensError):
    error_code = 31


class DegeneratePersonError(HabitlensError):
    """
    A person's data cannot support a model (e.g. single-class training split).
    """

    error_code = 32
    is_recoverable = True


class InvalidSpecError(HabitlensError):
    error_code = 40


class NumericalError(HabitlensError):
    """
    Non-finite value produced inside the network.

    Parameters
    ----------
    layer : str
        Name of the layer which produced the value.
    """

    error_code = 41

    def __init__(self, layer: str):
        super().__init__(f"non-finite values in layer '{layer}'")
        self.layer = layer


class TrainingError(HabitlensError):
    error_code = 42


class CheckpointError(HabitlensError):
    error_code = 43


class SearchSpaceError(HabitlensError):
    error_code = 50


class MetricError(HabitlensError):
    error_code = 60


class GeneratorMismatchError(HabitlensError):
    error_code = 70


class GradientCheckError(HabitlensError):
    """
    No coordinate could be compared against its finite difference.
    """

    error_code = 44
