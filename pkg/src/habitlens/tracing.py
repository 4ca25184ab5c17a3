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
Structured JSON traces.

Each record is written as a single JSON line::

    {"timestamp": "...", "level": "INFO", "target": "habitlens.training",
     "fields": {"message": "epoch finished", "id": "epoch", "epoch": 3}}
"""

import json
import logging
import sys
from datetime import datetime, timezone
from typing import TextIO

TRACE_LEVELS = {
    "none": logging.CRITICAL + 10,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

# Attributes every LogRecord has; anything else was passed through ``extra``.
_RESERVED = set(logging.makeLogRecord({}).__dict__) | {"message", "asctime"}


class JsonTraceFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        fields = {"message": record.getMessage()}
        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith("_"):
                fields[key] = value
        if record.exc_info:
            fields["exception"] = self.formatException(record.exc_info)
        trace = {
            "timestamp": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname,
            "target": record.name,
            "fields": fields,
        }
        return json.dumps(trace, default=str)


def init_tracing(level: str = "info", stream: TextIO | None = None) -> logging.Logger:
    """
    Install the JSON trace handler on the package logger.

    Calling it again replaces the previous handler, so repeated CLI invocations
    inside one process do not duplicate lines.

    Parameters
    ----------
    level : str
        One of ``TRACE_LEVELS``.
    stream : TextIO | None
        Output stream, stderr by default.
    """
    logger = logging.getLogger("habitlens")
    for handler in list(logger.handlers):
        if getattr(handler, "_habitlens_trace", False):
            logger.removeHandler(handler)

    handler = logging.StreamHandler(stream if stream is not None else sys.stderr)
    handler.setFormatter(JsonTraceFormatter())
    handler._habitlens_trace = True
    logger.addHandler(handler)
    logger.setLevel(TRACE_LEVELS[level])
    logger.propagate = False
    return logger
