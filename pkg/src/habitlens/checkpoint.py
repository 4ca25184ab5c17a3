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
Self-describing binary model checkpoints.

Layout::

    b"HLCK" | u32 header length | JSON header | weight blocks | SHA-256

The header holds the model spec, free-form metadata and, per block, its name,
dtype, shape and byte offset. Blocks are raw little-endian arrays. The trailing
digest covers everything before it.
"""

import hashlib
import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from habitlens.errors import CheckpointError
from habitlens.tensorcore import ModelSpec, Parameters

MAGIC = b"HLCK"
DIGEST_SIZE = 32


def checkpoint_bytes(
    spec: ModelSpec,
    params: Mapping[str, np.ndarray],
    metadata: Mapping[str, Any] | None = None,
) -> bytes:
    blocks, payload, offset = [], [], 0
    for name, value in params.items():
        dtype = value.dtype.newbyteorder("<")
        data = np.ascontiguousarray(value, dtype=dtype).tobytes()
        blocks.append({"name": name, "dtype": dtype.str, "shape": list(value.shape), "offset": offset})
        payload.append(data)
        offset += len(data)
    header = json.dumps(
        {"spec": spec.to_dict(), "metadata": dict(metadata or {}), "blocks": blocks},
        sort_keys=True,
    ).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(header)) + header + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(
    path: Path,
    spec: ModelSpec,
    params: Mapping[str, np.ndarray],
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """
    Write a checkpoint file.

    Parameters
    ----------
    path : Path
        Destination file.
    spec : ModelSpec
        Architecture of ``params``.
    params : Parameters
        Weights to store, in their iteration order.
    metadata : Mapping[str, Any] | None
        JSON-serializable extras, e.g. the user id or vocabulary hash.
    """
    path = Path(path)
    path.write_bytes(checkpoint_bytes(spec, params, metadata))
    return path


def load_checkpoint(path: Path) -> tuple[ModelSpec, Parameters, dict[str, Any]]:
    """
    Read and verify a checkpoint file.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + DIGEST_SIZE or not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path} failed its content hash check")

    (header_len,) = struct.unpack_from("<I", body, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(body[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has an unreadable header: {e}") from e

    payload = body[start + header_len :]
    params: Parameters = {}
    for block in header["blocks"]:
        dtype = np.dtype(block["dtype"])
        count = int(np.prod(block["shape"], dtype=np.int64))
        end = block["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: block '{block['name']}' is truncated")
        values = np.frombuffer(payload, dtype=dtype, count=count, offset=block["offset"])
        params[block["name"]] = values.reshape(block["shape"]).astype(dtype.newbyteorder("="))
    return ModelSpec.from_dict(header["spec"]), params, header.get("metadata", {})
