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
Seed derivation for independent random streams.
"""

import hashlib

import numpy as np


def derive_seed(root: int, *keys: object) -> int:
    """
    Derive a 63-bit seed from a root seed and a key path.

    The mapping is a SHA-256 over the textual key path, so it is stable across
    processes and Python versions (unlike ``hash()``).

    Parameters
    ----------
    root : int
        Root seed of the run.
    keys : object
        Key path, e.g. ``("personal", user_id, trial)``.
    """
    path = "/".join([str(int(root)), *(str(k) for k in keys)])
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(root: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
