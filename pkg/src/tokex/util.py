"""Shared helpers: canonical JSON, hashing, atomic writes, rng derivation."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np


def canonical_json(obj) -> str:
    """Serialize with sorted keys and fixed separators so equal objects
    always produce equal strings."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def config_hash(config_dict: dict) -> str:
    return sha256_hex(canonical_json(config_dict))


def file_fingerprint(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: str, data) -> None:
    """Write via a temp file in the same directory followed by rename, so
    readers never observe a partially written file."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def derive_rng(master_seed: int, *parts) -> np.random.Generator:
    """Deterministic rng stream keyed by a master seed plus arbitrary labels.

    Each part is hashed to an integer, so streams for distinct labels are
    independent while remaining reproducible across processes.
    """
    entropy = [int(master_seed)]
    for part in parts:
        digest = hashlib.sha256(str(part).encode("utf-8")).digest()
        entropy.append(int.from_bytes(digest[:8], "big"))
    return np.random.default_rng(entropy)
