"""Checkpoint envelope shared by the embedding net and the selector.

Layout: one ASCII JSON header line (magic, format version, config, parameter
names/shapes, blob sha256) followed by the raw little-endian float64 blob.
Writes are byte-deterministic for identical parameters.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np

from .errors import CorruptCheckpoint

FORMAT_VERSION = 1


def pack(magic: str, config: dict[str, Any], params: dict[str, np.ndarray]) -> bytes:
    names = sorted(params)
    blob = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    header = {
        "magic": magic,
        "version": FORMAT_VERSION,
        "config": config,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "blob_len": len(blob),
    }
    return json.dumps(header, sort_keys=True).encode("ascii") + b"\n" + blob


def unpack(data: bytes, magic: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    newline = data.find(b"\n")
    if newline < 0:
        raise CorruptCheckpoint("missing header line")
    try:
        header = json.loads(data[:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    if header.get("magic") != magic:
        raise CorruptCheckpoint(
            f"magic mismatch: expected {magic!r}, found {header.get('magic')!r}"
        )
    if header.get("version") != FORMAT_VERSION:
        raise CorruptCheckpoint(
            f"version mismatch: file has {header.get('version')!r}, "
            f"this build reads version {FORMAT_VERSION}"
        )
    blob = data[newline + 1 :]
    if len(blob) != header.get("blob_len"):
        raise CorruptCheckpoint(
            f"blob truncated: {len(blob)} bytes, header says {header.get('blob_len')}"
        )
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise CorruptCheckpoint("blob hash mismatch")

    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CorruptCheckpoint("blob length disagrees with parameter table")
    return header["config"], params
