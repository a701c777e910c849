"""Shared container format: JSON header + little-endian float64 payload."""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PMBF"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    """Unreadable, truncated, or incompatible checkpoint file."""


def write_blob(path, header: dict, arrays) -> None:
    """Write `arrays` (in order) after a JSON header carrying their index.

    The caller supplies the semantic header; this adds `version` and, per
    array appended by the caller's index, expects byte offsets into the
    payload. Arrays are stored as little-endian float64, C order.
    """
    header = dict(header)
    header["version"] = FORMAT_VERSION
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_blob(path):
    """Read back (header, payload bytes); raises CheckpointError on damage."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header: {exc}") from exc
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version!r}")
    return header, raw[8 + hlen:]


def take_array(payload: bytes, offset: int, shape) -> np.ndarray:
    """Slice one float64 array out of the payload; validates length."""
    count = int(np.prod(shape)) if shape else 1
    end = offset + 8 * count
    if end > len(payload):
        raise CheckpointError("truncated payload")
    arr = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64)
    return arr.reshape(shape)
