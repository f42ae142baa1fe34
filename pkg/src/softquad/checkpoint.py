"""Checkpoint container: one JSON header line, then raw little-endian arrays.

The header declares the schema version, free-form metadata (iteration,
architecture, config hash, rng state), and a manifest of every array's
name, dtype, shape, and byte length, in write order. Loading verifies the
byte count before touching the payload, so truncation, version drift, and
config mismatch each fail with their own exception type.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
_MAGIC = "softquad-checkpoint"


class CheckpointError(RuntimeError):
    """Base class for unreadable or unusable checkpoint files."""


class CheckpointVersionError(CheckpointError):
    """Schema or architecture in the header does not match this build."""


class CheckpointCorruptError(CheckpointError):
    """Malformed header or payload shorter/longer than the manifest."""


class CheckpointConfigError(CheckpointError):
    """Checkpoint was produced under a different configuration."""


def _le(dtype: np.dtype) -> np.dtype:
    dt = np.dtype(dtype)
    return dt.newbyteorder("<") if dt.byteorder == ">" else dt


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays in dict order; meta must be JSON-serializable."""
    manifest = []
    blobs = []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype=_le(a.dtype))
        blob = a.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": a.dtype.str,
                "shape": list(a.shape),
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
    header = {
        "magic": _MAGIC,
        "schema": SCHEMA_VERSION,
        "meta": meta,
        "arrays": manifest,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as f:
        f.write(text.encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load(
    path: str | Path, expect_config_hash: str | None = None
) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta); arrays come out exactly as saved."""
    with open(path, "rb") as f:
        line = f.readline()
        payload = f.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"{path}: unreadable header: {e}") from None
    if not isinstance(header, dict) or header.get("magic") != _MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    if header.get("schema") != SCHEMA_VERSION:
        raise CheckpointVersionError(
            f"{path}: schema {header.get('schema')!r}, expected {SCHEMA_VERSION}"
        )
    meta = header.get("meta", {})
    if expect_config_hash is not None:
        got = meta.get("config_hash")
        if got != expect_config_hash:
            raise CheckpointConfigError(
                f"{path}: config hash {got!r} != expected {expect_config_hash!r}"
            )
    total = sum(entry["nbytes"] for entry in header["arrays"])
    if len(payload) != total:
        raise CheckpointCorruptError(
            f"{path}: payload is {len(payload)} bytes, manifest says {total}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        n = entry["nbytes"]
        a = np.frombuffer(payload[offset : offset + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = a.reshape(entry["shape"]).copy()
        offset += n
    return arrays, meta
