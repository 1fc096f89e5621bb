"""Atomic file writes, canonical JSON, and seed derivation helpers."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via temp-then-rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def dump_json(obj) -> bytes:
    """Canonical JSON encoding: sorted keys, fixed separators, trailing newline.

    Byte-identical output for equal inputs, which the dataset manifests rely on.
    """
    return (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def atomic_write_json(path: str | Path, obj) -> None:
    atomic_write_bytes(path, dump_json(obj))


def load_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def json_safe(obj):
    """Recursively replace non-finite floats with strings ("inf", "-inf",
    "nan") so reports stay valid strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, float):
        if obj != obj:
            return "nan"
        if obj == float("inf"):
            return "inf"
        if obj == float("-inf"):
            return "-inf"
    return obj


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings.

    Uses SHA-256 over the repr of the parts, so the result does not depend on
    PYTHONHASHSEED or the process.
    """
    digest = hashlib.sha256(repr(tuple(parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
