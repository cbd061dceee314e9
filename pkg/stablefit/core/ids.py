"""
Deterministic ID and hash generation for stablefit.

All IDs are content-based and deterministic to ensure reproducibility.
No timestamps enter any identifier.
"""

import hashlib
import json
from typing import Any, Dict, Iterable, Mapping

import numpy as np


def digest(data: bytes, length: int = 16) -> str:
    """SHA-256 hex digest of raw bytes, truncated to `length` characters."""
    return hashlib.sha256(data).hexdigest()[:length]


def array_hash(arrays: Mapping[str, np.ndarray]) -> str:
    """
    Hash an ordered mapping of named arrays.

    Names, dtypes, shapes and raw little-endian bytes all contribute, so two
    stores hash equal only when they are bitwise identical.

    Args:
        arrays: Ordered name -> array mapping (e.g. a ParamStore)

    Returns:
        16-character hex digest
    """
    h = hashlib.sha256()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        h.update(name.encode("utf-8"))
        h.update(arr.dtype.newbyteorder("<").str.encode("ascii"))
        h.update(json.dumps(list(arr.shape)).encode("ascii"))
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()[:16]


def tokens_hash(sequences: Iterable[Any]) -> str:
    """Hash a sequence of token-id vectors (corpus or batch)."""
    h = hashlib.sha256()
    for seq in sequences:
        h.update(np.asarray(seq, dtype="<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def content_hash(data: Any) -> str:
    """
    Generate hash for JSON-serializable content (configs, plans, records).

    Args:
        data: Content to hash

    Returns:
        16-character hex digest
    """
    if isinstance(data, (dict, list)):
        content = json.dumps(data, sort_keys=True, separators=(",", ":"))
    else:
        content = str(data)
    return digest(content.encode("utf-8"))


def file_hash(path: Any) -> str:
    """Hash a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def run_id(config: Dict[str, Any]) -> str:
    """
    Generate deterministic run ID from a RunConfig dictionary.

    Returns:
        ID of the form ``run:<hash>:s<seed>``
    """
    return f"run:{content_hash(config)}:s{config.get('seed', 0)}"


def cell_id(index: int, overrides: Dict[str, Any]) -> str:
    """
    Generate a sweep cell ID from its position and overrides.

    The label is human-readable; the index keeps ordering stable.
    """
    label = ",".join(f"{k}={_render(v)}" for k, v in overrides.items()) or "base"
    return f"c{index:03d}[{label}]"


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)
