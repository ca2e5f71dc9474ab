"""Binary container used for checkpoints, regressors and QA bundles.

Layout (all little-endian)::

    magic      8 bytes
    version    uint32
    hdr_len    uint64
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    payload    concatenated raw arrays, offsets listed in the header

The header carries a free-form ``meta`` object plus an ``arrays`` table of
``{name, dtype, shape, offset, nbytes}`` records.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError

_PREFIX = struct.Struct("<8sIQ")
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1", "<u4"}


def dumps(magic: bytes, version: int, meta: Mapping[str, Any],
          arrays: Mapping[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    table = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        dt = arr.dtype.str
        if dt not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported array dtype {dt} for {name!r}")
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(magic, version, len(header)) + header + b"".join(chunks)


def loads(blob: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise FormatError("truncated container")
    got_magic, got_version, hdr_len = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"unsupported version {got_version} (expected {version})")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    payload = memoryview(blob)[start + hdr_len:]
    arrays = {}
    for rec in header.get("arrays", []):
        if rec["dtype"] not in _ALLOWED_DTYPES:
            raise FormatError(f"unsupported dtype {rec['dtype']}")
        end = rec["offset"] + rec["nbytes"]
        if end > len(payload):
            raise FormatError(f"payload too short for array {rec['name']!r}")
        arr = np.frombuffer(payload[rec["offset"]:end], dtype=np.dtype(rec["dtype"]))
        expected = int(np.prod(rec["shape"], dtype=np.int64))
        if arr.size != expected:
            raise FormatError(f"array {rec['name']!r} has {arr.size} items, "
                              f"shape wants {expected}")
        arrays[rec["name"]] = arr.reshape(rec["shape"]).copy()
    total = sum(rec["nbytes"] for rec in header.get("arrays", []))
    if total != len(payload):
        raise FormatError("trailing or missing payload bytes")
    return header.get("meta", {}), arrays


def save(path: str | Path, magic: bytes, version: int, meta: Mapping[str, Any],
         arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(dumps(magic, version, meta, arrays))
    return path


def load(path: str | Path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic, version)


def nest(prefix: str, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Prefix array names so several components can share one container."""
    return {f"{prefix}/{k}": v for k, v in arrays.items()}


def unnest(prefix: str, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}
