"""Self-describing binary container for float64 arrays.

Layout (all integers little-endian)::

    8 bytes   magic  b"APCONBIN"
    2 bytes   format version (uint16, currently 1)
    4 bytes   header length N (uint32)
    N bytes   UTF-8 JSON header:
                {"kind": str,
                 "segments": [{"name": str, "offset": int, "length": int, "shape": [int, ...]}, ...],
                 "meta": {...}}
    rest      payload: row-major little-endian float64 values; ``offset`` and
              ``length`` in the segment table count float64 elements.

Parameter vectors, datasets and density fields all use this format, so any
file can be inspected with :func:`read_container`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"APCONBIN"
VERSION = 1


class CorruptFileError(ValueError):
    """Raised when a container header or payload is malformed."""


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None, kind: str = "generic") -> None:
    segments = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        segments.append({"name": name, "offset": offset, "length": int(arr.size), "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    header = json.dumps({"kind": kind, "segments": segments, "meta": meta or {}}, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_container(path) -> tuple[dict[str, np.ndarray], dict, str]:
    """Return ``(arrays, meta, kind)``; raises CorruptFileError on a bad file."""
    raw = Path(path).read_bytes()
    if len(raw) < 14 or raw[:8] != MAGIC:
        raise CorruptFileError(f"{path}: bad magic")
    version, hlen = struct.unpack("<HI", raw[8:14])
    if version != VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[14:14 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    payload = np.frombuffer(raw[14 + hlen:], dtype="<f8")
    arrays = {}
    for seg in header["segments"]:
        lo, n = seg["offset"], seg["length"]
        if lo + n > payload.size or int(np.prod(seg["shape"], dtype=int)) != n:
            raise CorruptFileError(f"{path}: segment {seg['name']!r} out of bounds")
        arrays[seg["name"]] = payload[lo:lo + n].reshape(seg["shape"]).astype(np.float64)
    return arrays, header["meta"], header["kind"]
