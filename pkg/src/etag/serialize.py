"""Parameter files: a JSON header followed by a flat little-endian float64 payload.

Layout::

    b"ETAGPRM\\0"            8 bytes magic
    uint32 LE                format version
    uint64 LE                header length in bytes
    header                   UTF-8 JSON: version, kind, meta, tensors[name, shape, offset]
    payload                  float64 LE, tensors concatenated in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ETAGPRM\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_params(path, arrays: dict[str, np.ndarray], kind: str, meta: dict) -> None:
    tensors, offset = [], 0
    for name, arr in arrays.items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    header = json.dumps({"version": VERSION, "kind": kind, "meta": meta, "tensors": tensors},
                        sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload)


def load_params(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Return ``(kind, meta, arrays)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"file holds {len(raw)} bytes, prefix needs {_PREFIX.size}", 0)
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise FormatError(f"header truncated: expected {hlen} bytes", start)
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        total = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as err:
        raise FormatError(f"unreadable header ({err})", start) from None
    body = raw[start + hlen:]
    if len(body) != 8 * total:
        raise FormatError(f"payload holds {len(body)} bytes, expected {8 * total}", start + hlen)
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        arrays[t["name"]] = flat[t["offset"]:t["offset"] + n].reshape(t["shape"]).copy()
    return header["kind"], header["meta"], arrays
