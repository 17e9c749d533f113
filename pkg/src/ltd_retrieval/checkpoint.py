"""Binary checkpoint container.

Layout::

    8 bytes   magic b"LTDCKPT1"
    8 bytes   little-endian uint64 header length H
    H bytes   UTF-8 JSON header
    ...       concatenated little-endian float64 payloads

The header holds ``arrays`` (name, shape, offset in float64 elements, in
storage order), ``seed``, ``config_hash`` and any extra metadata passed by
the caller.  Raw IEEE-754 bytes are stored, so a round trip is bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"LTDCKPT1"


def save_checkpoint(path, arrays, seed=0, config_hash="", **meta):
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.tobytes())
    header = {"arrays": entries, "seed": int(seed), "config_hash": config_hash, **meta}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path):
    """Returns ``(arrays, header)``."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad header ({exc})") from exc
    if (len(data) - 16 - hlen) % 8:
        raise ParseError(f"{path}: payload is not a whole number of float64 values")
    payload = np.frombuffer(data, dtype="<f8", offset=16 + hlen)
    arrays = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > payload.size:
            raise ParseError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = payload[start : start + size].reshape(entry["shape"]).astype(np.float64)
    return arrays, header
