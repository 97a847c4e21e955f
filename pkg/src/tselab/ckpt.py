"""Versioned binary checkpoint files shared by all trainable models.

Layout: magic ``TSECKPT1``, u32 length-prefixed JSON header (version, kind,
config, meta), u32 blob count, then named float64 little-endian parameter
blobs.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"TSECKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, blobs: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    header = json.dumps(
        {"version": FORMAT_VERSION, "kind": kind, "config": config,
         "meta": meta or {}},
        sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", len(header)), header,
           struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, expect_kind: str | None = None):
    """Returns (kind, config, meta, blobs)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise DataError(f"{path}: checkpoint kind {header.get('kind')!r}, "
                        f"expected {expect_kind!r}")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(raw):
            raise DataError(f"{path}: truncated blob {name!r}")
        blobs[name] = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(shape).copy()
        pos += size
    return header["kind"], header["config"], header["meta"], blobs
