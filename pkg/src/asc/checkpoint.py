"""Binary checkpoint format.

Layout (little-endian)::

    b"ASC1" | u32 version | u64 config length | config JSON (utf-8)
    repeated until EOF:
        u32 name length | name (utf-8) | u32 rank | rank x u64 extents | float64 data

Records are written in sorted name order and the config JSON is canonical
(sorted keys, compact separators), so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"ASC1"
VERSION = 1


def atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(config: dict, params: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(cfg)), cfg]
    for name in sorted(params):
        a = np.asarray(params[name], dtype="<f8", order="C")  # keeps 0-d scalars rank 0
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise ValueError("not an ASC checkpoint (bad magic)")
    version, clen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    config = json.loads(blob[pos:pos + clen].decode())
    pos += clen
    params: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return config, params


def save(path, config: dict, params: dict[str, np.ndarray]) -> None:
    atomic_write(Path(path), encode(config, params))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
