"""Binary parameter checkpoints.

Layout (all integers little-endian):

    bytes 0..3   magic ``RMLS``
    byte  4      format version (currently 1)
    u32          record count
    per record:
        u16      name length, then that many UTF-8 bytes
        u8       ndim
        u32*ndim dimension sizes
        f64*prod row-major values

Round trips are bit-exact for f64 payloads.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RMLS"
VERSION = 1


class CheckpointError(IOError):
    """Corrupt header, bad magic, or truncated payload."""


def save_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    path = Path(path)
    parts: list[bytes] = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<I", d))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    path.write_bytes(b"".join(parts))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    version = raw[4]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", raw, 5)
    off = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = []
            for _ in range(ndim):
                (d,) = struct.unpack_from("<I", raw, off)
                off += 4
                shape.append(d)
            n = int(np.prod(shape)) if shape else 1
            nbytes = 8 * n
            if off + nbytes > len(raw):
                raise CheckpointError(f"truncated checkpoint {path}")
            arr = np.frombuffer(raw[off:off + nbytes], dtype="<f8").reshape(shape).copy()
            off += nbytes
            out[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint {path}") from exc
    return out
