"""Binary parameter files.

Layout (little-endian): ``b"GORK"``, ``u32`` version, then one record per
parameter until end of file::

    u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] | f64 payload[prod(dims)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GORK"
VERSION = 1


class ModelFileError(ValueError):
    """The parameter file is missing, truncated or malformed."""


def dumps_params(params: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ModelFileError("bad magic; not a GORK parameter file")
    if len(blob) < 8:
        raise ModelFileError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ModelFileError(f"unsupported version {version}")
    pos = 8
    params: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ModelFileError(f"truncated record at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFileError(f"undecodable parameter name at byte {pos}") from exc
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise ModelFileError(f"{name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        payload = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        if name in params:
            raise ModelFileError(f"duplicate parameter {name!r}")
        params[name] = payload.reshape(dims)
    return params


def save_params(path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_params(params))


def load_params(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read {path}: {exc.strerror}") from exc
    return loads_params(blob)
