"""ADNW checkpoint files.

Layout (all integers little-endian)::

    b"ADNW"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u32 rank, rank x u32 dim, u64 offset }
    raw f32 data

``offset`` is measured in bytes from the start of the data section. Tensors
are written in lexicographic name order, so equal states give equal bytes.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"ADNW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(state: dict[str, np.ndarray]) -> bytes:
    names = sorted(state)
    header = [MAGIC, struct.pack("<II", VERSION, len(names))]
    blobs = []
    offset = 0
    for name in names:
        arr = np.asarray(state[name], dtype="<f4")  # tobytes() is C-order; keeps rank 0
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)) + raw)
        header.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<Q", offset))
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    return b"".join(header + blobs)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError("checkpoint truncated in manifest")
        values = struct.unpack_from(fmt, buf, pos)
        pos += size
        return values

    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    pos = 4
    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = []
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(buf):
            raise CheckpointError("checkpoint truncated in tensor name")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        (offset,) = take("<Q")
        entries.append((name, dims, offset))
    data_start = pos
    state = {}
    for name, dims, offset in entries:
        n = int(np.prod(dims)) if dims else 1
        start = data_start + offset
        if start + 4 * n > len(buf):
            raise CheckpointError(f"checkpoint truncated in data for {name}")
        state[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=start).reshape(dims).astype(np.float32)
    return state


def save(path: Union[str, os.PathLike], state: dict[str, np.ndarray]) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(state))
    os.replace(tmp, path)


def load(path: Union[str, os.PathLike]) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def save_model(path, net) -> None:
    save(path, net.state_dict())


def load_model(path, net) -> None:
    net.load_state_dict(load(path))
