"""PTWT checkpoint files.

Layout (little-endian)::

    "PTWT" | u16 version=1 | u32 count
    per parameter: u16 path_len | path (UTF-8) | u8 trainable | u8 rank | rank x u32 dims | f32 data
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PTWT"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


@dataclass
class Entry:
    path: str
    trainable: bool
    data: np.ndarray


def encode(entries: list[Entry]) -> bytes:
    out = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for e in entries:
        raw = e.path.encode("utf-8")
        arr = np.asarray(e.data, dtype="<f4", order="C")  # keeps 0-d shapes
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", int(e.trainable), arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode(buf: bytes) -> list[Entry]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    entries = []
    for _ in range(count):
        (plen,) = struct.unpack("<H", take(2, "path length"))
        path = take(plen, "path").decode("utf-8")
        trainable, rank = struct.unpack("<BB", take(2, "flags"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {path}"), dtype="<f4").reshape(dims).astype(np.float32)
        entries.append(Entry(path, bool(trainable), data))
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes", pos)
    return entries


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(module, path) -> None:
    entries = [Entry(p, prm.trainable, prm.data) for p, prm in module.named_parameters()]
    atomic_write_bytes(path, encode(entries))


def read(path) -> list[Entry]:
    return decode(Path(path).read_bytes())


def load_into(module, path, strict: bool = True, restore_flags: bool = False) -> list[str]:
    """Copy checkpoint values into ``module`` by path; returns paths left untouched."""
    entries = {e.path: e for e in read(path)}
    params = module.parameter_dict()
    if strict:
        missing = sorted(set(params) - set(entries))
        extra = sorted(set(entries) - set(params))
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    untouched = []
    for path, prm in params.items():
        e = entries.get(path)
        if e is None or e.data.shape != prm.shape:
            untouched.append(path)
            continue
        prm.data = e.data
        if restore_flags:
            prm.trainable = e.trainable
    return untouched
