"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MORE"  u32 version  u32 entry_count
    entry_count x ( u32 name_len, name utf-8, u32 rank, rank x u64 dims,
                    prod(dims) x f64 payload )

Run metadata rides along as ordinary entries: ``__step__`` and
``__seed__`` are rank-0, ``__config__`` holds the echoed config text as
one byte per element.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MORE"
VERSION = 1
_STEP, _SEED, _CONFIG = "__step__", "__seed__", "__config__"


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    config_text: str = ""


def encode(ckpt: Checkpoint) -> bytes:
    entries = dict(ckpt.tensors)
    entries[_STEP] = np.array(float(ckpt.step))
    entries[_SEED] = np.array(float(ckpt.seed))
    entries[_CONFIG] = np.frombuffer(ckpt.config_text.encode("utf-8"), dtype=np.uint8).astype(np.float64)
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    entries = {}
    for _ in range(count):
        at = r.pos
        (n,) = r.unpack("<I", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("name is not utf-8", at + 4) from None
        (rank,) = r.unpack("<I", "rank")
        if rank > 16:
            raise CheckpointFormatError(f"implausible rank {rank}", r.pos - 4)
        dims = r.unpack(f"<{rank}Q", "dims")
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * size, f"payload of {name!r}")
        if name in entries:
            raise CheckpointFormatError(f"duplicate entry {name!r}", at)
        entries[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes", r.pos)
    try:
        step = int(entries.pop(_STEP).item())
        seed = int(entries.pop(_SEED).item())
        text = bytes(entries.pop(_CONFIG).astype(np.uint8)).decode("utf-8")
    except KeyError as exc:
        raise CheckpointFormatError(f"missing metadata entry {exc}", len(buf)) from None
    return Checkpoint(entries, step, seed, text)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
