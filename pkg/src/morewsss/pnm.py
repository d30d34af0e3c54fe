"""Binary PGM/PPM (netpbm P5/P6) reading and writing.

Label maps are written verbatim, so a mask pixel with value 255 stays 255.
Values above 255 switch the file to 16-bit big-endian samples.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.size and (arr.min() < 0 or not np.all(arr == np.round(arr))):
        raise ValueError("netpbm samples must be non-negative integers")
    top = int(arr.max()) if arr.size else 0
    maxval = 255 if top <= 255 else 65535
    if top > 65535:
        raise ValueError(f"sample {top} exceeds 16 bits")
    h, w = arr.shape[:2]
    head = magic + f"\n{w} {h}\n{maxval}\n".encode("ascii")
    body = arr.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    return head + body


def write_pgm(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"graymap needs a 2-D array, got shape {arr.shape}")
    Path(path).write_bytes(_encode(b"P5", arr))


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """``rgb`` is ``[H, W, 3]`` integers, or floats in [0, 1] which are scaled to 0..255."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"pixmap needs an [H, W, 3] array, got shape {rgb.shape}")
    if rgb.dtype.kind == "f":
        rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255)
    Path(path).write_bytes(_encode(b"P6", rgb))


def to_gray(scores: np.ndarray) -> np.ndarray:
    """Map [0, 1] scores to 0..255 integers."""
    return np.round(np.clip(scores, 0.0, 1.0) * 255).astype(np.uint8)


def read_pnm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported netpbm magic {magic!r}")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    arr = np.frombuffer(data, dtype=dtype, count=w * h * ch, offset=pos).astype(np.int64)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w))
