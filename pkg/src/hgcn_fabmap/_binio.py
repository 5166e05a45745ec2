"""Little-endian sidecar files: a magic line followed by typed blocks."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when a file does not parse under its declared format."""


def write_magic(fh: BinaryIO, magic: bytes) -> None:
    fh.write(magic)


def read_magic(fh: BinaryIO, magic: bytes, path: str | Path = "<stream>") -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")


def write_u64(fh: BinaryIO, *values: int) -> None:
    fh.write(struct.pack(f"<{len(values)}Q", *values))


def read_u64(fh: BinaryIO, count: int = 1, path: str | Path = "<stream>") -> tuple[int, ...]:
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack(f"<{count}Q", raw)


def write_array(fh: BinaryIO, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def read_array(fh: BinaryIO, dtype: str, shape: tuple[int, ...], path: str | Path = "<stream>") -> np.ndarray:
    dt = np.dtype(dtype).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise FormatError(f"{path}: truncated payload, expected {count} values of {dtype}")
    return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype), copy=True).reshape(shape)


def expect_eof(fh: BinaryIO, path: str | Path = "<stream>") -> None:
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after payload")
