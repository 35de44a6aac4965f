"""Low-level helpers for the binary cache containers.

All cache files follow the same skeleton: ASCII magic, little-endian
integer header fields, raw numeric payload, and a trailing 32-byte SHA-256
digest of the source mesh file for staleness detection. Writes go through
a temp file + rename so a crash never leaves a half-written cache entry,
and per-entry lock files serialize concurrent writers.
"""

from __future__ import annotations

import hashlib
import os
import struct
import time
from contextlib import contextmanager

import numpy as np

from .errors import CacheError

HASH_BYTES = 32


def file_sha256(path) -> bytes:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.digest()


def read_exact(fh, n: int, path, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CacheError(f"{path}: truncated while reading {what}")
    return data


def expect_magic(fh, magic: bytes, path) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise CacheError(f"{path}: bad magic {got!r}, expected {magic!r}")


def read_u32(fh, path, what: str) -> int:
    return struct.unpack("<I", read_exact(fh, 4, path, what))[0]


def read_array(fh, dtype, count: int, path, what: str) -> np.ndarray:
    dtype = np.dtype(dtype).newbyteorder("<")
    raw = read_exact(fh, dtype.itemsize * count, path, what)
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))


def write_array(fh, array: np.ndarray, dtype) -> None:
    fh.write(np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


@contextmanager
def atomic_write(path):
    """Write to `<path>.tmp.<pid>` and rename into place on success."""
    path = str(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    fh = open(tmp, "wb")
    try:
        yield fh
        fh.close()
        os.replace(tmp, path)
    except BaseException:
        fh.close()
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@contextmanager
def entry_lock(path, timeout: float = 60.0):
    """Exclusive advisory lock via an O_EXCL lock file next to the entry."""
    lock = f"{path}.lock"
    deadline = time.monotonic() + timeout
    while True:
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            if time.monotonic() > deadline:
                raise CacheError(f"timed out waiting for lock {lock}") from None
            time.sleep(0.05)
    try:
        yield
    finally:
        os.close(fd)
        try:
            os.unlink(lock)
        except FileNotFoundError:
            pass
