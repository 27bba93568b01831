"""Little-endian binary container shared by the artifact file formats.

Layout: 4 magic bytes, u32 format version, then caller-defined fields built
from the primitives below. Strings are length-prefixed UTF-8; arrays are a
u32 ndim, u32 dims, then raw f64 payload. Short reads raise
``TruncatedFileError`` so a cut-off file never half-loads.
"""

from __future__ import annotations

import hashlib
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError, TruncatedFileError, VersionMismatchError

FORMAT_VERSION = 1


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(buf)}")
    return buf


def write_u32(fh: BinaryIO, value: int):
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def write_u64(fh: BinaryIO, value: int):
    fh.write(struct.pack("<Q", value))


def read_u64(fh: BinaryIO) -> int:
    return struct.unpack("<Q", _read_exact(fh, 8))[0]


def write_f64(fh: BinaryIO, value: float):
    fh.write(struct.pack("<d", value))


def read_f64(fh: BinaryIO) -> float:
    return struct.unpack("<d", _read_exact(fh, 8))[0]


def write_str(fh: BinaryIO, text: str):
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    n = read_u32(fh)
    return _read_exact(fh, n).decode("utf-8")


def write_array(fh: BinaryIO, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    write_u32(fh, arr.ndim)
    for d in arr.shape:
        write_u32(fh, d)
    fh.write(arr.tobytes(order="C"))


def read_array(fh: BinaryIO) -> np.ndarray:
    ndim = read_u32(fh)
    shape = tuple(read_u32(fh) for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(fh, count * 8)
    return np.frombuffer(raw, dtype="<f8", count=count).reshape(shape).copy()


def write_header(fh: BinaryIO, magic: bytes, version: int = FORMAT_VERSION):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    fh.write(magic)
    write_u32(fh, version)


def read_header(fh: BinaryIO, magic: bytes, max_version: int = FORMAT_VERSION) -> int:
    got = fh.read(4)
    if len(got) < 4 or got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")
    version = read_u32(fh)
    if version < 1 or version > max_version:
        raise VersionMismatchError(f"format version {version} unsupported (max {max_version})")
    return version


def fingerprint64(canonical: str) -> int:
    """Stable 64-bit fingerprint of a canonical config string."""
    digest = hashlib.sha256(canonical.encode("utf-8")).digest()
    return struct.unpack("<Q", digest[:8])[0]
