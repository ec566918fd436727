"""Minimal little-endian binary tensor format.

Layout::

    b"SEGT" | version:u8 (=1) | dtype:u8 | rank:u32le | dims:u32le * rank | payload

The payload is the raw row-major little-endian array data.  dtype codes are
1 = float32, 2 = uint8 and 3 = float64 (used for network checkpoints).
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SEGT"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("u1"): 2,
    np.dtype("<f8"): 3,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


class TensorFormatError(ValueError):
    """Base class for malformed tensor files."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnknownDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class TensorIOError(OSError):
    """An OS-level failure while reading or writing a tensor file."""


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}; expected float32, float64 or uint8")
    header = MAGIC + bytes([VERSION, DTYPE_CODES[dt]])
    header += struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes(order="C")


def decode_tensor(buf: bytes, path="<bytes>") -> np.ndarray:
    if buf[:4] != MAGIC:
        raise BadMagicError(path, f"bad magic {buf[:4]!r}")
    if len(buf) < 10:
        raise TruncatedPayloadError(path, "header truncated")
    version, code = buf[4], buf[5]
    if version != VERSION:
        raise UnsupportedVersionError(path, f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise UnknownDtypeError(path, f"unknown dtype code {code}")
    (rank,) = struct.unpack_from("<I", buf, 6)
    offset = 10 + 4 * rank
    if len(buf) < offset:
        raise TruncatedPayloadError(path, f"header declares rank {rank} but is truncated")
    shape = struct.unpack_from(f"<{rank}I", buf, 10)
    dtype = CODE_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = buf[offset:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            path, f"payload has {len(payload)} bytes, shape {tuple(shape)} needs {expected}"
        )
    if len(payload) > expected:
        raise TensorFormatError(path, f"{len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(array, path) -> None:
    data = encode_tensor(array)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise TensorIOError(f"cannot write tensor to {os.fspath(path)}: {exc}") from exc


def load_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise TensorIOError(f"cannot read tensor from {os.fspath(path)}: {exc}") from exc
    return decode_tensor(buf, path)
