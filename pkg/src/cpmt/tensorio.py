"""Binary tensor files.

Layout (all little-endian)::

    offset 0   4 bytes   magic b"CPMT"
    offset 4   u16       version (1)
    offset 6   u16       rank r (1..3)
    offset 8   r × u64   shape
    then       float32   row-major payload, prod(shape) values

A ``[2, 3]`` tensor therefore occupies 4 + 2 + 2 + 16 + 24 = 48 bytes.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"CPMT"
VERSION = 1
_HEAD = struct.Struct("<4sHH")


def encode_tensor(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not 1 <= arr.ndim <= 3:
        raise FormatError(f"tensor files hold rank 1-3 arrays, got shape {arr.shape}")
    if any(s < 1 for s in arr.shape):
        raise FormatError(f"tensor dimensions must be positive, got {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _HEAD.pack(MAGIC, VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape) + payload


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise FormatError(f"{source}: truncated header, {len(buf)} of {_HEAD.size} bytes", offset=len(buf))
    magic, version, rank = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}", offset=4)
    if not 1 <= rank <= 3:
        raise FormatError(f"{source}: rank {rank} outside 1..3", offset=6)
    shape_end = _HEAD.size + 8 * rank
    if len(buf) < shape_end:
        raise FormatError(f"{source}: truncated shape, {len(buf)} of {shape_end} bytes", offset=len(buf))
    shape = struct.unpack_from(f"<{rank}Q", buf, _HEAD.size)
    if any(s == 0 for s in shape):
        raise FormatError(f"{source}: zero-length dimension in shape {shape}", offset=_HEAD.size)
    expected = 4 * int(np.prod(shape))
    actual = len(buf) - shape_end
    if actual != expected:
        raise FormatError(
            f"{source}: payload length mismatch, expected {expected} bytes, got {actual}",
            offset=shape_end + min(actual, expected),
        )
    return np.frombuffer(buf, dtype="<f4", count=expected // 4, offset=shape_end).reshape(shape).astype(np.float32)


def write_tensor(path: str | os.PathLike, t) -> int:
    """Write ``t`` to ``path``; returns the number of bytes written."""
    data = encode_tensor(t)
    Path(path).write_bytes(data)
    return len(data)


def read_tensor(path: str | os.PathLike) -> Tensor:
    return Tensor(decode_tensor(Path(path).read_bytes(), str(path)))


def read_header(path: str | os.PathLike) -> tuple[int, ...]:
    """Shape stored in a tensor file, without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size + 24)
    if len(head) < _HEAD.size:
        raise FormatError(f"{path}: truncated header", offset=len(head))
    magic, version, rank = _HEAD.unpack_from(head, 0)
    if magic != MAGIC or version != VERSION or not 1 <= rank <= 3:
        raise FormatError(f"{path}: not a CPMT v1 tensor file", offset=0)
    if len(head) < _HEAD.size + 8 * rank:
        raise FormatError(f"{path}: truncated shape", offset=len(head))
    return struct.unpack_from(f"<{rank}Q", head, _HEAD.size)
