"""Binary tensor container shared by adapter files and base checkpoints.

Layout, all integers little-endian::

    b"PEFT" | version u16 | kind u8 | config digest (32 bytes) | count u32
    per tensor: name_len u16 | utf-8 name | dtype u8 | ndim u8 | dims u32 * ndim | payload
    crc32 u32  (over every preceding byte)

Only float32 payloads (dtype code 0) are defined.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PEFT"
VERSION = 1

KIND_LORA = 0
KIND_PREFIX = 1
KIND_BASE = 2
KIND_NAMES = {KIND_LORA: "lora", KIND_PREFIX: "prefix", KIND_BASE: "base-model"}

_DTYPES = {0: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float32"): 0}
_HEADER = struct.Struct("<4sHB32sI")


def encode(kind, digest, tensors):
    """Serialise ``(name, array)`` pairs into container bytes."""
    if kind not in KIND_NAMES:
        raise FormatError(f"unknown container kind {kind}")
    if len(digest) != 32:
        raise FormatError("config digest must be 32 bytes")
    parts = [_HEADER.pack(MAGIC, VERSION, kind, bytes(digest), len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob):
    """Parse container bytes into ``(kind, digest, [(name, array), ...])``."""
    if len(blob) < _HEADER.size + 4:
        raise FormatError("truncated container header")
    magic, version, kind, digest, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if kind not in KIND_NAMES:
        raise FormatError(f"unknown container kind {kind}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checksum mismatch (corrupt or truncated file)")
    pos = _HEADER.size
    end = len(blob) - 4
    tensors = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            if code not in _DTYPES:
                raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > end:
                raise FormatError(f"tensor {name!r}: truncated payload")
            arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            tensors.append((name, arr.reshape(dims).astype(np.float32)))
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed tensor table: {exc}") from exc
    if pos != end:
        raise FormatError(f"{end - pos} trailing bytes after tensor table")
    return kind, digest, tensors


def write(path, kind, digest, tensors):
    blob = encode(kind, digest, tensors)
    Path(path).write_bytes(blob)
    return len(blob)


def read(path):
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"no such file: {path}") from exc
    return decode(blob)


def header_size(names_and_ndims):
    """Bytes of non-payload overhead for a given tensor table."""
    n = _HEADER.size + 4
    for name, ndim in names_and_ndims:
        n += 2 + len(name.encode("utf-8")) + 2 + 4 * ndim
    return n
