"""Little-endian binary formats sharing the ``RMTL`` 16-byte header.

Image/label files: ``b"RMTL" u32 C u32 H u32 W`` followed by float32 data.

Named-tensor files (checkpoints, experts, routers):

    b"RMTL" u32 version u32 kind u32 payload_flags
    [kind-specific meta record]
    u32 count
    count × (u32 name_len, name bytes, u32 ndim, u32 dims..., float32 data)
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError

MAGIC = b"RMTL"
VERSION = 1

KIND_CHECKPOINT = 1
KIND_EXPERT = 2
KIND_ROUTER = 3

_HDR = struct.Struct("<4sIII")


# ---------------------------------------------------------------------------
# raw images / labels
# ---------------------------------------------------------------------------


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"expected C×H×W array, got shape {arr.shape}")
    c, h, w = arr.shape
    return _HDR.pack(MAGIC, c, h, w) + arr.tobytes(order="C")


def decode_array(buf: bytes) -> np.ndarray:
    if len(buf) < _HDR.size:
        raise FormatError("truncated header", len(buf))
    magic, c, h, w = _HDR.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    need = _HDR.size + 4 * c * h * w
    if len(buf) != need:
        raise FormatError(f"expected {need} bytes for {c}x{h}x{w}, found {len(buf)}", min(len(buf), need))
    return np.frombuffer(buf, dtype="<f4", offset=_HDR.size).reshape(c, h, w).astype(np.float32)


def write_array(path, arr):
    Path(path).write_bytes(encode_array(arr))


def read_array(path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# named tensors
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))


def encode_tensors(kind: int, tensors: dict[str, np.ndarray], meta: bytes = b"", flags: int = 0) -> bytes:
    parts = [_HDR.pack(MAGIC, VERSION, kind, flags), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(buf: bytes, kind: int, meta_reader=None, offsets: Optional[dict] = None):
    """Parse a named-tensor file. Returns (flags, meta, tensors).

    ``meta_reader`` is called with the internal reader positioned after the
    header and must consume the kind-specific meta record. When ``offsets`` is
    given it is filled with the byte offset of every tensor record.
    """
    if len(buf) < _HDR.size + 4:
        raise FormatError("file too short for header", len(buf))
    magic, version, got_kind, flags = _HDR.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if got_kind != kind:
        raise FormatError(f"file kind {got_kind} where {kind} was expected", 8)
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    actual = zlib.crc32(buf[:-4])
    if stored_crc != actual:
        raise FormatError(f"checksum mismatch: stored {stored_crc:#010x}, computed {actual:#010x}", len(buf) - 4)
    r = _Reader(buf[:-4])
    r.pos = _HDR.size
    meta = meta_reader(r) if meta_reader is not None else None
    (count,) = r.unpack("I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("I", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        (ndim,) = r.unpack("I", "ndim")
        shape = r.unpack(f"{ndim}I", "shape") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        data = r.take(4 * size, f"data of {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
        if offsets is not None:
            offsets[name] = start
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return flags, meta, tensors


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    Path(path).write_bytes(encode_tensors(KIND_CHECKPOINT, tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    _, _, tensors = decode_tensors(Path(path).read_bytes(), KIND_CHECKPOINT)
    return tensors
