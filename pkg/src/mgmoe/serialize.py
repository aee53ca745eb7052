"""Little-endian binary containers: named tensors, images, bit-packed masks, logit grids."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"MGT1"
IMAGE_MAGIC = b"MGI1"
MASK_MAGIC = b"MGM1"
LOGITS_MAGIC = b"MGL1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """Bad magic, unsupported field, or a truncated payload."""


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated: wanted {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def magic(self, expected: bytes) -> None:
        got = self.take(4)
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}")

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes")


def encode_tensors(tensors: dict) -> bytes:
    """MGT1: header, then per tensor name / rank / extents / dtype tag / raw data.

    Tensors are written in the iteration order of ``tensors``.
    """
    out = [TENSOR_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<I", _TAGS[arr.dtype]))
        out.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> dict:
    r = _Reader(buf)
    r.magic(TENSOR_MAGIC)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported MGT1 version {version}")
    out = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        tag = r.u32()
        if tag not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="))
    r.done()
    return out


def save_tensors(path, tensors: dict) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict:
    return decode_tensors(Path(path).read_bytes())


def encode_image(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"image must be H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    return IMAGE_MAGIC + struct.pack("<II", h, w) + img.astype("<f4").tobytes()


def decode_image(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    r.magic(IMAGE_MAGIC)
    h, w = r.u32(), r.u32()
    arr = np.frombuffer(r.take(h * w * 3 * 4), dtype="<f4").reshape(h, w, 3)
    r.done()
    return arr.astype(np.float32)


def encode_mask(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"mask must be 2-D, got {mask.shape}")
    h, w = mask.shape
    return MASK_MAGIC + struct.pack("<II", h, w) + np.packbits(mask.astype(bool).reshape(-1)).tobytes()


def decode_mask(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    r.magic(MASK_MAGIC)
    h, w = r.u32(), r.u32()
    packed = np.frombuffer(r.take((h * w + 7) // 8), dtype=np.uint8)
    r.done()
    return np.unpackbits(packed, count=h * w).reshape(h, w).astype(bool)


def encode_logits(logits: np.ndarray) -> bytes:
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise FormatError(f"logit grid must be 2-D, got {logits.shape}")
    h, w = logits.shape
    return LOGITS_MAGIC + struct.pack("<II", h, w) + logits.astype("<f4").tobytes()


def decode_logits(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    r.magic(LOGITS_MAGIC)
    h, w = r.u32(), r.u32()
    arr = np.frombuffer(r.take(h * w * 4), dtype="<f4").reshape(h, w)
    r.done()
    return arr.astype(np.float32)
