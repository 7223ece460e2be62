"""Named-tensor container used for checkpoints, model files and samples.

Layout (little-endian): magic ``CMRK``, version u32, tensor count u32, then
per tensor: u16 name length, UTF-8 name, u8 dtype tag (0=f64, 1=f32,
2=i64), u8 rank, u64 per dimension, raw row-major data.
"""
import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMRK"
VERSION = 1
_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


class ContainerError(IOError):
    pass


class ContainerFormatError(ContainerError):
    pass


class ContainerVersionError(ContainerError):
    pass


class ContainerTruncatedError(ContainerError):
    pass


def _as_storable(name, a):
    a = np.asarray(a)
    if a.dtype.kind == "f":
        dt = np.dtype("<f4") if a.dtype == np.float32 else np.dtype("<f8")
    elif a.dtype.kind in "iub":
        dt = np.dtype("<i8")
    else:
        raise TypeError(f"tensor {name!r} has unsupported dtype {a.dtype}")
    return np.asarray(a, dtype=dt, order="C")


def dumps(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, a in tensors.items():
        a = _as_storable(name, a)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _TAGS[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerTruncatedError(
                f"container truncated: needed {n} bytes at offset {pos}, have {len(view) - pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise ContainerFormatError("not a CMRK container (bad magic bytes)")
    pos = 4
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerVersionError(f"container version {version}, expected {VERSION}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise ContainerFormatError(f"unknown dtype tag {tag} for tensor {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise ContainerFormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save(path, tensors):
    data = dumps(tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load(path) -> dict:
    return loads(Path(path).read_bytes())


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def decode_text(a) -> str:
    return bytes(np.asarray(a, dtype=np.uint8).tolist()).decode("utf-8")
