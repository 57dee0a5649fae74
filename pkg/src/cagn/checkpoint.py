"""Binary tensor checkpoints.

Layout (all little-endian):
  magic "CAGN" | u32 format_version | u64 tensor_count
  per tensor: u32 name_len | name utf-8 | u8 ndim | u64 dims[] | u8 dtype
              tag (0=f32, 1=f64, 2=i64) | raw payload
  trailer: 32-byte SHA-256 of everything before it

Round-trips are bit-exact; a bad checksum or truncated file refuses to
load.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolationError, NotFoundError, ValidationError
from .tensor import Tensor

MAGIC = b"CAGN"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save(path, tensors: dict) -> None:
    """`tensors` maps name -> Tensor or ndarray; names are written sorted
    so identical contents always produce identical bytes."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IQ", VERSION, len(tensors))
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.asarray(arr)
        arr = np.ascontiguousarray(arr).reshape(arr.shape)  # keep 0-d shape
        le = arr.dtype.newbyteorder("<")
        if le not in _DTYPE_TAGS:
            raise ContractViolationError(f"checkpoint: unsupported dtype {arr.dtype} for '{name}'")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += struct.pack("<B", _DTYPE_TAGS[le])
        buf += arr.astype(le).tobytes()
    buf += hashlib.sha256(bytes(buf)).digest()
    Path(path).write_bytes(bytes(buf))


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[:4] != MAGIC:
        raise ValidationError([f"{path}: not a CAGN checkpoint"])
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValidationError([f"{path}: checksum mismatch, refusing to load"])
    off = 4
    version, count = struct.unpack_from("<IQ", body, off)
    off += 12
    if version != VERSION:
        raise ValidationError([f"{path}: unsupported format version {version}"])
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        (tag,) = struct.unpack_from("<B", body, off)
        off += 1
        if tag not in _TAG_DTYPES:
            raise ValidationError([f"{path}: unknown dtype tag {tag}"])
        dtype = _TAG_DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        nbytes = n * dtype.itemsize
        arr = np.frombuffer(body, dtype=dtype, count=n, offset=off).reshape(dims)
        off += nbytes
        out[name] = arr.copy()
    if off != len(body):
        raise ValidationError([f"{path}: trailing bytes after last tensor"])
    return out
