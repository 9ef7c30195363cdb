"""Binary containers for named tensors and datasets.

Weights file ("RPGW"): magic, format version (u32 LE), tensor count (u32),
then per tensor: name byte-length (u32) + UTF-8 name, rank (u32), dims
(u32 each), data as little-endian IEEE-754 float64.

Dataset file ("RPGD"): same header and tensor block, then a label block
(count as u32, labels as u32 each) and a domain tag (length + UTF-8).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC_WEIGHTS = b"RPGW"
MAGIC_DATASET = b"RPGD"
FORMAT_VERSION = 1

_MAX_RANK = 32
_MAX_ELEMENTS = 2**31


def _write_u32(f, value: int):
    if not 0 <= value < 2**32:
        raise FormatError(f"value {value} does not fit in u32")
    f.write(struct.pack("<I", value))


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError("truncated file")
    return data


def _read_u32(f) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def write_tensor_block(f, items):
    """Write an ordered list of (name, array) pairs."""
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    _write_u32(f, len(items))
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        _write_u32(f, len(raw))
        f.write(raw)
        _write_u32(f, arr.ndim)
        for d in arr.shape:
            _write_u32(f, d)
        f.write(arr.astype("<f8").tobytes())


def read_tensor_block(f) -> dict:
    """Read a tensor block into an insertion-ordered name -> array dict."""
    count = _read_u32(f)
    out = {}
    for _ in range(count):
        name_len = _read_u32(f)
        name = _read_exact(f, name_len).decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        rank = _read_u32(f)
        if rank > _MAX_RANK:
            raise FormatError(f"tensor rank {rank} too large")
        dims = tuple(_read_u32(f) for _ in range(rank))
        n = 1
        for d in dims:
            n *= d
            if n > _MAX_ELEMENTS:
                raise FormatError(f"tensor {name!r} dims {dims} overflow")
        data = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8")
        out[name] = data.astype(np.float64).reshape(dims)
    return out


def _check_eof(f):
    if f.read(1):
        raise FormatError("trailing bytes after expected content")


def save_weights(path, items):
    """Persist named tensors; ``items`` is a dict or (name, array) list."""
    if isinstance(items, dict):
        items = list(items.items())
    with open(path, "wb") as f:
        f.write(MAGIC_WEIGHTS)
        _write_u32(f, FORMAT_VERSION)
        write_tensor_block(f, items)


def load_weights(path) -> dict:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC_WEIGHTS:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC_WEIGHTS!r}")
        version = _read_u32(f)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        tensors = read_tensor_block(f)
        _check_eof(f)
    return tensors
