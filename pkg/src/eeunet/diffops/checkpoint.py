"""Portable array container used for checkpoints.

Byte layout (all integers little-endian)::

    magic      8 bytes  b"EEUNETCK"
    version    u32      1
    meta_len   u32      length of the JSON metadata block
    meta       UTF-8 JSON object (architecture, optimiser scalars, ...)
    count      u32      number of arrays
    then per array:
        name_len  u16, name  UTF-8
        dtype     u8   (1 = float32, 2 = float64, 3 = int64)
        ndim      u8,  dims  ndim x u32
        payload   little-endian, C order
"""
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError, IoFailure

MAGIC = b"EEUNETCK"
VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def encode_container(meta, arrays):
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise DataError(f"cannot store dtype {arr.dtype} for {name}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode_container(blob):
    if blob[:8] != MAGIC:
        raise DataError("not an EE-UNet checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(blob[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            dtype = _CODE_DTYPES[code].newbyteorder("<")
            n = int(np.prod(shape))
            if off + n * dtype.itemsize > len(blob):
                raise DataError(f"checkpoint truncated in {name}")
            arrays[name] = np.frombuffer(blob, dtype, n, off).reshape(shape).astype(dtype.newbyteorder("="))
            off += n * dtype.itemsize
    except (struct.error, KeyError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from exc
    return meta, arrays


def write_container(path, meta, arrays):
    try:
        Path(path).write_bytes(encode_container(meta, arrays))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def read_container(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_container(blob)
