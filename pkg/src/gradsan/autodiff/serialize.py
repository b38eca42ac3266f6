"""Binary encoding of parameter tensors.

Tensor: ``u32 ndim``, ``ndim x u32`` extents, then the row-major float64
data, all little-endian. A collection is ``u32 count`` followed by
``u16 name length``, UTF-8 name and tensor for each entry.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

_LE_F64 = np.dtype("<f8")


class SerializationError(ValueError):
    pass


def pack_tensor(a) -> bytes:
    a = np.asarray(a, dtype=_LE_F64)  # ascontiguousarray would promote 0-d to 1-d
    head = struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + a.tobytes(order="C")


def unpack_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``; returns the array and the new offset."""
    try:
        (ndim,) = struct.unpack_from("<I", buf, offset)
        if ndim > 32:
            raise SerializationError(f"implausible tensor rank {ndim}")
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
    except struct.error as e:
        raise SerializationError(f"truncated tensor header: {e}") from None
    n = int(np.prod(shape, dtype=np.int64))
    end = offset + 8 * n
    if end > len(buf):
        raise SerializationError(f"truncated tensor data: need {8 * n} bytes at {offset}, have {len(buf) - offset}")
    data = np.frombuffer(buf, dtype=_LE_F64, count=n, offset=offset).astype(np.float64)
    return data.reshape(shape), end


def pack_params(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(pack_tensor(arr))
    return b"".join(parts)


def unpack_params(buf: bytes, offset: int = 0) -> tuple[dict[str, np.ndarray], int]:
    try:
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            name = bytes(buf[offset : offset + nlen]).decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise SerializationError("truncated parameter name")
            offset += nlen
            out[name], offset = unpack_tensor(buf, offset)
    except (struct.error, UnicodeDecodeError) as e:
        raise SerializationError(f"corrupt parameter block: {e}") from None
    return out, offset
