"""TSR1 binary tensor format.

Layout: ``b"TSR1"``, rank as u32 LE, one u32 LE per extent, then the data as
raw little-endian float64 in row-major order.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"TSR1"


class FormatError(ValueError):
    """Corrupt or truncated binary data; ``offset`` is the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_array(arr) -> bytes:
    a = np.asarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def decode_array(buf, offset: int = 0):
    """Decode one TSR1 record at ``offset``; returns ``(array, next_offset)``."""
    view = memoryview(buf)
    if bytes(view[offset : offset + 4]) != MAGIC:
        raise FormatError("bad TSR1 magic", offset)
    pos = offset + 4
    if pos + 4 > len(view):
        raise FormatError("truncated TSR1 rank", pos)
    (rank,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if pos + 4 * rank > len(view):
        raise FormatError("truncated TSR1 extents", pos)
    shape = struct.unpack_from(f"<{rank}I", view, pos)
    pos += 4 * rank
    nbytes = 8 * int(np.prod(shape, dtype=np.int64))
    if pos + nbytes > len(view):
        raise FormatError(f"truncated TSR1 data, need {nbytes} bytes", pos)
    arr = np.frombuffer(view[pos : pos + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
    return arr, pos + nbytes


def save_tensor(t, path) -> None:
    data = t.data if isinstance(t, Tensor) else t
    with open(path, "wb") as fh:
        fh.write(encode_array(data))


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_array(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after TSR1 record", end)
    return Tensor(arr, requires_grad=requires_grad)
