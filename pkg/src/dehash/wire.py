"""Wire format for a transmitted query: packed code plus optional context."""

from __future__ import annotations

import struct

import numpy as np

from .hashing import BinaryCode
from .reconstruct import ContextTag

WIRE_MAGIC = b"DHWIRE01"

_FLAG_GPS = 0x01
_FLAG_CATEGORY = 0x02


class WireFormatError(ValueError):
    """Raised when a payload cannot be decoded."""


def wire_encode(code: BinaryCode, context: ContextTag | None = None) -> bytes:
    """Serialize a code and its context cues (little-endian)."""
    flags = 0
    tail = b""
    if context is not None:
        if context.gps is not None:
            flags |= _FLAG_GPS
            tail += struct.pack("<2d", *context.gps)
        if context.category is not None:
            flags |= _FLAG_CATEGORY
            tail += struct.pack("<I", context.category)
    return (
        WIRE_MAGIC
        + struct.pack("<I", code.nbits)
        + code.packed.tobytes()
        + struct.pack("<B", flags)
        + tail
    )


def wire_decode(payload: bytes) -> tuple[BinaryCode, ContextTag]:
    """Parse a payload produced by :func:`wire_encode`; never returns partial data."""
    if len(payload) < 12:
        raise WireFormatError(f"payload of {len(payload)} bytes is shorter than the header")
    if payload[:8] != WIRE_MAGIC:
        raise WireFormatError("bad magic")
    (nbits,) = struct.unpack_from("<I", payload, 8)
    nbytes = (nbits + 7) // 8
    off = 12
    if len(payload) < off + nbytes + 1:
        raise WireFormatError(f"truncated at byte {len(payload)}: code needs {off + nbytes + 1}")
    code = BinaryCode(np.frombuffer(payload, dtype=np.uint8, count=nbytes, offset=off).copy(), int(nbits))
    off += nbytes
    flags = payload[off]
    off += 1
    if flags & ~(_FLAG_GPS | _FLAG_CATEGORY):
        raise WireFormatError(f"unknown context flags 0x{flags:02x}")
    gps = None
    category = None
    if flags & _FLAG_GPS:
        if len(payload) < off + 16:
            raise WireFormatError(f"truncated at byte {len(payload)}: GPS needs {off + 16}")
        gps = struct.unpack_from("<2d", payload, off)
        off += 16
    if flags & _FLAG_CATEGORY:
        if len(payload) < off + 4:
            raise WireFormatError(f"truncated at byte {len(payload)}: category needs {off + 4}")
        (category,) = struct.unpack_from("<I", payload, off)
        off += 4
    if off != len(payload):
        raise WireFormatError(f"{len(payload) - off} trailing bytes after offset {off}")
    return code, ContextTag(gps=gps, category=None if category is None else int(category))
