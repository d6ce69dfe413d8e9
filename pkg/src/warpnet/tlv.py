"""Canonical TLV framing: 1-byte field id, 4-byte big-endian length, value.

Fields are written in ascending id order and each id appears at most once, so
the byte form of a record is unique.  Decoders reject anything else.
"""

from __future__ import annotations

import struct
from typing import Iterable, Mapping, Optional

_HEADER = struct.Struct(">BI")


class MalformedEncoding(ValueError):
    pass


def encode(fields: Iterable[tuple[int, Optional[bytes]]]) -> bytes:
    """Frame ``(field_id, value)`` pairs; ``None`` values are omitted."""
    out = bytearray()
    last = -1
    for fid, value in fields:
        if value is None:
            continue
        if fid <= last:
            raise ValueError(f"field {fid} out of order")
        last = fid
        out += _HEADER.pack(fid, len(value))
        out += value
    return bytes(out)


def decode(buf: bytes, known: Mapping[int, bool]) -> dict[int, bytes]:
    """Parse a framed record; ``known`` maps field id to whether it is mandatory."""
    buf = bytes(buf)
    fields: dict[int, bytes] = {}
    pos = 0
    last = -1
    while pos < len(buf):
        if pos + _HEADER.size > len(buf):
            raise MalformedEncoding("truncated field header")
        fid, length = _HEADER.unpack_from(buf, pos)
        pos += _HEADER.size
        if pos + length > len(buf):
            raise MalformedEncoding(f"field {fid} truncated")
        if fid not in known:
            raise MalformedEncoding(f"unknown field {fid}")
        if fid in fields:
            raise MalformedEncoding(f"duplicate field {fid}")
        if fid < last:
            raise MalformedEncoding(f"field {fid} out of order")
        last = fid
        fields[fid] = buf[pos : pos + length]
        pos += length
    missing = [fid for fid, required in known.items() if required and fid not in fields]
    if missing:
        raise MalformedEncoding(f"missing mandatory fields {missing}")
    return fields


def u64(value: int) -> bytes:
    return value.to_bytes(8, "big")


def read_u64(raw: bytes) -> int:
    if len(raw) != 8:
        raise MalformedEncoding("integer field must be 8 bytes")
    return int.from_bytes(raw, "big")


def text(value: Optional[str]) -> Optional[bytes]:
    return None if value is None else value.encode("utf-8")


def read_text(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedEncoding(str(exc)) from exc


def pack_list(items: Iterable[bytes]) -> bytes:
    """Length-prefixed concatenation (4-byte lengths)."""
    out = bytearray()
    for item in items:
        out += len(item).to_bytes(4, "big") + item
    return bytes(out)


def unpack_list(raw: bytes) -> list[bytes]:
    out = []
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise MalformedEncoding("truncated list item length")
        n = int.from_bytes(raw[pos : pos + 4], "big")
        pos += 4
        if pos + n > len(raw):
            raise MalformedEncoding("truncated list item")
        out.append(raw[pos : pos + n])
        pos += n
    return out
