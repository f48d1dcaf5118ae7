"""Flat little-endian record encoding shared by storage and wire payloads.

Property values carry a one-byte type tag followed by a fixed-width
little-endian payload or a u32 length prefix:

    0x01 str        u32 len + utf-8
    0x02 int64
    0x03 float64
    0x04 vector     u32 count + float64 * count
    0x05 composite  u32 count + (u32 len + tagged value) * count
    0x06 bytes      u32 len + raw
"""

from __future__ import annotations

import struct
from typing import Any, Mapping, Union

TAG_STR = 0x01
TAG_INT = 0x02
TAG_FLOAT = 0x03
TAG_VECTOR = 0x04
TAG_COMPOSITE = 0x05
TAG_BYTES = 0x06

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")

Value = Union[str, int, float, bytes, list, tuple]


class CodecError(ValueError):
    pass


def encode_value(value: Any) -> bytes:
    if isinstance(value, bool):
        return bytes([TAG_INT]) + _I64.pack(int(value))
    if isinstance(value, str):
        raw = value.encode()
        return bytes([TAG_STR]) + _U32.pack(len(raw)) + raw
    if isinstance(value, int):
        return bytes([TAG_INT]) + _I64.pack(value)
    if isinstance(value, float):
        return bytes([TAG_FLOAT]) + _F64.pack(value)
    if isinstance(value, (bytes, bytearray)):
        return bytes([TAG_BYTES]) + _U32.pack(len(value)) + bytes(value)
    if isinstance(value, list):
        try:
            floats = [float(x) for x in value]
        except (TypeError, ValueError) as exc:
            raise CodecError("vector values must be numbers") from exc
        return bytes([TAG_VECTOR]) + _U32.pack(len(floats)) + struct.pack(f"<{len(floats)}d", *floats)
    if isinstance(value, tuple):
        parts = [encode_value(v) for v in value]
        return bytes([TAG_COMPOSITE]) + _U32.pack(len(parts)) + b"".join(
            _U32.pack(len(p)) + p for p in parts
        )
    raise CodecError(f"unsupported property type {type(value).__name__}")


def decode_value(buf: bytes, offset: int = 0) -> tuple[Any, int]:
    """Decode one tagged value; returns (value, next offset)."""
    try:
        tag = buf[offset]
        pos = offset + 1
        if tag == TAG_INT:
            return _I64.unpack_from(buf, pos)[0], pos + 8
        if tag == TAG_FLOAT:
            return _F64.unpack_from(buf, pos)[0], pos + 8
        (n,) = _U32.unpack_from(buf, pos)
        pos += 4
        if tag == TAG_STR:
            end = pos + n
            _check(buf, end)
            return bytes(buf[pos:end]).decode(), end
        if tag == TAG_BYTES:
            end = pos + n
            _check(buf, end)
            return bytes(buf[pos:end]), end
        if tag == TAG_VECTOR:
            end = pos + 8 * n
            _check(buf, end)
            return list(struct.unpack_from(f"<{n}d", buf, pos)), end
        if tag == TAG_COMPOSITE:
            items = []
            for _ in range(n):
                (size,) = _U32.unpack_from(buf, pos)
                pos += 4
                item, after = decode_value(buf, pos)
                if after != pos + size:
                    raise CodecError("composite element length mismatch")
                items.append(item)
                pos = after
            return tuple(items), pos
    except (IndexError, struct.error, UnicodeDecodeError) as exc:
        raise CodecError(str(exc)) from exc
    raise CodecError(f"unknown value tag {tag:#x}")


def _check(buf: bytes, end: int) -> None:
    if end > len(buf):
        raise CodecError("truncated value")


class Writer:
    """Append-only builder for little-endian records."""

    __slots__ = ("parts",)

    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self.parts.append(_U8.pack(v))
        return self

    def u16(self, v: int) -> "Writer":
        self.parts.append(_U16.pack(v))
        return self

    def u32(self, v: int) -> "Writer":
        self.parts.append(_U32.pack(v))
        return self

    def u64(self, v: int) -> "Writer":
        self.parts.append(_U64.pack(v))
        return self

    def f64(self, v: float) -> "Writer":
        self.parts.append(_F64.pack(v))
        return self

    def blob(self, v: bytes) -> "Writer":
        self.parts.append(_U32.pack(len(v)))
        self.parts.append(v)
        return self

    def text(self, v: str) -> "Writer":
        return self.blob(v.encode())

    def raw(self, v: bytes) -> "Writer":
        self.parts.append(v)
        return self

    def props(self, props: Mapping[str, Any] | None) -> "Writer":
        props = props or {}
        self.u16(len(props))
        for name, value in props.items():
            self.text(name)
            self.blob(encode_value(value))
        return self

    def u64s(self, values) -> "Writer":
        values = list(values)
        self.u32(len(values))
        self.parts.append(struct.pack(f"<{len(values)}Q", *values))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0) -> None:
        self.buf = memoryview(buf)
        self.pos = pos

    def _take(self, st: struct.Struct):
        try:
            (v,) = st.unpack_from(self.buf, self.pos)
        except struct.error as exc:
            raise CodecError("truncated payload") from exc
        self.pos += st.size
        return v

    def u8(self) -> int:
        return self._take(_U8)

    def u16(self) -> int:
        return self._take(_U16)

    def u32(self) -> int:
        return self._take(_U32)

    def u64(self) -> int:
        return self._take(_U64)

    def f64(self) -> float:
        return self._take(_F64)

    def blob(self) -> bytes:
        n = self.u32()
        end = self.pos + n
        if end > len(self.buf):
            raise CodecError("truncated payload")
        out = bytes(self.buf[self.pos:end])
        self.pos = end
        return out

    def text(self) -> str:
        try:
            return self.blob().decode()
        except UnicodeDecodeError as exc:
            raise CodecError(str(exc)) from exc

    def props(self) -> dict[str, Any]:
        out = {}
        for _ in range(self.u16()):
            name = self.text()
            out[name] = decode_value(self.blob())[0]
        return out

    def u64s(self) -> list[int]:
        n = self.u32()
        end = self.pos + 8 * n
        if end > len(self.buf):
            raise CodecError("truncated payload")
        out = list(struct.unpack_from(f"<{n}Q", self.buf, self.pos))
        self.pos = end
        return out

    def done(self) -> bool:
        return self.pos >= len(self.buf)

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise CodecError(f"{len(self.buf) - self.pos} trailing bytes")
