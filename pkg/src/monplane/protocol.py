"""Binary wire format shared by brokers and clients.

Framing: ``u32-BE total-length | u8 version | u8 kind-tag | fields``,
where total-length counts everything after the length word (so an empty
frame such as PING has length 2). Strings are ``u16-BE len | UTF-8``;
opaque payloads are ``u32-BE len | bytes``. The full layout, with a hex
dump per frame kind, is documented in docs/wire.md.

Pure value transformations; safe to call from any thread.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

VERSION = 0x01

#: Hard cap on a frame's total wire size (length prefix included).
MAX_FRAME_BYTES = 16 * 1024 * 1024

MAX_STRING_BYTES = 0xFFFF

_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")


class ProtocolError(Exception):
    """Base class for every codec error."""


class OversizeFrame(ProtocolError):
    """Frame would exceed (or claims to exceed) MAX_FRAME_BYTES."""


class InvalidString(ProtocolError):
    """String field is not valid UTF-8 or exceeds the u16 length field."""


class BadVersion(ProtocolError):
    """Version octet differs from VERSION."""


class UnknownKind(ProtocolError):
    """Kind tag outside the defined set."""


class TruncatedField(ProtocolError):
    """Frame body ends before its declared fields do."""


class FrameKind(enum.IntEnum):
    REGISTER = 0x01
    REG_OK = 0x02
    REG_ERR = 0x03
    PING = 0x04
    PONG = 0x05
    UNREGISTER = 0x06
    SEND = 0x07
    DELIVER = 0x08
    SUB = 0x09
    UNSUB = 0x0A
    PUB = 0x0B
    PUBDELIVER = 0x0C
    ROUTE_ADD = 0x0D
    ROUTE_DEL = 0x0E
    ERR_NO_ROUTE = 0x0F


# Field schema per kind: s = string, p = payload.
_SCHEMA: dict[FrameKind, tuple[tuple[str, str], ...]] = {
    FrameKind.REGISTER: (("name", "s"),),
    FrameKind.REG_OK: (),
    FrameKind.REG_ERR: (("reason", "s"),),
    FrameKind.PING: (),
    FrameKind.PONG: (),
    FrameKind.UNREGISTER: (),
    FrameKind.SEND: (("dest", "s"), ("src", "s"), ("data", "p")),
    FrameKind.DELIVER: (("src", "s"), ("data", "p")),
    FrameKind.SUB: (("prefix", "s"),),
    FrameKind.UNSUB: (("prefix", "s"),),
    FrameKind.PUB: (("topic", "s"), ("data", "p")),
    FrameKind.PUBDELIVER: (("topic", "s"), ("src", "s"), ("data", "p")),
    FrameKind.ROUTE_ADD: (("name", "s"),),
    FrameKind.ROUTE_DEL: (("name", "s"),),
    FrameKind.ERR_NO_ROUTE: (("dest", "s"),),
}

_KIND_BY_TAG = {int(k): k for k in FrameKind}


@dataclass(frozen=True, slots=True)
class Frame:
    """One decoded wire message. Unused fields stay None."""

    kind: FrameKind
    name: Optional[str] = None
    reason: Optional[str] = None
    dest: Optional[str] = None
    src: Optional[str] = None
    topic: Optional[str] = None
    prefix: Optional[str] = None
    data: Optional[bytes] = None


def register(name: str) -> Frame:
    return Frame(FrameKind.REGISTER, name=name)


def reg_ok() -> Frame:
    return Frame(FrameKind.REG_OK)


def reg_err(reason: str) -> Frame:
    return Frame(FrameKind.REG_ERR, reason=reason)


def ping() -> Frame:
    return Frame(FrameKind.PING)


def pong() -> Frame:
    return Frame(FrameKind.PONG)


def unregister() -> Frame:
    return Frame(FrameKind.UNREGISTER)


def send(dest: str, src: str, data: bytes) -> Frame:
    return Frame(FrameKind.SEND, dest=dest, src=src, data=data)


def deliver(src: str, data: bytes) -> Frame:
    return Frame(FrameKind.DELIVER, src=src, data=data)


def sub(prefix: str) -> Frame:
    return Frame(FrameKind.SUB, prefix=prefix)


def unsub(prefix: str) -> Frame:
    return Frame(FrameKind.UNSUB, prefix=prefix)


def pub(topic: str, data: bytes) -> Frame:
    return Frame(FrameKind.PUB, topic=topic, data=data)


def pubdeliver(topic: str, src: str, data: bytes) -> Frame:
    return Frame(FrameKind.PUBDELIVER, topic=topic, src=src, data=data)


def route_add(name: str) -> Frame:
    return Frame(FrameKind.ROUTE_ADD, name=name)


def route_del(name: str) -> Frame:
    return Frame(FrameKind.ROUTE_DEL, name=name)


def err_no_route(dest: str) -> Frame:
    return Frame(FrameKind.ERR_NO_ROUTE, dest=dest)


def _encode_string(value: str) -> bytes:
    try:
        raw = value.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise InvalidString(str(exc)) from None
    if len(raw) > MAX_STRING_BYTES:
        raise InvalidString(f"string field of {len(raw)} bytes exceeds u16 length")
    return _U16.pack(len(raw)) + raw


def encode(frame: Frame) -> bytes:
    """Encode a frame; raises OversizeFrame/InvalidString on bad input."""
    parts = [b"", bytes((VERSION, frame.kind))]
    for field, ftype in _SCHEMA[frame.kind]:
        value = getattr(frame, field)
        if ftype == "s":
            if not isinstance(value, str):
                raise InvalidString(f"{frame.kind.name}.{field} must be a string")
            parts.append(_encode_string(value))
        else:
            if not isinstance(value, (bytes, bytearray, memoryview)):
                raise InvalidString(f"{frame.kind.name}.{field} must be bytes")
            parts.append(_U32.pack(len(value)))
            parts.append(bytes(value))
    body_len = sum(len(p) for p in parts)
    if body_len + 4 > MAX_FRAME_BYTES:
        raise OversizeFrame(f"frame of {body_len + 4} bytes exceeds {MAX_FRAME_BYTES}")
    parts[0] = _U32.pack(body_len)
    return b"".join(parts)


def decode(buf, offset: int = 0) -> Optional[tuple[Frame, int]]:
    """Decode one frame starting at ``offset``.

    Returns (frame, bytes consumed) or None when the buffer holds an
    incomplete frame. Raises a ProtocolError subclass on malformed input;
    the session layer treats any such error as fatal for the connection.
    """
    view = memoryview(buf)
    avail = len(view) - offset
    if avail < 4:
        return None
    (body_len,) = _U32.unpack_from(view, offset)
    if body_len + 4 > MAX_FRAME_BYTES:
        raise OversizeFrame(f"declared frame of {body_len + 4} bytes exceeds cap")
    if body_len < 2:
        raise TruncatedField(f"declared length {body_len} cannot hold version+kind")
    if avail < 4 + body_len:
        return None
    pos = offset + 4
    end = pos + body_len
    version = view[pos]
    if version != VERSION:
        raise BadVersion(f"version 0x{version:02x}, expected 0x{VERSION:02x}")
    tag = view[pos + 1]
    kind = _KIND_BY_TAG.get(tag)
    if kind is None:
        raise UnknownKind(f"unknown kind tag 0x{tag:02x}")
    pos += 2
    fields: dict[str, object] = {}
    for field, ftype in _SCHEMA[kind]:
        if ftype == "s":
            if end - pos < 2:
                raise TruncatedField(f"{kind.name}.{field}: missing length")
            (slen,) = _U16.unpack_from(view, pos)
            pos += 2
            if end - pos < slen:
                raise TruncatedField(f"{kind.name}.{field}: body ends inside string")
            try:
                fields[field] = bytes(view[pos : pos + slen]).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise InvalidString(f"{kind.name}.{field}: {exc}") from None
            pos += slen
        else:
            if end - pos < 4:
                raise TruncatedField(f"{kind.name}.{field}: missing length")
            (plen,) = _U32.unpack_from(view, pos)
            pos += 4
            if end - pos < plen:
                raise TruncatedField(f"{kind.name}.{field}: body ends inside payload")
            fields[field] = bytes(view[pos : pos + plen])
            pos += plen
    if pos != end:
        raise TruncatedField(f"{kind.name}: {end - pos} stray bytes after fields")
    return Frame(kind, **fields), (end - offset)


class StreamDecoder:
    """Incremental decoder for a byte stream of concatenated frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        """Append bytes and return every frame completed by them."""
        self._buf += data
        frames: list[Frame] = []
        offset = 0
        while True:
            result = decode(self._buf, offset)
            if result is None:
                break
            frame, consumed = result
            frames.append(frame)
            offset += consumed
        if offset:
            del self._buf[:offset]
        return frames

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
