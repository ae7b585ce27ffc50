"""Binary request/response codec with streaming decode.

Request:  C5 | opcode u8 | key_len u16le | value_len u32le | key | value
Response: C6 | status u8 | value_len u32le | value

See docs/protocol.md for the full wire description.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

REQUEST_MAGIC = 0xC5
RESPONSE_MAGIC = 0xC6
REQUEST_HEADER = struct.Struct("<BBHI")
RESPONSE_HEADER = struct.Struct("<BBI")
REQUEST_HEADER_LEN = REQUEST_HEADER.size  # 8
RESPONSE_HEADER_LEN = RESPONSE_HEADER.size  # 6
MAX_KEY_LEN = 0xFFFF
DEFAULT_VALUE_CAP = 16 * 1024 * 1024


class Op(enum.IntEnum):
    GET = 0x01
    PUT = 0x02
    DELETE = 0x03
    PING = 0x04


class Status(enum.IntEnum):
    OK = 0x00
    NOT_FOUND = 0x01
    BAD_REQUEST = 0x02
    SERVER_ERROR = 0x03


_OPS = frozenset(int(o) for o in Op)
_STATUSES = frozenset(int(s) for s in Status)


class EncodeError(ValueError):
    pass


class ProtocolError(ValueError):
    """Malformed input on the wire; the connection must be closed."""


@dataclass(frozen=True)
class RequestFrame:
    op: Op
    key: bytes = b""
    value: bytes = b""

    def is_well_formed(self) -> bool:
        if self.op == Op.PING:
            return not self.key and not self.value
        if not self.key:
            return False
        if self.op in (Op.GET, Op.DELETE):
            return not self.value
        return True


@dataclass(frozen=True)
class ResponseFrame:
    status: Status
    value: bytes = b""


def encode_request(frame: RequestFrame, value_cap: int = DEFAULT_VALUE_CAP) -> bytes:
    if int(frame.op) not in _OPS:
        raise EncodeError(f"unknown opcode {frame.op!r}")
    if len(frame.key) > MAX_KEY_LEN:
        raise EncodeError("key longer than 65535 bytes")
    if len(frame.value) > value_cap:
        raise EncodeError("value exceeds cap")
    if not frame.is_well_formed():
        raise EncodeError(f"{Op(frame.op).name} frame violates key/value rules")
    return b"".join((
        REQUEST_HEADER.pack(REQUEST_MAGIC, frame.op, len(frame.key), len(frame.value)),
        frame.key,
        frame.value,
    ))


def encode_response(frame: ResponseFrame) -> bytes:
    if int(frame.status) not in _STATUSES:
        raise EncodeError(f"unknown status {frame.status!r}")
    if frame.value and frame.status != Status.OK:
        raise EncodeError("only OK responses carry a value")
    if len(frame.value) > 0xFFFFFFFF:
        raise EncodeError("value longer than 2**32-1 bytes")
    return RESPONSE_HEADER.pack(RESPONSE_MAGIC, frame.status, len(frame.value)) + frame.value


def response_bytes(status: int, value: bytes = b"") -> bytes:
    """Unchecked fast path used by the server."""
    return RESPONSE_HEADER.pack(RESPONSE_MAGIC, status, len(value)) + value


class DecodeBuffer:
    """Accumulates raw bytes for one connection.

    Consumed bytes are reclaimed lazily so that a burst of small frames
    costs one buffer compaction, not one per frame.
    """

    __slots__ = ("data", "pos", "value_cap")

    def __init__(self, value_cap: int = DEFAULT_VALUE_CAP):
        self.data = bytearray()
        self.pos = 0
        self.value_cap = value_cap

    def __len__(self):
        return len(self.data) - self.pos

    def _compact(self):
        if self.pos:
            if self.pos == len(self.data):
                self.data.clear()
            else:
                del self.data[:self.pos]
            self.pos = 0


def split_requests(buf: DecodeBuffer, new_bytes: bytes = b"") -> list[bytes]:
    """Validate headers and cut out every complete request frame.

    Only magic, opcode and length bounds are checked here; the raw frames
    are parsed later by :func:`parse_request` on whichever thread does the
    payload work. A trailing partial frame stays in ``buf``.
    """
    if new_bytes:
        buf.data += new_bytes
    data = buf.data
    pos = buf.pos
    end = len(data)
    cap = buf.value_cap
    out = []
    unpack = REQUEST_HEADER.unpack_from
    while end - pos >= REQUEST_HEADER_LEN:
        magic, op, klen, vlen = unpack(data, pos)
        if magic != REQUEST_MAGIC:
            buf.pos = pos
            raise ProtocolError(f"bad request magic 0x{magic:02x}")
        if op not in _OPS:
            buf.pos = pos
            raise ProtocolError(f"unknown opcode 0x{op:02x}")
        if vlen > cap:
            buf.pos = pos
            raise ProtocolError(f"value length {vlen} exceeds cap {cap}")
        stop = pos + REQUEST_HEADER_LEN + klen + vlen
        if stop > end:
            break
        out.append(bytes(data[pos:stop]))
        pos = stop
    buf.pos = pos
    buf._compact()
    return out


def parse_request(raw: bytes) -> tuple[int, bytes, bytes]:
    """Split one validated raw frame into ``(opcode, key, value)``."""
    op = raw[1]
    kend = REQUEST_HEADER_LEN + (raw[2] | raw[3] << 8)
    return op, raw[REQUEST_HEADER_LEN:kend], raw[kend:]


def decode_requests(buf: DecodeBuffer, new_bytes: bytes = b"") -> list[RequestFrame]:
    out = []
    for raw in split_requests(buf, new_bytes):
        op, key, value = parse_request(raw)
        out.append(RequestFrame(Op(op), key, value))
    return out


def decode_responses(buf: DecodeBuffer, new_bytes: bytes = b"") -> list[ResponseFrame]:
    if new_bytes:
        buf.data += new_bytes
    data = buf.data
    pos = buf.pos
    end = len(data)
    cap = buf.value_cap
    out = []
    while end - pos >= RESPONSE_HEADER_LEN:
        magic, status, vlen = RESPONSE_HEADER.unpack_from(data, pos)
        if magic != RESPONSE_MAGIC:
            buf.pos = pos
            raise ProtocolError(f"bad response magic 0x{magic:02x}")
        if status not in _STATUSES:
            buf.pos = pos
            raise ProtocolError(f"unknown status 0x{status:02x}")
        if vlen > cap:
            buf.pos = pos
            raise ProtocolError(f"value length {vlen} exceeds cap {cap}")
        if vlen and status != Status.OK:
            buf.pos = pos
            raise ProtocolError("non-OK response carries a value")
        stop = pos + RESPONSE_HEADER_LEN + vlen
        if stop > end:
            break
        out.append(ResponseFrame(Status(status), bytes(data[pos + RESPONSE_HEADER_LEN:stop])))
        pos = stop
    buf.pos = pos
    buf._compact()
    return out
