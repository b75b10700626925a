"""Binary wire protocol between launcher, server shards, and runner parts.

Framing: every message is a 4-byte little-endian unsigned body length
followed by the body; the body is a 1-byte tag followed by fixed-width
little-endian fields (u32 ids/indices/cycles, u64 offsets/lengths/
timestamps) and, for state transfers, an IEEE-754 binary64 payload.
The byte layout is normative and documented in docs/protocol.md; the
secondary-language client implements exactly the same bytes.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError

TAG_RUNNER_HELLO = 1
TAG_HELLO_ACK = 2
TAG_STATE_PUSH = 3
TAG_ASSIGN = 4
TAG_STOP = 5
TAG_HEARTBEAT = 6
TAG_RUNNER_GONE = 7
TAG_CYCLE_DONE = 8
TAG_STUDY_DONE = 9

# member_id / cycle value used by registration pushes that carry no member.
NO_MEMBER = 0xFFFFFFFF

MAX_BODY = 2**31

_U32 = struct.Struct("<I")
_HELLO = struct.Struct("<IIIQ")
_PUSH_HEAD = struct.Struct("<IIIQQ")
_ASSIGN_HEAD = struct.Struct("<IIIQQ")
_HEARTBEAT = struct.Struct("<IQ")


@dataclass(frozen=True)
class RunnerHello:
    runner_id: int
    part_index: int
    parts: int
    n_dynamic_local: int


@dataclass(frozen=True)
class HelloAck:
    shards: int
    n_dynamic: int
    n_assimilated: int
    endpoints: tuple  # ((host, port), ...) one per shard


@dataclass(frozen=True)
class StatePush:
    member_id: int
    cycle: int
    part_index: int
    range_offset: int
    payload: np.ndarray = field(compare=False)

    def __eq__(self, other):
        return (
            isinstance(other, StatePush)
            and (self.member_id, self.cycle, self.part_index, self.range_offset)
            == (other.member_id, other.cycle, other.part_index, other.range_offset)
            and np.array_equal(self.payload, other.payload)
        )


@dataclass(frozen=True)
class Assign:
    member_id: int
    cycle: int
    nsteps: int
    range_offset: int
    payload: np.ndarray = field(compare=False)

    def __eq__(self, other):
        return (
            isinstance(other, Assign)
            and (self.member_id, self.cycle, self.nsteps, self.range_offset)
            == (other.member_id, other.cycle, other.nsteps, other.range_offset)
            and np.array_equal(self.payload, other.payload)
        )


@dataclass(frozen=True)
class Stop:
    pass


@dataclass(frozen=True)
class Heartbeat:
    sender_id: int
    timestamp_ms: int


@dataclass(frozen=True)
class RunnerGone:
    runner_id: int


@dataclass(frozen=True)
class CycleDone:
    cycle: int


@dataclass(frozen=True)
class StudyDone:
    pass


def _payload_bytes(values: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(values, dtype="<f8")
    return arr.tobytes()


def encode(msg) -> bytes:
    """Serialize a message into one length-prefixed frame."""
    if isinstance(msg, RunnerHello):
        body = bytes([TAG_RUNNER_HELLO]) + _HELLO.pack(
            msg.runner_id, msg.part_index, msg.parts, msg.n_dynamic_local
        )
    elif isinstance(msg, HelloAck):
        parts = [
            bytes([TAG_HELLO_ACK]),
            struct.pack("<IQQ", msg.shards, msg.n_dynamic, msg.n_assimilated),
        ]
        if len(msg.endpoints) != msg.shards:
            raise ProtocolError("HELLO_ACK endpoint count must equal shard count")
        for host, port in msg.endpoints:
            raw = host.encode("utf-8")
            parts.append(_U32.pack(len(raw)) + raw + _U32.pack(port))
        body = b"".join(parts)
    elif isinstance(msg, StatePush):
        pay = _payload_bytes(msg.payload)
        body = (
            bytes([TAG_STATE_PUSH])
            + _PUSH_HEAD.pack(
                msg.member_id, msg.cycle, msg.part_index, msg.range_offset, len(pay) // 8
            )
            + pay
        )
    elif isinstance(msg, Assign):
        pay = _payload_bytes(msg.payload)
        body = (
            bytes([TAG_ASSIGN])
            + _ASSIGN_HEAD.pack(
                msg.member_id, msg.cycle, msg.nsteps, msg.range_offset, len(pay) // 8
            )
            + pay
        )
    elif isinstance(msg, Stop):
        body = bytes([TAG_STOP])
    elif isinstance(msg, Heartbeat):
        body = bytes([TAG_HEARTBEAT]) + _HEARTBEAT.pack(msg.sender_id, msg.timestamp_ms)
    elif isinstance(msg, RunnerGone):
        body = bytes([TAG_RUNNER_GONE]) + _U32.pack(msg.runner_id)
    elif isinstance(msg, CycleDone):
        body = bytes([TAG_CYCLE_DONE]) + _U32.pack(msg.cycle)
    elif isinstance(msg, StudyDone):
        body = bytes([TAG_STUDY_DONE])
    else:
        raise ProtocolError(f"cannot encode object of type {type(msg).__name__}")
    if len(body) > MAX_BODY:
        raise ProtocolError(f"message body of {len(body)} bytes exceeds limit")
    return _U32.pack(len(body)) + body


def _need(body: bytes, offset: int, size: int):
    if offset + size > len(body):
        raise ProtocolError("message body shorter than its fields")
    return offset + size


def _decode_body(body: bytes):
    tag = body[0]
    if tag == TAG_RUNNER_HELLO:
        if len(body) != 1 + _HELLO.size:
            raise ProtocolError("bad RUNNER_HELLO length")
        return RunnerHello(*_HELLO.unpack_from(body, 1))
    if tag == TAG_HELLO_ACK:
        off = _need(body, 1, 20)
        shards, n_dynamic, n_assimilated = struct.unpack_from("<IQQ", body, 1)
        endpoints = []
        for _ in range(shards):
            end = _need(body, off, 4)
            (hlen,) = _U32.unpack_from(body, off)
            off = _need(body, end, hlen + 4)
            host = body[end : end + hlen].decode("utf-8")
            (port,) = _U32.unpack_from(body, end + hlen)
            endpoints.append((host, port))
        if off != len(body):
            raise ProtocolError("trailing bytes in HELLO_ACK")
        return HelloAck(shards, n_dynamic, n_assimilated, tuple(endpoints))
    if tag in (TAG_STATE_PUSH, TAG_ASSIGN):
        head = _PUSH_HEAD
        if len(body) < 1 + head.size:
            raise ProtocolError("truncated state message header")
        a, b, c, offset, range_len = head.unpack_from(body, 1)
        expect = 1 + head.size + 8 * range_len
        if len(body) != expect:
            raise ProtocolError(
                f"payload length mismatch: declared {range_len} values, body has {len(body) - 1 - head.size} bytes"
            )
        payload = np.frombuffer(body, dtype="<f8", count=range_len, offset=1 + head.size)
        if tag == TAG_STATE_PUSH:
            return StatePush(a, b, c, offset, payload)
        return Assign(a, b, c, offset, payload)
    if tag == TAG_STOP:
        if len(body) != 1:
            raise ProtocolError("STOP carries no fields")
        return Stop()
    if tag == TAG_HEARTBEAT:
        if len(body) != 1 + _HEARTBEAT.size:
            raise ProtocolError("bad HEARTBEAT length")
        return Heartbeat(*_HEARTBEAT.unpack_from(body, 1))
    if tag == TAG_RUNNER_GONE:
        if len(body) != 5:
            raise ProtocolError("bad RUNNER_GONE length")
        return RunnerGone(_U32.unpack_from(body, 1)[0])
    if tag == TAG_CYCLE_DONE:
        if len(body) != 5:
            raise ProtocolError("bad CYCLE_DONE length")
        return CycleDone(_U32.unpack_from(body, 1)[0])
    if tag == TAG_STUDY_DONE:
        if len(body) != 1:
            raise ProtocolError("STUDY_DONE carries no fields")
        return StudyDone()
    raise ProtocolError(f"unknown message tag {tag:#04x}")


def decode(data: bytes, offset: int = 0):
    """Decode one frame starting at ``offset``.

    Returns (message, bytes_consumed), or None when the buffer does not yet
    hold a complete frame.
    """
    avail = len(data) - offset
    if avail < 4:
        return None
    (length,) = _U32.unpack_from(data, offset)
    if length > MAX_BODY:
        raise ProtocolError(f"declared body length {length} exceeds limit")
    if length < 1:
        raise ProtocolError("frame body must contain at least the tag byte")
    if avail < 4 + length:
        return None
    body = bytes(data[offset + 4 : offset + 4 + length])
    return _decode_body(body), 4 + length


class FrameDecoder:
    """Incremental decoder over an arbitrary chunking of the byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        """Append bytes and return every message completed by them."""
        self._buf.extend(data)
        out = []
        pos = 0
        while True:
            got = decode(self._buf, pos)
            if got is None:
                break
            msg, consumed = got
            out.append(msg)
            pos += consumed
        if pos:
            del self._buf[:pos]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
