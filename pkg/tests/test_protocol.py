"""Wire protocol framing tests: byte layout, round trips, stream chunking."""

import numpy as np
import pytest

from ensda import protocol
from ensda.errors import ProtocolError
from ensda.protocol import (
    Assign,
    CycleDone,
    FrameDecoder,
    Heartbeat,
    HelloAck,
    RunnerGone,
    RunnerHello,
    StatePush,
    Stop,
    StudyDone,
    decode,
    encode,
)


def random_message(rng: np.random.Generator):
    kind = rng.integers(0, 9)
    if kind == 0:
        return RunnerHello(
            runner_id=int(rng.integers(0, 2**32)),
            part_index=int(rng.integers(0, 2**16)),
            parts=int(rng.integers(1, 2**16)),
            n_dynamic_local=int(rng.integers(0, 2**40)),
        )
    if kind == 1:
        shards = int(rng.integers(1, 5))
        return HelloAck(
            shards=shards,
            n_dynamic=int(rng.integers(0, 2**40)),
            n_assimilated=int(rng.integers(0, 2**40)),
            endpoints=tuple(
                (f"host-{i}.example", int(rng.integers(1, 2**16))) for i in range(shards)
            ),
        )
    if kind == 2:
        n = int(rng.integers(0, 32))
        return StatePush(
            member_id=int(rng.integers(0, 2**32)),
            cycle=int(rng.integers(0, 2**32)),
            part_index=int(rng.integers(0, 2**16)),
            range_offset=int(rng.integers(0, 2**40)),
            payload=rng.normal(size=n),
        )
    if kind == 3:
        n = int(rng.integers(0, 32))
        return Assign(
            member_id=int(rng.integers(0, 2**32)),
            cycle=int(rng.integers(0, 2**32)),
            nsteps=int(rng.integers(0, 2**32)),
            range_offset=int(rng.integers(0, 2**40)),
            payload=rng.normal(size=n),
        )
    if kind == 4:
        return Stop()
    if kind == 5:
        return Heartbeat(
            sender_id=int(rng.integers(0, 2**32)), timestamp_ms=int(rng.integers(0, 2**48))
        )
    if kind == 6:
        return RunnerGone(runner_id=int(rng.integers(0, 2**32)))
    if kind == 7:
        return CycleDone(cycle=int(rng.integers(0, 2**32)))
    return StudyDone()


class TestByteLayout:
    def test_stop_frame_bytes(self):
        assert encode(Stop()) == bytes([0x01, 0x00, 0x00, 0x00, protocol.TAG_STOP])

    def test_heartbeat_frame_length(self):
        frame = encode(Heartbeat(sender_id=7, timestamp_ms=0))
        # length prefix counts tag + u32 + u64 = 13 bytes
        assert frame[:4] == (13).to_bytes(4, "little")
        assert len(frame) == 4 + 13
        assert frame[4] == protocol.TAG_HEARTBEAT
        assert frame[5:9] == (7).to_bytes(4, "little")
        assert frame[9:17] == (0).to_bytes(8, "little")

    def test_state_push_payload_bytes(self):
        msg = StatePush(
            member_id=1, cycle=2, part_index=0, range_offset=4, payload=np.array([1.0, 2.0])
        )
        frame = encode(msg)
        body_len = int.from_bytes(frame[:4], "little")
        # tag + 3 x u32 + 2 x u64 + 16 payload bytes
        assert body_len == 1 + 12 + 16 + 16
        assert frame[-16:] == np.array([1.0, 2.0]).tobytes()

    def test_floats_little_endian_binary64(self):
        msg = Assign(member_id=0, cycle=0, nsteps=1, range_offset=0, payload=np.array([1.5]))
        assert encode(msg)[-8:] == bytes([0, 0, 0, 0, 0, 0, 0xF8, 0x3F])


class TestRoundTrip:
    def test_random_messages(self):
        rng = np.random.default_rng(2024)
        for _ in range(10_000):
            msg = random_message(rng)
            out, consumed = decode(encode(msg))
            assert consumed == len(encode(msg))
            assert out == msg

    def test_unknown_tag(self):
        frame = (1).to_bytes(4, "little") + bytes([0xFF])
        with pytest.raises(ProtocolError):
            decode(frame)

    def test_truncated_frame_needs_more(self):
        frame = (100).to_bytes(4, "little") + b"\x05" + b"x" * 49
        assert decode(frame) is None

    def test_short_length_prefix_needs_more(self):
        assert decode(b"\x01\x00") is None

    def test_payload_length_mismatch(self):
        msg = StatePush(
            member_id=1, cycle=1, part_index=0, range_offset=0, payload=np.array([1.0])
        )
        frame = bytearray(encode(msg))
        frame[0] -= 8  # shrink declared length: payload no longer matches range_len
        frame = bytes(frame[: 4 + int.from_bytes(frame[:4], "little")])
        with pytest.raises(ProtocolError):
            decode(frame)

    def test_empty_body_rejected(self):
        with pytest.raises(ProtocolError):
            decode((0).to_bytes(4, "little"))


class TestStreaming:
    def test_chunked_reassembly_any_boundaries(self):
        rng = np.random.default_rng(5)
        msgs = [random_message(rng) for _ in range(60)]
        stream = b"".join(encode(m) for m in msgs)
        for chunk_size in (1, 2, 3, 7, 64, 1024, len(stream)):
            decoder = FrameDecoder()
            got = []
            for i in range(0, len(stream), chunk_size):
                got.extend(decoder.feed(stream[i : i + chunk_size]))
            assert got == msgs
            assert decoder.pending_bytes == 0

    def test_oversize_body_rejected(self):
        frame = (protocol.MAX_BODY + 1).to_bytes(4, "little") + b"\x05"
        with pytest.raises(ProtocolError):
            decode(frame)
