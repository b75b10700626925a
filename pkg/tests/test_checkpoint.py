"""Snapshot serializer tests: round trip, atomicity, refusal cases."""

import hashlib

import numpy as np
import pytest

from ensda.checkpoint import EnsembleSnapshot, read_snapshot, write_snapshot
from ensda.errors import CheckpointError
from ensda.partition import DynamicState


def snapshot(cycle=3, seed=42, config_hash=None, n=6):
    rng = np.random.default_rng(cycle)
    members = [DynamicState(member_id=i, values=rng.normal(size=n)) for i in range(4)]
    return EnsembleSnapshot(
        cycle=cycle,
        seed=seed,
        config_hash=config_hash or hashlib.sha256(b"cfg").digest(),
        n_dynamic=n,
        n_assimilated=n - 2,
        members=members,
        restart_counts={0: 1, 2: 3},
    )


def test_round_trip(tmp_path):
    path = tmp_path / "ckpt.bin"
    snap = snapshot()
    write_snapshot(snap, path)
    back = read_snapshot(path, snap.config_hash)
    assert back.cycle == snap.cycle
    assert back.seed == snap.seed
    assert back.n_dynamic == snap.n_dynamic
    assert back.n_assimilated == snap.n_assimilated
    assert back.restart_counts[0] == 1 and back.restart_counts[2] == 3
    for a, b in zip(snap.members, back.members):
        assert a.member_id == b.member_id
        assert np.array_equal(a.values, b.values)


def test_config_hash_mismatch_refused(tmp_path):
    path = tmp_path / "ckpt.bin"
    write_snapshot(snapshot(), path)
    with pytest.raises(CheckpointError, match="different study"):
        read_snapshot(path, hashlib.sha256(b"other cfg").digest())


def test_truncated_file_refused(tmp_path):
    path = tmp_path / "ckpt.bin"
    write_snapshot(snapshot(), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        read_snapshot(path)


def test_corrupted_byte_refused(tmp_path):
    path = tmp_path / "ckpt.bin"
    write_snapshot(snapshot(), path)
    data = bytearray(path.read_bytes())
    data[60] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="corrupt"):
        read_snapshot(path)


def test_wrong_magic_refused(tmp_path):
    path = tmp_path / "ckpt.bin"
    path.write_bytes(b"\x00" * 200)
    with pytest.raises(CheckpointError):
        read_snapshot(path)


def test_atomic_overwrite_keeps_previous_on_interrupted_tmp(tmp_path):
    # a leftover temp file must never shadow the real checkpoint
    path = tmp_path / "ckpt.bin"
    first = snapshot(cycle=1)
    write_snapshot(first, path)
    (tmp_path / "ckpt.bin.tmp").write_bytes(b"garbage from a crashed writer")
    back = read_snapshot(path, first.config_hash)
    assert back.cycle == 1


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        read_snapshot(tmp_path / "nope.bin")


def test_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    write_snapshot(snapshot(), a)
    write_snapshot(snapshot(), b)
    assert a.read_bytes() == b.read_bytes()
