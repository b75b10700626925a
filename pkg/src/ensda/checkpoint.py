"""Versioned binary snapshot of the ensemble: server checkpoint and final artifact.

Layout (little-endian, documented in docs/checkpoint.md):

    magic  8s   b"ENSDACKP"
    version u32
    config_hash 32s (sha256 of the semantic study keys)
    seed    u64
    cycle   u32
    n_dynamic u64
    n_assimilated u64
    member_count u32
    per member: member_id u32, restart_count u32, values f64[n_dynamic]
    sha256 digest of everything above (32 bytes)

Writes are atomic (temp file + rename), so a crash mid-write leaves the
previous checkpoint intact; the trailing digest refuses truncated or
corrupted files.
"""

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .partition import DynamicState

MAGIC = b"ENSDACKP"
VERSION = 1

_HEAD = struct.Struct("<8sI32sQIQQI")
_MEMBER_HEAD = struct.Struct("<II")


@dataclass
class EnsembleSnapshot:
    """Checkpoint payload: where the study is and every member's state."""

    cycle: int
    seed: int
    config_hash: bytes
    n_dynamic: int
    n_assimilated: int
    members: list  # DynamicState
    restart_counts: dict  # member_id -> int


def write_snapshot(snapshot: EnsembleSnapshot, path) -> None:
    """Atomically write a snapshot: temp file in the same dir, then rename."""
    path = Path(path)
    blob = bytearray()
    blob += _HEAD.pack(
        MAGIC,
        VERSION,
        snapshot.config_hash,
        snapshot.seed,
        snapshot.cycle,
        snapshot.n_dynamic,
        snapshot.n_assimilated,
        len(snapshot.members),
    )
    for member in sorted(snapshot.members, key=lambda m: m.member_id):
        blob += _MEMBER_HEAD.pack(
            member.member_id, snapshot.restart_counts.get(member.member_id, 0)
        )
        blob += np.ascontiguousarray(member.values, dtype="<f8").tobytes()
    blob += hashlib.sha256(blob).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_snapshot(path, expect_config_hash: bytes | None = None) -> EnsembleSnapshot:
    """Read and verify a snapshot; refuse corrupt or mismatched files."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _HEAD.size + 32:
        raise CheckpointError(f"checkpoint {path} is truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checkpoint {path} is corrupt (digest mismatch)")
    magic, version, config_hash, seed, cycle, n_dynamic, n_assimilated, count = _HEAD.unpack_from(
        body, 0
    )
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {VERSION}")
    if expect_config_hash is not None and config_hash != expect_config_hash:
        raise CheckpointError(
            f"checkpoint {path} belongs to a different study configuration; refusing to restore"
        )
    members = []
    restart_counts = {}
    offset = _HEAD.size
    record = _MEMBER_HEAD.size + 8 * n_dynamic
    if len(body) != _HEAD.size + count * record:
        raise CheckpointError(f"checkpoint {path} has inconsistent length")
    for _ in range(count):
        member_id, restarts = _MEMBER_HEAD.unpack_from(body, offset)
        values = np.frombuffer(
            body, dtype="<f8", count=n_dynamic, offset=offset + _MEMBER_HEAD.size
        ).copy()
        members.append(DynamicState(member_id=member_id, values=values))
        restart_counts[member_id] = restarts
        offset += record
    return EnsembleSnapshot(
        cycle=cycle,
        seed=seed,
        config_hash=config_hash,
        n_dynamic=n_dynamic,
        n_assimilated=n_assimilated,
        members=members,
        restart_counts=restart_counts,
    )
