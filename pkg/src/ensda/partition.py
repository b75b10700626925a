"""State layout and the block redistribution between runner parts and server shards.

A member's dynamic state is one contiguous float64 vector. The assimilated
sub-state is its prefix [0, n_assimilated). Runners split the vector into P
contiguous parts, the server into S contiguous shards; each (part, shard)
pair exchanges exactly the intersection of their ranges.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class Range:
    """Half-open index range [start, stop)."""

    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    def intersect(self, other: "Range") -> "Range":
        start = max(self.start, other.start)
        stop = min(self.stop, other.stop)
        return Range(start, max(start, stop))


@dataclass(frozen=True)
class StateLayout:
    """Lengths of the dynamic vector and of its assimilated prefix."""

    n_dynamic: int
    n_assimilated: int

    def __post_init__(self):
        if not (0 < self.n_assimilated <= self.n_dynamic):
            raise ConfigurationError(
                f"need 0 < n_assimilated <= n_dynamic, got ({self.n_dynamic}, {self.n_assimilated})"
            )


@dataclass
class DynamicState:
    """One member's dynamic vector plus its identity."""

    member_id: int
    values: np.ndarray

    def assimilated_view(self, layout: StateLayout) -> np.ndarray:
        return self.values[: layout.n_assimilated]


def make_layout(n_dynamic: int, n_assimilated: int) -> StateLayout:
    """Validate and build a state layout."""
    return StateLayout(n_dynamic=n_dynamic, n_assimilated=n_assimilated)


def block_decompose(total: int, parts: int) -> list[Range]:
    """Split [0, total) into ``parts`` contiguous ranges.

    Sizes differ by at most one and the first ``total % parts`` ranges are
    the larger ones. Trailing ranges may be empty when parts > total.
    """
    if parts < 1:
        raise ConfigurationError(f"parts must be >= 1, got {parts}")
    if total < 0:
        raise ConfigurationError(f"total must be >= 0, got {total}")
    base, extra = divmod(total, parts)
    ranges = []
    start = 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        ranges.append(Range(start, start + size))
        start += size
    return ranges


@dataclass(frozen=True)
class RedistributionMap:
    """Per-(part, shard) transfer ranges over the dynamic vector."""

    layout: StateLayout
    parts: int
    shards: int
    part_ranges: tuple
    shard_ranges: tuple

    def transfer(self, part: int, shard: int) -> Range:
        """Range exchanged between runner part and server shard (may be empty)."""
        return self.part_ranges[part].intersect(self.shard_ranges[shard])

    def part_transfers(self, part: int) -> list[tuple[int, Range]]:
        """Non-empty (shard, range) transfers for one runner part."""
        out = []
        for s in range(self.shards):
            r = self.transfer(part, s)
            if len(r):
                out.append((s, r))
        return out

    def shard_transfers(self, shard: int) -> list[tuple[int, Range]]:
        """Non-empty (part, range) transfers for one server shard."""
        out = []
        for p in range(self.parts):
            r = self.transfer(p, shard)
            if len(r):
                out.append((p, r))
        return out


def make_redistribution_map(layout: StateLayout, parts: int, shards: int) -> RedistributionMap:
    """Build the N x M transfer map from contiguous block decompositions."""
    if parts < 1 or shards < 1:
        raise ConfigurationError(f"parts and shards must be >= 1, got ({parts}, {shards})")
    return RedistributionMap(
        layout=layout,
        parts=parts,
        shards=shards,
        part_ranges=tuple(block_decompose(layout.n_dynamic, parts)),
        shard_ranges=tuple(block_decompose(layout.n_dynamic, shards)),
    )
