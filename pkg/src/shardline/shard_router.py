"""Range-based placement of users onto shards.

Each shard owns a contiguous block of ``capacity_per_shard`` user ids, starting
at 1. A mapped id never moves; growth only appends new ranges.
"""

from __future__ import annotations

import bisect
import threading
from dataclasses import dataclass
from typing import Any, Sequence

DEFAULT_CAPACITY = 5000


class UnmappedId(LookupError):
    pass


class StoreUnavailable(RuntimeError):
    def __init__(self, shard_index: int, reason: str = "unreachable"):
        self.shard_index = shard_index
        super().__init__(f"shard {shard_index}: {reason}")


class InvalidShardMap(ValueError):
    def __init__(self, message: str, entry: int | None = None):
        self.entry = entry
        super().__init__(message)


@dataclass(frozen=True)
class ShardRange:
    lo: int
    hi: int
    shard_index: int


@dataclass(frozen=True)
class ShardMap:
    entries: tuple[ShardRange, ...]
    capacity_per_shard: int = DEFAULT_CAPACITY

    def __post_init__(self):
        if self.capacity_per_shard < 1:
            raise InvalidShardMap("capacity_per_shard must be >= 1")
        expected_lo = 1
        for i, e in enumerate(self.entries):
            if e.lo != expected_lo:
                kind = "overlaps" if e.lo < expected_lo else "leaves a gap before"
                raise InvalidShardMap(f"entry {i} ({e.lo}-{e.hi}) {kind} previous range", entry=i)
            if e.hi - e.lo + 1 != self.capacity_per_shard:
                raise InvalidShardMap(
                    f"entry {i} spans {e.hi - e.lo + 1} ids, expected {self.capacity_per_shard}", entry=i)
            if e.shard_index < 0:
                raise InvalidShardMap(f"entry {i} has negative shard index", entry=i)
            expected_lo = e.hi + 1
        object.__setattr__(self, "_los", tuple(e.lo for e in self.entries))

    @classmethod
    def uniform(cls, shards: int = 2, capacity: int = DEFAULT_CAPACITY) -> ShardMap:
        return cls(
            tuple(ShardRange(i * capacity + 1, (i + 1) * capacity, i) for i in range(shards)),
            capacity,
        )

    @property
    def shard_count(self) -> int:
        return len({e.shard_index for e in self.entries})

    @property
    def shard_indexes(self) -> list[int]:
        return sorted({e.shard_index for e in self.entries})

    @property
    def last_id(self) -> int:
        return self.entries[-1].hi if self.entries else 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "capacity_per_shard": self.capacity_per_shard,
            "entries": [[e.lo, e.hi, e.shard_index] for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ShardMap:
        entries = tuple(ShardRange(int(lo), int(hi), int(s)) for lo, hi, s in d["entries"])
        return cls(entries, int(d.get("capacity_per_shard", DEFAULT_CAPACITY)))


def route(user_id: int, shard_map: ShardMap) -> int:
    if user_id < 1:
        raise ValueError(f"user_id must be >= 1, got {user_id}")
    i = bisect.bisect_right(shard_map._los, user_id) - 1  # type: ignore[attr-defined]
    if i < 0 or user_id > shard_map.entries[i].hi:
        raise UnmappedId(user_id)
    return shard_map.entries[i].shard_index


def extend(shard_map: ShardMap) -> ShardMap:
    """Append one range, placed on a new shard index."""
    cap = shard_map.capacity_per_shard
    lo = shard_map.last_id + 1
    new_index = max((e.shard_index for e in shard_map.entries), default=-1) + 1
    return ShardMap(shard_map.entries + (ShardRange(lo, lo + cap - 1, new_index),), cap)


class ShardRouter:
    """Holds the live ShardMap; extension swaps in a new immutable map."""

    def __init__(self, shard_map: ShardMap, auto_extend: bool = False):
        self._map = shard_map
        self.auto_extend = auto_extend
        self._lock = threading.Lock()

    @property
    def map(self) -> ShardMap:
        return self._map

    def route(self, user_id: int) -> int:
        m = self._map
        try:
            return route(user_id, m)
        except UnmappedId:
            if not self.auto_extend:
                raise
        with self._lock:
            while user_id > self._map.last_id:
                self._map = extend(self._map)
            return route(user_id, self._map)

    def owns(self, shard_index: int, user_id: int) -> bool:
        return self.route(user_id) == shard_index


def shard_census(shard_map: ShardMap, stores: Sequence[Any] | dict[int, Any]) -> list[int]:
    """Count users physically resident on each shard of ``shard_map``.

    ``stores`` maps shard index to anything with a ``user_count()`` method.
    """
    counts = []
    for idx in shard_map.shard_indexes:
        try:
            store = stores[idx]
        except (KeyError, IndexError):
            raise StoreUnavailable(idx, "no store configured") from None
        try:
            counts.append(store.user_count())
        except OSError as exc:
            raise StoreUnavailable(idx, str(exc)) from exc
    return counts

