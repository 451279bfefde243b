"""In-memory TTL cache for what-if predictions, with single-flight misses."""

from __future__ import annotations

import asyncio
import hashlib
import heapq
import json
import time
from dataclasses import dataclass
from typing import Any, Awaitable, Callable, Generic, TypeVar

V = TypeVar("V")

DEFAULT_TTL = 3600.0
DEFAULT_MAX_ENTRIES = 100_000


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def what_if_key(user_id: int, hypothetical: Any) -> str:
    """Cache key for one user's hypothetical input; insensitive to key order and whitespace."""
    if isinstance(hypothetical, (str, bytes)):
        hypothetical = json.loads(hypothetical)
    digest = hashlib.sha256(canonical_json(hypothetical).encode()).hexdigest()
    return f"{user_id}:{digest}"


def _user_of(key: str) -> str:
    return key.split(":", 1)[0]


@dataclass
class CacheEntry(Generic[V]):
    key: str
    value: V
    expires_at: float


class TTLCache(Generic[V]):
    """``clock`` returns seconds; inject a fake one in tests."""

    def __init__(self, ttl: float = DEFAULT_TTL, max_entries: int = DEFAULT_MAX_ENTRIES,
                 clock: Callable[[], float] = time.monotonic):
        self.ttl = ttl
        self.max_entries = max_entries
        self.clock = clock
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self._entries: dict[str, CacheEntry[V]] = {}
        self._by_user: dict[str, set[str]] = {}
        self._expiry_heap: list[tuple[float, str]] = []
        self._inflight: dict[str, asyncio.Future[V]] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> V | None:
        e = self._entries.get(key)
        if e is None:
            return None
        if self.clock() >= e.expires_at:
            self._remove(key)
            return None
        return e.value

    def put(self, key: str, value: V, ttl: float | None = None) -> None:
        expires = self.clock() + (self.ttl if ttl is None else ttl)
        if key not in self._entries:
            while len(self._entries) >= self.max_entries:
                self._evict_one()
        self._entries[key] = CacheEntry(key, value, expires)
        self._by_user.setdefault(_user_of(key), set()).add(key)
        heapq.heappush(self._expiry_heap, (expires, key))
        if len(self._expiry_heap) > 2 * max(len(self._entries), 1024):
            self._expiry_heap = [(e.expires_at, k) for k, e in self._entries.items()]
            heapq.heapify(self._expiry_heap)

    async def get_or_compute(self, key: str, compute_fn: Callable[[], Awaitable[V]],
                             ttl: float | None = None) -> tuple[V, bool]:
        value = self.get(key)
        if value is not None:
            self.hits += 1
            return value, True
        pending = self._inflight.get(key)
        if pending is not None:
            # someone else is computing this key; share their result
            self.hits += 1
            return await asyncio.shield(pending), True
        self.misses += 1
        fut: asyncio.Future[V] = asyncio.get_running_loop().create_future()
        self._inflight[key] = fut
        try:
            value = await compute_fn()
        except asyncio.CancelledError:
            fut.cancel()
            raise
        except BaseException as exc:
            fut.set_exception(exc)
            fut.exception()  # mark retrieved when nobody else waits
            raise
        else:
            self.put(key, value, ttl)
            fut.set_result(value)
            return value, False
        finally:
            self._inflight.pop(key, None)

    def invalidate(self, user_id: int | str) -> int:
        keys = self._by_user.pop(str(user_id), set())
        n = 0
        for k in keys:
            if self._entries.pop(k, None) is not None:
                n += 1
        return n

    def _remove(self, key: str) -> None:
        if self._entries.pop(key, None) is not None:
            users = self._by_user.get(_user_of(key))
            if users is not None:
                users.discard(key)
                if not users:
                    del self._by_user[_user_of(key)]

    def _evict_one(self) -> None:
        while self._expiry_heap:
            expires, key = heapq.heappop(self._expiry_heap)
            e = self._entries.get(key)
            if e is not None and e.expires_at == expires:
                self._remove(key)
                self.evictions += 1
                return
        # heap exhausted but entries remain (should not happen); drop any
        key = next(iter(self._entries))
        self._remove(key)
        self.evictions += 1

    def stats(self) -> dict[str, int]:
        return {"entries": len(self._entries), "hits": self.hits, "misses": self.misses,
                "evictions": self.evictions}
