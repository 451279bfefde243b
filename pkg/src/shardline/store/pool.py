"""Bounded admission control in front of a shard, in the spirit of a
transaction-mode pooler: one lease per storage operation.

Waiters are served strictly first-come first-served. A released lease is handed
directly to the oldest waiter, so ``in_use`` never dips below the bound while
anyone is queued.
"""

from __future__ import annotations

import asyncio
import collections
from contextlib import asynccontextmanager
from dataclasses import dataclass
from typing import AsyncIterator

DEFAULT_MAX_CONNECTIONS = 100
# production value from the reference deployment, kept for documentation
REFERENCE_MAX_CONNECTIONS = 1000
DEFAULT_ACQUIRE_TIMEOUT = 5.0


class PoolTimeout(TimeoutError):
    pass


class PoolClosed(RuntimeError):
    pass


@dataclass
class Lease:
    pool: ConnectionPool
    number: int
    released: bool = False

    def release(self) -> None:
        self.pool.release(self)


class ConnectionPool:
    def __init__(self, shard_index: int = 0, max_connections: int = DEFAULT_MAX_CONNECTIONS,
                 acquire_timeout: float = DEFAULT_ACQUIRE_TIMEOUT):
        if max_connections < 1:
            raise ValueError("max_connections must be >= 1")
        self.shard_index = shard_index
        self.max_connections = max_connections
        self.acquire_timeout = acquire_timeout
        self.in_use = 0
        self.high_water = 0
        self.timeouts = 0
        self.granted = 0
        self.violations = 0
        self._waiters: collections.deque[asyncio.Future[None]] = collections.deque()
        self._closed = False

    @property
    def waiting(self) -> int:
        return sum(1 for w in self._waiters if not w.done())

    @property
    def closed(self) -> bool:
        return self._closed

    def _grant(self) -> Lease:
        self.granted += 1
        if self.in_use > self.high_water:
            self.high_water = self.in_use
        if self.in_use > self.max_connections:
            self.violations += 1
        return Lease(self, self.granted)

    async def acquire(self, timeout: float | None = None) -> Lease:
        if self._closed:
            raise PoolClosed(f"pool for shard {self.shard_index} is closed")
        if self.in_use < self.max_connections and not self._waiters:
            self.in_use += 1
            return self._grant()

        timeout = self.acquire_timeout if timeout is None else timeout
        fut: asyncio.Future[None] = asyncio.get_running_loop().create_future()
        self._waiters.append(fut)
        try:
            await asyncio.wait_for(asyncio.shield(fut), timeout)
        except asyncio.TimeoutError:
            if fut.done() and not fut.cancelled() and fut.exception() is None:
                # granted at the same instant the timer fired; keep it
                return self._grant()
            fut.cancel()
            self.timeouts += 1
            raise PoolTimeout(
                f"shard {self.shard_index}: no connection within {timeout * 1000:.0f} ms") from None
        except asyncio.CancelledError:
            if fut.done() and not fut.cancelled() and fut.exception() is None:
                self._hand_off()
            else:
                fut.cancel()
            raise
        finally:
            try:
                self._waiters.remove(fut)
            except ValueError:
                pass
        if fut.cancelled():
            raise PoolClosed(f"pool for shard {self.shard_index} is closed")
        exc = fut.exception()
        if exc is not None:
            raise exc
        return self._grant()

    def release(self, lease: Lease) -> None:
        if lease.released:
            return
        lease.released = True
        self._hand_off()

    def _hand_off(self) -> None:
        # the slot passes to the oldest live waiter, in_use unchanged
        while self._waiters:
            w = self._waiters.popleft()
            if not w.done():
                w.set_result(None)
                return
        self.in_use -= 1

    @asynccontextmanager
    async def lease(self, timeout: float | None = None) -> AsyncIterator[Lease]:
        lease = await self.acquire(timeout)
        try:
            yield lease
        finally:
            self.release(lease)

    def close(self) -> None:
        self._closed = True
        while self._waiters:
            w = self._waiters.popleft()
            if not w.done():
                w.set_exception(PoolClosed(f"pool for shard {self.shard_index} is closed"))

    def stats(self) -> dict[str, int]:
        return {
            "shard_index": self.shard_index,
            "max_connections": self.max_connections,
            "in_use": self.in_use,
            "waiting": self.waiting,
            "high_water": self.high_water,
            "timeouts": self.timeouts,
            "violations": self.violations,
        }
