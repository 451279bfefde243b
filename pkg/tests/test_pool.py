import asyncio

import pytest

from conftest import run
from shardline.store import ConnectionPool, PoolClosed, PoolTimeout


def test_blocks_then_succeeds_on_release():
    async def go():
        pool = ConnectionPool(max_connections=2, acquire_timeout=1.0)
        a = await pool.acquire()
        await pool.acquire()
        third = asyncio.ensure_future(pool.acquire())
        await asyncio.sleep(0.05)
        assert not third.done() and pool.waiting == 1
        pool.release(a)
        lease = await asyncio.wait_for(third, 1)
        assert pool.in_use == 2 and lease is not None
    run(go())


def test_timeout_when_held():
    async def go():
        pool = ConnectionPool(max_connections=2, acquire_timeout=0.1)
        await pool.acquire()
        await pool.acquire()
        with pytest.raises(PoolTimeout):
            await pool.acquire()
        assert pool.timeouts == 1 and pool.in_use == 2 and pool.waiting == 0
    run(go())


def test_fifo_grant_order():
    async def go():
        pool = ConnectionPool(max_connections=1, acquire_timeout=2.0)
        first = await pool.acquire()
        order = []

        async def waiter(i):
            async with pool.lease():
                order.append(i)
                await asyncio.sleep(0)

        tasks = []
        for i in range(10):
            tasks.append(asyncio.ensure_future(waiter(i)))
            await asyncio.sleep(0)
        pool.release(first)
        await asyncio.gather(*tasks)
        assert order == list(range(10))
    run(go())


def test_thousand_acquires_bounded_by_hundred():
    async def go():
        pool = ConnectionPool(max_connections=100, acquire_timeout=10.0)
        peak = 0

        async def op():
            nonlocal peak
            async with pool.lease():
                peak = max(peak, pool.in_use)
                await asyncio.sleep(0.001)

        await asyncio.gather(*(op() for _ in range(1000)))
        assert peak <= 100 and pool.high_water == 100
        assert pool.violations == 0 and pool.in_use == 0
    run(go())


def test_cancelled_waiter_does_not_leak_slot():
    async def go():
        pool = ConnectionPool(max_connections=1, acquire_timeout=5.0)
        held = await pool.acquire()
        w = asyncio.ensure_future(pool.acquire())
        await asyncio.sleep(0.01)
        w.cancel()
        await asyncio.gather(w, return_exceptions=True)
        pool.release(held)
        assert pool.in_use == 0
        async with pool.lease():
            assert pool.in_use == 1
    run(go())


def test_double_release_is_harmless_and_close_fails_waiters():
    async def go():
        pool = ConnectionPool(max_connections=1, acquire_timeout=5.0)
        lease = await pool.acquire()
        pool.release(lease)
        pool.release(lease)
        assert pool.in_use == 0
        await pool.acquire()
        w = asyncio.ensure_future(pool.acquire())
        await asyncio.sleep(0.01)
        pool.close()
        with pytest.raises(PoolClosed):
            await w
        with pytest.raises(PoolClosed):
            await pool.acquire()
    run(go())
