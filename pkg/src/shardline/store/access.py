"""Pooled access to shards, in-process or over HTTP.

Both clients expose ``await shard.call(op, *args, **kwargs)`` where ``op`` is a
ShardStore method name. ``LocalShard`` takes a pool lease and runs the method
on a worker thread; ``RemoteShard`` posts the call to a shard server, which does
the same on its side of the wire (the pool lives next to the data, like a
pooler in front of a database).
"""

from __future__ import annotations

import asyncio
import concurrent.futures
import logging
from typing import Any

import aiohttp
from aiohttp import web

from ..domain import RECORD_TYPES, ValidationError
from ..shard_router import StoreUnavailable
from .engine import DuplicateKey, InvalidRange, NotFound, ShardStore, StoreError, WrongShard
from .pool import ConnectionPool, PoolClosed, PoolTimeout

log = logging.getLogger(__name__)

# read-only and mutating methods a client may invoke
ALLOWED_OPS = frozenset({
    "user_count", "next_user_id", "peek_user_id", "claim_email", "release_email",
    "create_user", "get_user", "find_user_by_email", "update_user", "delete_user", "set_code", "get_code",
    "create_profile", "get_profile", "update_profile", "delete_profile",
    "create_activity", "get_activity", "update_activity", "delete_activity",
    "list_activities", "count_activities", "latest_activities",
    "create_prediction", "get_prediction", "delete_prediction", "list_predictions",
    "get_predictions_by_date",
    "create_job", "get_job", "find_job", "mark_job_processing", "complete_job", "fail_job",
    "job_counts",
})

_ERRORS: dict[str, type[Exception]] = {
    cls.__name__: cls
    for cls in (NotFound, DuplicateKey, InvalidRange, WrongShard, StoreError, PoolTimeout,
                PoolClosed)
}


def to_wire(value: Any) -> Any:
    if hasattr(value, "to_dict") and type(value).__name__ in RECORD_TYPES:
        return {"__t": type(value).__name__, "v": value.to_dict()}
    if isinstance(value, (list, tuple)):
        return [to_wire(v) for v in value]
    if isinstance(value, dict):
        return {"__d": [[k, to_wire(v)] for k, v in value.items()]}
    return value


def from_wire(value: Any) -> Any:
    if isinstance(value, dict):
        if "__t" in value:
            return RECORD_TYPES[value["__t"]].from_dict(value["v"])
        if "__d" in value:
            return {k: from_wire(v) for k, v in value["__d"]}
        return value
    if isinstance(value, list):
        return [from_wire(v) for v in value]
    return value


class LocalShard:
    """``offload=False`` runs each op on the event loop while holding its lease.
    The store is in-memory, so that is cheaper than a thread hop, but leases
    then never overlap and the pool only bounds queueing, not parallelism."""

    def __init__(self, store: ShardStore, pool: ConnectionPool,
                 executor: concurrent.futures.Executor | None = None, *, offload: bool = True):
        self.store = store
        self.pool = pool
        self.shard_index = store.shard_index
        self._own_executor = offload and executor is None
        self._executor = executor
        if self._own_executor:
            self._executor = concurrent.futures.ThreadPoolExecutor(
                max_workers=min(pool.max_connections, 16),
                thread_name_prefix=f"shard{store.shard_index}")

    async def call(self, op: str, *args: Any, **kwargs: Any) -> Any:
        if op not in ALLOWED_OPS:
            raise AttributeError(op)
        fn = getattr(self.store, op)
        lease = await self.pool.acquire()
        try:
            if self._executor is None:
                return fn(*args, **kwargs)
            return await asyncio.get_running_loop().run_in_executor(
                self._executor, lambda: fn(*args, **kwargs))
        finally:
            self.pool.release(lease)

    def close(self) -> None:
        self.pool.close()
        if self._own_executor:
            self._executor.shutdown(wait=True)
        self.store.close()


class RemoteShard:
    def __init__(self, shard_index: int, base_url: str, session: aiohttp.ClientSession):
        self.shard_index = shard_index
        self.base_url = base_url.rstrip("/")
        self._session = session

    async def call(self, op: str, *args: Any, **kwargs: Any) -> Any:
        body = {"op": op, "args": to_wire(list(args)), "kwargs": to_wire(kwargs)}
        try:
            async with self._session.post(f"{self.base_url}/rpc", json=body) as resp:
                data = await resp.json()
        except (aiohttp.ClientError, asyncio.TimeoutError) as exc:
            raise StoreUnavailable(self.shard_index, str(exc) or type(exc).__name__) from exc
        if "error" in data:
            cls = _ERRORS.get(data["error"], StoreError)
            raise cls(data.get("message", ""))
        return from_wire(data["result"])

    def close(self) -> None:
        pass


def shard_app(shard: LocalShard) -> web.Application:
    """HTTP front for one shard: POST /rpc, GET /healthz, GET /stats."""

    async def rpc(request: web.Request) -> web.Response:
        body = await request.json()
        op = body.get("op")
        if op not in ALLOWED_OPS:
            return web.json_response({"error": "StoreError", "message": f"unknown op {op}"}, status=400)
        args = from_wire(body.get("args", []))
        kwargs = {k: v for k, v in (from_wire(body.get("kwargs", {})) or {}).items()}
        try:
            result = await shard.call(op, *args, **kwargs)
        except (StoreError, PoolTimeout, PoolClosed, ValidationError) as exc:
            status = 503 if isinstance(exc, (PoolTimeout, PoolClosed)) else 409
            return web.json_response({"error": type(exc).__name__, "message": str(exc)}, status=status)
        return web.json_response({"result": to_wire(result)})

    async def healthz(request: web.Request) -> web.Response:
        return web.json_response({"status": "ok", "shard": shard.shard_index})

    async def stats(request: web.Request) -> web.Response:
        return web.json_response({"pool": shard.pool.stats(), "users": shard.store.user_count(),
                                  "jobs": shard.store.job_counts()})

    app = web.Application(client_max_size=16 * 1024 * 1024)
    app.router.add_post("/rpc", rpc)
    app.router.add_get("/healthz", healthz)
    app.router.add_get("/stats", stats)
    return app
