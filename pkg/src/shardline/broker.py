"""Durable acknowledgement-based queues and the correlation-id RPC built on them.

Every queue has its own append-only log ``<dir>/<queue>.log`` of JSON lines:

    {"e": "pub",  "s": seq, "c": correlation_id, "p": base64 payload, "t": enqueued_at, "d": delivery_count}
    {"e": "ret",  "s": seq}     returned to pending (delivery_count + 1)
    {"e": "ack",  "s": seq}     acknowledged, gone
    {"e": "dead", "s": seq}     moved to the dead-letter queue
    {"e": "base", "published": n, "acked": n, "dead": n, "next_seq": n}   written by compaction

A publish is logged before it is confirmed. On restart, pending and unacked
messages come back as pending, in sequence order. Deliveries are at-least-once;
consumers make their effects idempotent.
"""

from __future__ import annotations

import asyncio
import base64
import collections
import errno
import itertools
import json
import logging
import os
import time
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Awaitable, Callable

import aiohttp
from aiohttp import web

from .domain import new_correlation_id, now_ms

log = logging.getLogger(__name__)

REQUEST_QUEUE = "ml.prediction.request"
RESPONSE_QUEUE = "ml.prediction.hybrid_response"
DEAD_LETTER_QUEUE = "ml.prediction.dlq"
PREDICTION_QUEUES = (REQUEST_QUEUE, RESPONSE_QUEUE, DEAD_LETTER_QUEUE)

DEFAULT_VISIBILITY_TIMEOUT = 30.0
DEFAULT_MAX_DELIVERIES = 5


class BrokerError(Exception):
    pass


class UnknownQueue(BrokerError, LookupError):
    pass


class StorageFull(BrokerError):
    pass


class BrokerUnavailable(BrokerError):
    pass


@dataclass(frozen=True)
class Envelope:
    correlation_id: str
    queue: str
    payload: bytes
    enqueued_at: int = 0
    delivery_count: int = 0

    def __post_init__(self):
        if not self.correlation_id:
            raise ValueError("correlation_id must be non-empty")

    def json(self) -> Any:
        return json.loads(self.payload)

    def to_dict(self) -> dict[str, Any]:
        return {
            "correlation_id": self.correlation_id,
            "queue": self.queue,
            "payload": base64.b64encode(self.payload).decode(),
            "enqueued_at": self.enqueued_at,
            "delivery_count": self.delivery_count,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Envelope:
        return cls(d["correlation_id"], d["queue"], base64.b64decode(d["payload"]),
                   int(d.get("enqueued_at", 0)), int(d.get("delivery_count", 0)))


def envelope_for(correlation_id: str, queue: str, body: Any) -> Envelope:
    payload = json.dumps(body, separators=(",", ":")).encode()
    return Envelope(correlation_id, queue, payload)


@dataclass
class Delivery:
    envelope: Envelope
    tag: str
    consumer: str
    deadline: float
    seq: int


class Queue:
    def __init__(self, name: str, path: Path | None, fsync: bool = False, read_only: bool = False):
        self.name = name
        self.read_only = read_only
        self.durable = path is not None
        self.path = path
        self.fsync = fsync
        self.pending: collections.deque[tuple[int, Envelope]] = collections.deque()
        self.unacked: dict[str, Delivery] = {}
        self.published = 0
        self.acked = 0
        self.dead = 0
        self.next_seq = 1
        self._garbage = 0
        self._fd = -1
        self._waiters: collections.deque[asyncio.Future[None]] = collections.deque()
        if path is not None:
            self._replay()
        if path is not None and not read_only:
            self._fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    # -- log --------------------------------------------------------------

    def _replay(self) -> None:
        assert self.path is not None
        live: dict[int, Envelope] = {}
        good = 0
        if self.path.exists():
            with open(self.path, "rb") as fh:
                for raw in fh:
                    if not raw.endswith(b"\n"):
                        break
                    try:
                        ev = json.loads(raw)
                    except ValueError:
                        break
                    good += len(raw)
                    kind = ev["e"]
                    if kind == "base":
                        self.published, self.acked, self.dead = ev["published"], ev["acked"], ev["dead"]
                        self.next_seq = max(self.next_seq, ev["next_seq"])
                    elif kind == "pub":
                        live[ev["s"]] = Envelope(ev["c"], self.name, base64.b64decode(ev["p"]),
                                                 ev["t"], ev.get("d", 0))
                        self.published += 1
                        self.next_seq = max(self.next_seq, ev["s"] + 1)
                    elif kind == "ret":
                        env = live.get(ev["s"])
                        if env is not None:
                            live[ev["s"]] = replace(env, delivery_count=env.delivery_count + 1)
                    elif kind in ("ack", "dead"):
                        if live.pop(ev["s"], None) is not None:
                            if kind == "ack":
                                self.acked += 1
                            else:
                                self.dead += 1
                        self._garbage += 1
            if good != self.path.stat().st_size and not self.read_only:
                os.truncate(self.path, good)
        self.pending.extend(sorted(live.items()))

    def _write(self, event: dict[str, Any]) -> None:
        if self.read_only:
            raise BrokerError(f"queue {self.name} is open read-only")
        if self._fd < 0:
            return
        line = json.dumps(event, separators=(",", ":")).encode() + b"\n"
        try:
            os.write(self._fd, line)
            if self.fsync:
                os.fsync(self._fd)
        except OSError as exc:
            if exc.errno in (errno.ENOSPC, errno.EDQUOT):
                raise StorageFull(str(exc)) from exc
            raise

    def compact(self) -> None:
        """Rewrite the log with only live messages."""
        if self.path is None:
            return
        live = sorted([(d.seq, d.envelope) for d in self.unacked.values()] + list(self.pending))
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            base = {"e": "base", "published": self.published - len(live), "acked": self.acked,
                    "dead": self.dead, "next_seq": self.next_seq}
            fh.write(json.dumps(base).encode() + b"\n")
            for seq, env in live:
                fh.write(json.dumps(self._pub_event(seq, env), separators=(",", ":")).encode() + b"\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)
        os.close(self._fd)
        self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND)
        self._garbage = 0

    @staticmethod
    def _pub_event(seq: int, env: Envelope) -> dict[str, Any]:
        return {"e": "pub", "s": seq, "c": env.correlation_id,
                "p": base64.b64encode(env.payload).decode(), "t": env.enqueued_at,
                "d": env.delivery_count}

    # -- state transitions -----------------------------------------------

    def put(self, env: Envelope) -> int:
        seq = self.next_seq
        self._write(self._pub_event(seq, env))
        self.next_seq += 1
        self.published += 1
        self.pending.append((seq, env))
        self._wake()
        return seq

    def take(self, consumer: str, n: int, deadline: float) -> list[Delivery]:
        out = []
        while self.pending and len(out) < n:
            seq, env = self.pending.popleft()
            d = Delivery(env, f"{seq}.{env.delivery_count}", consumer, deadline, seq)
            self.unacked[d.tag] = d
            out.append(d)
        return out

    def ack(self, tag: str) -> bool:
        d = self.unacked.pop(tag, None)
        if d is None:
            return False
        self._write({"e": "ack", "s": d.seq})
        self.acked += 1
        self._garbage += 1
        return True

    def give_back(self, tag: str) -> Delivery | None:
        """Remove from unacked and bump the delivery count; caller decides where it goes."""
        d = self.unacked.pop(tag, None)
        if d is None:
            return None
        d.envelope = replace(d.envelope, delivery_count=d.envelope.delivery_count + 1)
        return d

    def requeue(self, d: Delivery) -> None:
        self._write({"e": "ret", "s": d.seq})
        self.pending.appendleft((d.seq, d.envelope))
        self._wake()

    def bury(self, d: Delivery) -> None:
        self._write({"e": "dead", "s": d.seq})
        self.dead += 1
        self._garbage += 1

    def _wake(self) -> None:
        while self._waiters:
            w = self._waiters.popleft()
            if not w.done():
                w.set_result(None)
                return

    async def wait_nonempty(self, timeout: float) -> None:
        fut = asyncio.get_running_loop().create_future()
        self._waiters.append(fut)
        try:
            await asyncio.wait_for(fut, timeout)
        except asyncio.TimeoutError:
            pass
        finally:
            if not fut.done():
                fut.cancel()

    def depth(self) -> dict[str, int]:
        return {
            "pending": len(self.pending),
            "unacked": len(self.unacked),
            "published": self.published,
            "acked": self.acked,
            "dead_lettered": self.dead,
        }

    def close(self) -> None:
        for w in self._waiters:
            if not w.done():
                w.cancel()
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


class Broker:
    """In-process broker. All methods run on the event loop thread."""

    def __init__(self, directory: str | os.PathLike[str] | None, *,
                 visibility_timeout: float = DEFAULT_VISIBILITY_TIMEOUT,
                 max_deliveries: int = DEFAULT_MAX_DELIVERIES,
                 dead_letter_queue: str | None = DEAD_LETTER_QUEUE,
                 fsync: bool = False, clock: Callable[[], float] = time.monotonic,
                 compact_after: int = 20_000, read_only: bool = False):
        self.directory = Path(directory) if directory is not None else None
        self.read_only = read_only
        if self.directory is not None and not read_only:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.visibility_timeout = visibility_timeout
        self.max_deliveries = max_deliveries
        self.dead_letter_queue = dead_letter_queue
        self.fsync = fsync
        self.clock = clock
        self.compact_after = compact_after
        self.queues: dict[str, Queue] = {}
        self._sweeper: asyncio.Task | None = None

    def declare(self, name: str, durable: bool = True) -> Queue:
        q = self.queues.get(name)
        if q is None:
            path = self.directory / f"{name}.log" if durable and self.directory is not None else None
            q = Queue(name, path, self.fsync, self.read_only)
            self.queues[name] = q
        return q

    def declare_prediction_queues(self) -> None:
        for name in PREDICTION_QUEUES:
            self.declare(name)

    def _queue(self, name: str) -> Queue:
        try:
            return self.queues[name]
        except KeyError:
            raise UnknownQueue(name) from None

    async def publish(self, queue: str, envelope: Envelope) -> int:
        q = self._queue(queue)
        if envelope.queue != queue or not envelope.enqueued_at:
            envelope = replace(envelope, queue=queue, enqueued_at=envelope.enqueued_at or now_ms())
        return q.put(envelope)

    async def receive(self, queue: str, consumer: str, max_messages: int = 1,
                      wait: float = 0.0) -> list[Delivery]:
        q = self._queue(queue)
        self.expire()
        end = self.clock() + wait
        while True:
            got = q.take(consumer, max_messages, self.clock() + self.visibility_timeout)
            remaining = end - self.clock()
            if got or remaining <= 0:
                return got
            await q.wait_nonempty(min(remaining, 1.0))
            self.expire()

    async def ack(self, queue: str, tag: str) -> bool:
        q = self._queue(queue)
        ok = q.ack(tag)
        if q._garbage >= self.compact_after and q._garbage > 2 * (len(q.pending) + len(q.unacked)):
            q.compact()
        return ok

    async def nack(self, queue: str, tag: str, requeue: bool = True) -> bool:
        q = self._queue(queue)
        d = q.give_back(tag)
        if d is None:
            return False
        self._return(q, d, requeue)
        return True

    def _return(self, q: Queue, d: Delivery, requeue: bool) -> None:
        exhausted = d.envelope.delivery_count >= self.max_deliveries
        if requeue and not exhausted:
            q.requeue(d)
            return
        if self.dead_letter_queue and q.name != self.dead_letter_queue \
                and self.dead_letter_queue in self.queues:
            self.queues[self.dead_letter_queue].put(d.envelope)
        q.bury(d)

    def expire(self, now: float | None = None) -> int:
        """Return every delivery past its visibility deadline to pending."""
        now = self.clock() if now is None else now
        n = 0
        for q in self.queues.values():
            late = [tag for tag, d in q.unacked.items() if d.deadline <= now]
            for tag in late:
                d = q.give_back(tag)
                if d is not None:
                    self._return(q, d, requeue=True)
                    n += 1
        return n

    def depths(self) -> dict[str, dict[str, int]]:
        return {name: q.depth() for name, q in sorted(self.queues.items())}

    async def start(self, interval: float | None = None) -> None:
        if self._sweeper is None:
            interval = interval or min(1.0, self.visibility_timeout / 4)
            self._sweeper = asyncio.create_task(self._sweep(interval))

    async def _sweep(self, interval: float) -> None:
        while True:
            await asyncio.sleep(interval)
            try:
                self.expire()
            except Exception:
                log.exception("deadline sweep failed")

    async def close(self) -> None:
        if self._sweeper is not None:
            self._sweeper.cancel()
            try:
                await self._sweeper
            except asyncio.CancelledError:
                pass
            self._sweeper = None
        for q in self.queues.values():
            q.close()

    def consume(self, queue: str, handler: Callable[[Envelope], Awaitable[None]], *,
                consumer: str | None = None, concurrency: int = 1) -> Subscription:
        self._queue(queue)
        return Subscription(self, queue, handler, consumer or f"c-{uuid.uuid4().hex[:8]}", concurrency)


class RemoteBroker:
    """Same surface as Broker, spoken over HTTP to a broker server."""

    def __init__(self, base_url: str, session: aiohttp.ClientSession):
        self.base_url = base_url.rstrip("/")
        self._session = session

    async def _post(self, path: str, body: dict[str, Any], timeout: float = 10.0) -> Any:
        try:
            async with self._session.post(f"{self.base_url}{path}", json=body,
                                          timeout=aiohttp.ClientTimeout(total=timeout)) as resp:
                data = await resp.json()
        except (aiohttp.ClientError, asyncio.TimeoutError) as exc:
            raise BrokerUnavailable(str(exc) or type(exc).__name__) from exc
        if "error" in data:
            raise {"UnknownQueue": UnknownQueue, "StorageFull": StorageFull}.get(
                data["error"], BrokerError)(data.get("message", ""))
        return data

    async def publish(self, queue: str, envelope: Envelope) -> int:
        data = await self._post(f"/queues/{queue}/publish", envelope.to_dict())
        return data["seq"]

    async def receive(self, queue: str, consumer: str, max_messages: int = 1,
                      wait: float = 0.0) -> list[Delivery]:
        data = await self._post(f"/queues/{queue}/receive",
                                {"consumer": consumer, "max": max_messages, "wait_ms": int(wait * 1000)},
                                timeout=wait + 10.0)
        return [Delivery(Envelope.from_dict(d["envelope"]), d["tag"], consumer, 0.0, d["seq"])
                for d in data["deliveries"]]

    async def ack(self, queue: str, tag: str) -> bool:
        return (await self._post(f"/queues/{queue}/ack", {"tag": tag}))["ok"]

    async def nack(self, queue: str, tag: str, requeue: bool = True) -> bool:
        return (await self._post(f"/queues/{queue}/nack", {"tag": tag, "requeue": requeue}))["ok"]

    async def depths(self) -> dict[str, dict[str, int]]:
        async with self._session.get(f"{self.base_url}/queues") as resp:
            return await resp.json()

    def consume(self, queue: str, handler: Callable[[Envelope], Awaitable[None]], *,
                consumer: str | None = None, concurrency: int = 1) -> Subscription:
        return Subscription(self, queue, handler, consumer or f"c-{uuid.uuid4().hex[:8]}", concurrency)


class Subscription:
    """Pulls deliveries and runs ``handler`` with bounded concurrency.

    A handler that returns acks its message; one that raises nacks it (requeue).
    ``stop(graceful=False)`` abandons in-flight messages without acking, the
    same as a crashed consumer: they come back after the visibility deadline.
    """

    def __init__(self, broker: Broker | RemoteBroker, queue: str,
                 handler: Callable[[Envelope], Awaitable[None]], consumer: str, concurrency: int):
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self.broker = broker
        self.queue = queue
        self.handler = handler
        self.consumer = consumer
        self.concurrency = concurrency
        self.handled = 0
        self.failed = 0
        self._inflight: set[asyncio.Task] = set()
        self._slots = asyncio.Semaphore(concurrency)
        self._task = asyncio.create_task(self._run())

    async def _run(self) -> None:
        backoff = 0.05
        while True:
            await self._slots.acquire()
            try:
                free = self.concurrency - len(self._inflight)
                deliveries = await self.broker.receive(self.queue, self.consumer, max(1, free), wait=1.0)
            except BrokerError:
                self._slots.release()
                log.warning("%s: broker unavailable, retrying", self.consumer)
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, 2.0)
                continue
            except BaseException:
                self._slots.release()
                raise
            backoff = 0.05
            if not deliveries:
                self._slots.release()
                continue
            for i, d in enumerate(deliveries):
                if i > 0:
                    await self._slots.acquire()
                t = asyncio.create_task(self._handle(d))
                self._inflight.add(t)
                t.add_done_callback(self._inflight.discard)

    async def _handle(self, d: Delivery) -> None:
        try:
            try:
                await self.handler(d.envelope)
            except asyncio.CancelledError:
                raise
            except Exception:
                self.failed += 1
                log.exception("%s: handler failed for %s", self.consumer, d.envelope.correlation_id)
                await self._settle(self.broker.nack, d)
            else:
                self.handled += 1
                await self._settle(self.broker.ack, d)
        finally:
            self._slots.release()

    async def _settle(self, fn, d: Delivery) -> None:
        for attempt in itertools.count():
            try:
                await fn(self.queue, d.tag)
                return
            except BrokerUnavailable:
                if attempt >= 5:
                    return  # the deadline will return it
                await asyncio.sleep(0.1 * (attempt + 1))

    async def stop(self, graceful: bool = True) -> None:
        self._task.cancel()
        try:
            await self._task
        except asyncio.CancelledError:
            pass
        if graceful:
            if self._inflight:
                await asyncio.gather(*self._inflight, return_exceptions=True)
        else:
            for t in list(self._inflight):
                t.cancel()
            await asyncio.gather(*self._inflight, return_exceptions=True)


async def request_response(broker: Broker | RemoteBroker, request_payload: dict[str, Any],
                           user_id: int, correlation_id: str | None = None) -> str:
    """Publish a prediction request; the reply carries the same correlation id."""
    cid = correlation_id or new_correlation_id()
    body = dict(request_payload, correlation_id=cid, user_id=user_id)
    await broker.publish(REQUEST_QUEUE, envelope_for(cid, REQUEST_QUEUE, body))
    return cid


class ResponseRouter:
    """Matches replies to jobs strictly by correlation id.

    Replies are ``{"kind": "processing" | "result", ...}`` on the response
    queue; requests that exhaust their deliveries arrive on the dead-letter
    queue and fail their job. Callbacks must be idempotent.
    """

    def __init__(self, broker: Broker | RemoteBroker, *,
                 on_processing: Callable[[int, str], Awaitable[None]],
                 on_result: Callable[[int, str, dict[str, Any]], Awaitable[None]],
                 on_failed: Callable[[int, str, str], Awaitable[None]],
                 concurrency: int = 16, consumer: str | None = None):
        self.broker = broker
        self.on_processing = on_processing
        self.on_result = on_result
        self.on_failed = on_failed
        self.concurrency = concurrency
        self.consumer = consumer or f"responses-{uuid.uuid4().hex[:6]}"
        self._subs: list[Subscription] = []

    def start(self) -> None:
        self._subs = [
            self.broker.consume(RESPONSE_QUEUE, self._response, consumer=self.consumer,
                                concurrency=self.concurrency),
            self.broker.consume(DEAD_LETTER_QUEUE, self._dead, consumer=self.consumer + "-dlq",
                                concurrency=2),
        ]

    async def _response(self, env: Envelope) -> None:
        body = env.json()
        if body.get("correlation_id") != env.correlation_id:
            raise BrokerError(f"payload/envelope correlation mismatch on {env.correlation_id}")
        uid = int(body["user_id"])
        if body["kind"] == "processing":
            await self.on_processing(uid, env.correlation_id)
        elif body["kind"] == "result":
            await self.on_result(uid, env.correlation_id, body["record"])
        else:
            await self.on_failed(uid, env.correlation_id, body.get("detail", "prediction failed"))

    async def _dead(self, env: Envelope) -> None:
        body = env.json()
        await self.on_failed(int(body["user_id"]), env.correlation_id,
                             f"undeliverable after {env.delivery_count} attempts")

    async def stop(self) -> None:
        for s in self._subs:
            await s.stop()
        self._subs = []


def broker_app(broker: Broker) -> web.Application:
    def error(exc: Exception, status: int) -> web.Response:
        return web.json_response({"error": type(exc).__name__, "message": str(exc)}, status=status)

    async def publish(request: web.Request) -> web.Response:
        name = request.match_info["name"]
        env = Envelope.from_dict(await request.json())
        try:
            seq = await broker.publish(name, env)
        except UnknownQueue as exc:
            return error(exc, 404)
        except StorageFull as exc:
            return error(exc, 507)
        return web.json_response({"seq": seq})

    async def receive(request: web.Request) -> web.Response:
        name = request.match_info["name"]
        body = await request.json()
        try:
            got = await broker.receive(name, body.get("consumer", "remote"), int(body.get("max", 1)),
                                       wait=float(body.get("wait_ms", 0)) / 1000)
        except UnknownQueue as exc:
            return error(exc, 404)
        if request.transport is None or request.transport.is_closing():
            # the caller went away while we waited; put the messages back now
            for d in got:
                await broker.nack(name, d.tag)
            got = []
        return web.json_response({"deliveries": [
            {"tag": d.tag, "seq": d.seq, "envelope": d.envelope.to_dict()} for d in got]})

    async def ack(request: web.Request) -> web.Response:
        body = await request.json()
        try:
            return web.json_response({"ok": await broker.ack(request.match_info["name"], body["tag"])})
        except UnknownQueue as exc:
            return error(exc, 404)

    async def nack(request: web.Request) -> web.Response:
        body = await request.json()
        try:
            ok = await broker.nack(request.match_info["name"], body["tag"], bool(body.get("requeue", True)))
        except UnknownQueue as exc:
            return error(exc, 404)
        return web.json_response({"ok": ok})

    async def queues(request: web.Request) -> web.Response:
        return web.json_response(broker.depths())

    async def healthz(request: web.Request) -> web.Response:
        return web.json_response({"status": "ok"})

    app = web.Application(client_max_size=16 * 1024 * 1024)
    app.router.add_post("/queues/{name}/publish", publish)
    app.router.add_post("/queues/{name}/receive", receive)
    app.router.add_post("/queues/{name}/ack", ack)
    app.router.add_post("/queues/{name}/nack", nack)
    app.router.add_get("/queues", queues)
    app.router.add_get("/healthz", healthz)
    return app
