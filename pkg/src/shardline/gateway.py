"""Round-robin reverse proxy with active health checks.

The data path is a plain asyncio protocol on both sides: requests are framed
with httptools, re-serialized with hop-by-hop headers stripped, and sent over
pooled keep-alive connections to the chosen backend. Bodies pass through
byte for byte.

There is exactly one gateway process, so it is a single point of failure by
construction. Idempotent methods (GET, HEAD, PUT, DELETE, OPTIONS) get one
retry on a different backend when the first attempt fails at the transport
level; POST and PATCH are never retried.
"""

from __future__ import annotations

import asyncio
import errno
import itertools
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, TextIO

import aiohttp
import httptools

from .config import PortInUse, split_addr

log = logging.getLogger(__name__)

RETRYABLE_METHODS = frozenset({"GET", "HEAD", "PUT", "DELETE", "OPTIONS"})
# RFC 7230 hop-by-hop headers, plus the framing headers we recompute
_HOP_HEADERS = frozenset({
    b"connection", b"keep-alive", b"proxy-authenticate", b"proxy-authorization", b"te", b"trailer",
    b"trailers", b"transfer-encoding", b"upgrade", b"content-length", b"expect",
})
_NO_BODY_STATUS = frozenset({204, 304})
MAX_BODY = 16 * 1024 * 1024
IDLE_UPSTREAM_S = 30.0  # well under the backends' keep-alive timeout
STATUS_PATH = "/_gateway"


class NoHealthyBackend(Exception):
    pass


class UpstreamError(Exception):
    """Transport-level failure talking to one backend."""

    def __init__(self, message: str, *, connect: bool = False, timeout: bool = False):
        self.connect = connect
        self.timeout = timeout
        super().__init__(message)


@dataclass
class ProxyRequest:
    method: str
    target: str
    headers: list[tuple[bytes, bytes]]
    body: bytes
    keep_alive: bool

    @property
    def path(self) -> str:
        return self.target.split("?", 1)[0]

    def encode_for(self, host: str) -> bytes:
        lines = [f"{self.method} {self.target} HTTP/1.1\r\n".encode("latin-1"), b"Host: ", host.encode(), b"\r\n"]
        for name, value in self.headers:
            low = name.lower()
            if low in _HOP_HEADERS or low == b"host":
                continue
            lines += [name, b": ", value, b"\r\n"]
        if self.body or self.method in ("POST", "PUT", "PATCH"):
            lines.append(b"Content-Length: %d\r\n" % len(self.body))
        lines.append(b"\r\n")
        lines.append(self.body)
        return b"".join(lines)


@dataclass
class ProxyResponse:
    status: int
    reason: bytes
    headers: list[tuple[bytes, bytes]]
    body: bytes = b""
    keep_alive: bool = True
    head: bool = False

    def encode(self, keep_alive: bool) -> bytes:
        lines = [b"HTTP/1.1 %d %s\r\n" % (self.status, self.reason or b"-")]
        content_length = None
        for name, value in self.headers:
            low = name.lower()
            if low == b"content-length":
                content_length = value
            if low in _HOP_HEADERS:
                continue
            lines += [name, b": ", value, b"\r\n"]
        if self.status not in _NO_BODY_STATUS and not 100 <= self.status < 200:
            if self.head:
                if content_length is not None:
                    lines.append(b"Content-Length: " + content_length + b"\r\n")
            else:
                lines.append(b"Content-Length: %d\r\n" % len(self.body))
        if not keep_alive:
            lines.append(b"Connection: close\r\n")
        lines.append(b"\r\n")
        if not self.head:
            lines.append(self.body)
        return b"".join(lines)


def json_reply(status: int, reason: str, body: dict) -> ProxyResponse:
    return ProxyResponse(status, reason.encode(), [(b"Content-Type", b"application/json; charset=utf-8")],
                         json.dumps(body).encode())


# -- upstream side ---------------------------------------------------------


class _UpstreamConnection(asyncio.Protocol):
    def __init__(self, backend: Backend):
        self.backend = backend
        self.transport: asyncio.Transport | None = None
        self.closed = False
        self.idle_since = 0.0
        self._parser = httptools.HttpResponseParser(self)
        self._waiter: asyncio.Future[ProxyResponse] | None = None
        self._head = False
        self._reset()

    def _reset(self) -> None:
        self._reason = bytearray()
        self._headers: list[tuple[bytes, bytes]] = []
        self._body: list[bytes] = []

    def connection_made(self, transport: asyncio.BaseTransport) -> None:
        self.transport = transport  # type: ignore[assignment]

    def connection_lost(self, exc: Exception | None) -> None:
        self.closed = True
        if self._waiter is not None and not self._waiter.done():
            self._waiter.set_exception(UpstreamError(f"{self.backend.address} closed the connection"))

    def exchange(self, raw: bytes, head: bool) -> asyncio.Future[ProxyResponse]:
        assert self.transport is not None
        self._reset()
        self._head = head
        self._waiter = asyncio.get_running_loop().create_future()
        self.transport.write(raw)
        return self._waiter

    def data_received(self, data: bytes) -> None:
        try:
            self._parser.feed_data(data)
        except httptools.HttpParserError as exc:
            self.close()
            if self._waiter is not None and not self._waiter.done():
                self._waiter.set_exception(UpstreamError(f"bad response from {self.backend.address}: {exc}"))

    # httptools callbacks
    def on_status(self, status: bytes) -> None:
        self._reason += status

    def on_header(self, name: bytes, value: bytes) -> None:
        self._headers.append((name, value))

    def on_headers_complete(self) -> None:
        if self._head:
            # HEAD answers carry no body whatever Content-Length says; the
            # parser cannot be told that, so finish here and retire the socket
            self._finish(keep_alive=False)

    def on_body(self, body: bytes) -> None:
        self._body.append(body)

    def on_message_complete(self) -> None:
        if not self._head:
            self._finish(self._parser.should_keep_alive())

    def _finish(self, keep_alive: bool) -> None:
        if self._waiter is None or self._waiter.done():
            return
        self._waiter.set_result(ProxyResponse(self._parser.get_status_code(), bytes(self._reason),
                                              self._headers, b"".join(self._body), keep_alive, self._head))

    def close(self) -> None:
        self.closed = True
        if self.transport is not None:
            self.transport.close()


# -- client side -----------------------------------------------------------


class _ClientConnection(asyncio.Protocol):
    """One downstream connection; pipelined requests are answered in order."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self.transport: asyncio.Transport | None = None
        self._parser = httptools.HttpRequestParser(self)
        self._pending: deque[ProxyRequest] = deque()
        self._busy = False
        self._closed = False
        self._reset()

    def _reset(self) -> None:
        self._url = bytearray()
        self._headers: list[tuple[bytes, bytes]] = []
        self._body: list[bytes] = []
        self._size = 0

    def connection_made(self, transport: asyncio.BaseTransport) -> None:
        self.transport = transport  # type: ignore[assignment]
        self.gateway._clients.add(self)

    def connection_lost(self, exc: Exception | None) -> None:
        self._closed = True
        self.gateway._clients.discard(self)

    def data_received(self, data: bytes) -> None:
        try:
            self._parser.feed_data(data)
        except httptools.HttpParserUpgrade:
            self._reject(501, "Not Implemented", "protocol upgrades are not supported")
        except httptools.HttpParserError:
            self._reject(400, "Bad Request", "malformed HTTP request")

    def _reject(self, status: int, reason: str, message: str) -> None:
        if self.transport is not None and not self._closed:
            self.transport.write(json_reply(status, reason, {"code": "bad_request", "message": message})
                                 .encode(keep_alive=False))
            self.transport.close()
        self._closed = True

    def on_message_begin(self) -> None:
        self._reset()

    def on_url(self, url: bytes) -> None:
        self._url += url

    def on_header(self, name: bytes, value: bytes) -> None:
        self._headers.append((name, value))

    def on_body(self, body: bytes) -> None:
        self._size += len(body)
        if self._size > MAX_BODY:
            self._reject(413, "Payload Too Large", f"body exceeds {MAX_BODY} bytes")
            return
        self._body.append(body)

    def on_message_complete(self) -> None:
        if self._closed:
            return
        self._pending.append(ProxyRequest(self._parser.get_method().decode("latin-1"),
                                          self._url.decode("latin-1"), self._headers,
                                          b"".join(self._body), self._parser.should_keep_alive()))
        if not self._busy:
            self._next()

    def _next(self) -> None:
        if self._pending and not self._closed:
            self._busy = True
            asyncio.get_running_loop().create_task(self._serve(self._pending.popleft()))
        else:
            self._busy = False

    async def _serve(self, req: ProxyRequest) -> None:
        resp = await self.gateway.forward(req)
        if self._closed or self.transport is None:
            return
        self.transport.write(resp.encode(req.keep_alive))
        if not req.keep_alive:
            self.transport.close()
            self._closed = True
            return
        self._next()


# -- gateway ---------------------------------------------------------------


@dataclass
class Backend:
    address: str
    healthy: bool = True
    in_flight: int = 0
    routed: int = 0
    consecutive_failures: int = 0
    consecutive_successes: int = 0
    idle: list[_UpstreamConnection] = field(default_factory=list, repr=False)

    @property
    def url(self) -> str:
        return f"http://{self.address}"

    @property
    def host_port(self) -> tuple[str, int]:
        return split_addr(self.address)


class Gateway:
    def __init__(self, addresses: list[str], *, health_interval: float = 2.0, unhealthy_after: int = 3,
                 healthy_after: int = 2, connect_timeout: float = 1.0, upstream_timeout: float = 30.0,
                 access_log: TextIO | None = None, clock: Callable[[], float] = time.time):
        if not addresses:
            raise ValueError("gateway needs at least one backend")
        self.backends = [Backend(a) for a in addresses]
        self.health_interval = health_interval
        self.unhealthy_after = unhealthy_after
        self.healthy_after = healthy_after
        self.connect_timeout = connect_timeout
        self.upstream_timeout = upstream_timeout
        self.access_log = access_log
        self.clock = clock
        self.route_log: list[tuple[float, str]] | None = None
        self._rr = itertools.count()
        self._session: aiohttp.ClientSession | None = None
        self._health_task: asyncio.Task | None = None
        self._server: asyncio.AbstractServer | None = None
        self._clients: set[_ClientConnection] = set()

    # -- selection --------------------------------------------------------

    def healthy(self) -> list[Backend]:
        return [b for b in self.backends if b.healthy]

    def pick(self, exclude: Backend | None = None) -> Backend:
        pool = [b for b in self.backends if b.healthy and b is not exclude]
        if not pool:
            raise NoHealthyBackend()
        return pool[next(self._rr) % len(pool)]

    # -- health -----------------------------------------------------------

    def observe(self, backend: Backend, ok: bool) -> None:
        """Feed one probe result into the backend's health state machine."""
        if ok:
            backend.consecutive_failures = 0
            backend.consecutive_successes += 1
            if not backend.healthy and backend.consecutive_successes >= self.healthy_after:
                backend.healthy = True
                log.info("backend %s healthy", backend.address)
        else:
            backend.consecutive_successes = 0
            backend.consecutive_failures += 1
            if backend.healthy and backend.consecutive_failures >= self.unhealthy_after:
                backend.healthy = False
                self._drop_idle(backend)
                log.warning("backend %s unhealthy", backend.address)

    async def probe(self, backend: Backend) -> bool:
        assert self._session is not None
        try:
            async with self._session.get(
                    f"{backend.url}/healthz",
                    timeout=aiohttp.ClientTimeout(total=self.health_interval, connect=self.connect_timeout)
            ) as resp:
                return resp.status == 200
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError):
            return False

    async def health_loop(self) -> None:
        while True:
            results = await asyncio.gather(*(self.probe(b) for b in self.backends))
            for b, ok in zip(self.backends, results):
                self.observe(b, ok)
            await asyncio.sleep(self.health_interval)

    # -- lifecycle --------------------------------------------------------

    async def start(self) -> None:
        if self._session is None:
            # probes only; one fresh connection each so a dead backend is noticed at once
            self._session = aiohttp.ClientSession(connector=aiohttp.TCPConnector(force_close=True))
        if self._health_task is None and self.health_interval > 0:
            self._health_task = asyncio.create_task(self.health_loop())

    async def listen(self, addr: str) -> None:
        await self.start()
        host, port = split_addr(addr)
        try:
            self._server = await asyncio.get_running_loop().create_server(
                lambda: _ClientConnection(self), host, port, backlog=4096, reuse_address=True)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(addr) from None
            raise
        log.info("gateway listening on %s", addr)

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for c in list(self._clients):
            if c.transport is not None:
                c.transport.close()
        if self._health_task is not None:
            self._health_task.cancel()
            try:
                await self._health_task
            except asyncio.CancelledError:
                pass
            self._health_task = None
        for b in self.backends:
            self._drop_idle(b)
        if self._session is not None:
            await self._session.close()
            self._session = None

    # -- upstream connections ---------------------------------------------

    def _drop_idle(self, backend: Backend) -> None:
        while backend.idle:
            backend.idle.pop().close()

    async def _connection(self, backend: Backend) -> _UpstreamConnection:
        now = time.monotonic()
        while backend.idle:
            conn = backend.idle.pop()
            if not conn.closed and now - conn.idle_since < IDLE_UPSTREAM_S:
                return conn
            conn.close()
        host, port = backend.host_port
        loop = asyncio.get_running_loop()
        try:
            _, conn = await asyncio.wait_for(
                loop.create_connection(lambda: _UpstreamConnection(backend), host, port),
                self.connect_timeout)
        except asyncio.TimeoutError:
            raise UpstreamError(f"connect to {backend.address} timed out", connect=True, timeout=True) from None
        except OSError as exc:
            raise UpstreamError(f"connect to {backend.address} failed: {exc.strerror or exc}",
                                connect=True) from None
        return conn

    async def _exchange(self, backend: Backend, req: ProxyRequest) -> ProxyResponse:
        conn = await self._connection(backend)
        try:
            resp = await asyncio.wait_for(conn.exchange(req.encode_for(backend.address), req.method == "HEAD"),
                                          self.upstream_timeout)
        except asyncio.TimeoutError:
            conn.close()
            raise UpstreamError(f"{backend.address} did not answer within {self.upstream_timeout:g} s",
                                timeout=True) from None
        except BaseException:
            conn.close()
            raise
        if resp.keep_alive and not conn.closed:
            conn.idle_since = time.monotonic()
            backend.idle.append(conn)
        else:
            conn.close()
        return resp

    async def _send(self, backend: Backend, req: ProxyRequest) -> ProxyResponse:
        backend.in_flight += 1
        backend.routed += 1
        if self.route_log is not None:
            self.route_log.append((self.clock(), backend.address))
        try:
            return await self._exchange(backend, req)
        except UpstreamError as exc:
            if exc.connect:
                self.observe(backend, False)
            raise
        finally:
            backend.in_flight -= 1

    # -- forwarding -------------------------------------------------------

    async def forward(self, req: ProxyRequest) -> ProxyResponse:
        t0 = time.perf_counter()
        chosen = "-"
        if req.path == STATUS_PATH:
            resp = json_reply(200, "OK", {"backends": self.stats()})
        else:
            try:
                backend = self.pick()
            except NoHealthyBackend:
                resp = json_reply(503, "Service Unavailable", {"code": "no_backend", "message": "no healthy backend"})
            else:
                chosen = backend.address
                try:
                    resp = await self._send(backend, req)
                except UpstreamError as exc:
                    resp, chosen = await self._retry(req, backend, exc)
        self._log(req, chosen, resp.status, (time.perf_counter() - t0) * 1000)
        return resp

    async def _retry(self, req: ProxyRequest, failed: Backend, exc: UpstreamError) -> tuple[ProxyResponse, str]:
        last, where = exc, failed.address
        if req.method in RETRYABLE_METHODS:
            try:
                other = self.pick(exclude=failed)
            except NoHealthyBackend:
                other = None
            if other is not None:
                try:
                    return await self._send(other, req), other.address
                except UpstreamError as exc2:
                    last, where = exc2, other.address
        if last.timeout and not last.connect:
            return json_reply(504, "Gateway Timeout", {"code": "upstream_timeout", "message": str(last)}), where
        return json_reply(502, "Bad Gateway", {"code": "bad_gateway", "message": str(last)}), where

    def _log(self, req: ProxyRequest, backend: str, status: int, latency_ms: float) -> None:
        if self.access_log is None:
            return
        self.access_log.write(f"{self.clock():.3f}\t{req.method}\t{req.target}\t{backend}\t{status}\t{latency_ms:.1f}\n")

    def stats(self) -> list[dict]:
        return [{"address": b.address, "healthy": b.healthy, "in_flight": b.in_flight, "routed": b.routed}
                for b in self.backends]
