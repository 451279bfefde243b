import asyncio
import io
import json
from collections import Counter

import aiohttp
from aiohttp import web

from conftest import addr, run
from shardline.gateway import STATUS_PATH, Gateway, ProxyRequest


class Upstream:
    """A tiny backend that names itself and can be told to look sick."""

    def __init__(self, name):
        self.name = name
        self.sick = False
        self.posts = 0
        self.address = addr()
        self.runner = None

    async def start(self):
        app = web.Application()
        app.router.add_get("/healthz", self.healthz)
        app.router.add_get("/who", self.who)
        app.router.add_post("/who", self.post)
        app.router.add_get("/slow", self.slow)
        self.runner = web.AppRunner(app, access_log=None)
        await self.runner.setup()
        host, port = self.address.rsplit(":", 1)
        await web.TCPSite(self.runner, host, int(port)).start()
        return self

    async def stop(self):
        if self.runner is not None:
            await self.runner.cleanup()
            self.runner = None

    async def healthz(self, request):
        return web.json_response({"status": "ok"}, status=503 if self.sick else 200)

    async def who(self, request):
        return web.json_response({"backend": self.name})

    async def post(self, request):
        self.posts += 1
        return web.json_response({"backend": self.name, "body": await request.text()}, status=201)

    async def slow(self, request):
        await asyncio.sleep(1.0)
        return web.json_response({})


async def fleet(n, **gw_kw):
    ups = [await Upstream(f"b{i}").start() for i in range(n)]
    gw = Gateway([u.address for u in ups], **gw_kw)
    listen = addr()
    await gw.listen(listen)
    return ups, gw, f"http://{listen}"


async def teardown(ups, gw):
    await gw.close()
    for u in ups:
        await u.stop()


def test_round_robin_split():
    async def go():
        ups, gw, url = await fleet(2, health_interval=0)
        try:
            async with aiohttp.ClientSession() as s:
                seen = Counter()
                for _ in range(100):
                    async with s.get(f"{url}/who") as r:
                        seen[(await r.json())["backend"]] += 1
            assert abs(seen["b0"] - 50) <= 1 and abs(seen["b1"] - 50) <= 1
            assert sum(b["routed"] for b in gw.stats()) == 100
        finally:
            await teardown(ups, gw)
    run(go())


def test_failover_and_no_backend():
    async def go():
        ups, gw, url = await fleet(2, health_interval=0)
        try:
            await ups[0].stop()
            async with aiohttp.ClientSession() as s:
                for _ in range(10):
                    async with s.get(f"{url}/who") as r:
                        assert r.status == 200 and (await r.json())["backend"] == "b1"
                # passive observations eventually mark the dead one unhealthy
                assert not gw.backends[0].healthy
                await ups[1].stop()
                async with s.get(f"{url}/who") as r:
                    assert r.status == 502
                for _ in range(3):
                    gw.observe(gw.backends[1], False)
                async with s.get(f"{url}/who") as r:
                    assert r.status == 503 and (await r.json())["code"] == "no_backend"
        finally:
            await teardown(ups, gw)
    run(go())


def test_post_not_retried():
    async def go():
        ups, gw, url = await fleet(2, health_interval=0)
        try:
            gw.backends[1].healthy = False
            await ups[0].stop()
            gw.backends[1].healthy = True
            gw._rr = iter(range(0, 100, 2))  # always the first healthy backend
            async with aiohttp.ClientSession() as s:
                async with s.post(f"{url}/who", data="x") as r:
                    assert r.status == 502
                assert ups[1].posts == 0
                gw._rr = iter(range(0, 100, 2))
                async with s.get(f"{url}/who") as r:
                    assert (await r.json())["backend"] == "b1"  # GET goes to the other backend
        finally:
            await teardown(ups, gw)
    run(go())


def test_upstream_timeout_is_504():
    async def go():
        ups, gw, url = await fleet(1, health_interval=0, upstream_timeout=0.2)
        try:
            async with aiohttp.ClientSession() as s:
                async with s.get(f"{url}/slow") as r:
                    assert r.status == 504
        finally:
            await teardown(ups, gw)
    run(go())


def test_health_state_machine_and_flapping():
    gw = Gateway(["a:1", "b:2"], unhealthy_after=3, healthy_after=2)
    a = gw.backends[0]
    gw.route_log = []
    pattern = [False, False, True, False, False, False, True, True]
    states = []
    for ok in pattern:
        gw.observe(a, ok)
        states.append(a.healthy)
        picked = gw.pick()
        gw.route_log.append((0.0, picked.address))
    # needs three failures in a row, then two successes in a row
    assert states == [True, True, True, True, True, False, False, True]
    routed = [addr for _, addr in gw.route_log]
    assert all(r == "b:2" for r, s in zip(routed, states) if not s)


def test_active_probes_track_health():
    async def go():
        ups, gw, url = await fleet(2, health_interval=0.1)
        loop = asyncio.get_running_loop()
        try:
            ups[0].sick = True
            t0 = loop.time()
            while gw.backends[0].healthy:
                await asyncio.sleep(0.01)
            assert loop.time() - t0 <= 3 * 0.1 + 0.25
            ups[0].sick = False
            t0 = loop.time()
            while not gw.backends[0].healthy:
                await asyncio.sleep(0.01)
            assert loop.time() - t0 <= 2 * 0.1 + 0.25
            async with aiohttp.ClientSession() as s:
                async with s.get(f"{url}{STATUS_PATH}") as r:
                    body = await r.json()
            assert [b["healthy"] for b in body["backends"]] == [True, True]
        finally:
            await teardown(ups, gw)
    run(go())


def test_pipelining_head_and_access_log():
    async def go():
        buf = io.StringIO()
        ups, gw, url = await fleet(2, health_interval=0, access_log=buf)
        host, port = url[7:].rsplit(":", 1)
        try:
            reader, writer = await asyncio.open_connection(host, int(port))
            writer.write(b"GET /who HTTP/1.1\r\nHost: x\r\n\r\n"
                         b"HEAD /who HTTP/1.1\r\nHost: x\r\n\r\n"
                         b"GET /who HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
            await writer.drain()
            raw = await asyncio.wait_for(reader.read(), 5)
            writer.close()
            parts = raw.split(b"HTTP/1.1 ")[1:]
            assert len(parts) == 3 and all(p.startswith(b"200") for p in parts)
            bodies = [p.split(b"\r\n\r\n", 1)[1] for p in parts]
            assert bodies[1] == b""
            assert [json.loads(b)["backend"] for b in (bodies[0], bodies[2])] == ["b0", "b0"]

            reader, writer = await asyncio.open_connection(host, int(port))
            writer.write(b"NOT HTTP\r\n\r\n")
            raw = await asyncio.wait_for(reader.read(), 5)
            assert raw.startswith(b"HTTP/1.1 400")
            writer.close()
        finally:
            await teardown(ups, gw)
        lines = buf.getvalue().splitlines()
        assert len(lines) == 3
        ts, method, target, backend, status, latency = lines[1].split("\t")
        assert (method, target, status) == ("HEAD", "/who", "200")
        assert backend in (u.address for u in ups) and float(latency) >= 0 and float(ts) > 0
    run(go())


def test_forward_direct():
    async def go():
        ups, gw, _ = await fleet(1, health_interval=0)
        try:
            resp = await gw.forward(ProxyRequest("GET", "/who?x=1", [(b"Host", b"x")], b"", True))
            assert resp.status == 200 and json.loads(resp.body)["backend"] == "b0"
        finally:
            await teardown(ups, gw)
    run(go())
