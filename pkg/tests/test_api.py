import asyncio
import re

from conftest import run
from harness import PROFILE, Harness
from shardline.api import API_ROUTES
from shardline.cache import TTLCache


def api(tmp_path, fn, **kw):
    async def go():
        async with Harness(tmp_path, **kw) as h:
            await fn(h)
    run(go())


def test_route_inventory(tmp_path):
    async def check(h):
        registered = set()
        for res in h.c.server.app.router.resources():
            for route in res:
                path = res.canonical.replace(r"{id:\d+}", "{id}")
                registered.add((route.method, path))
        assert len(API_ROUTES) == 24
        assert set(API_ROUTES) <= registered
    api(tmp_path, check)


def test_auth_flow(tmp_path):
    async def check(h):
        reg = await h.signup("A@Example.test", verify=False)
        assert reg["user_id"] == 1 and reg["email"] == "a@example.test"
        r = await h.c.post("/auth/login", json={"email": "a@example.test", "password": "pw"})
        assert r.status == 403
        await h.c.post("/auth/verify", json={"email": "a@example.test", "code": reg["verification_code"]})
        assert (await h.c.post("/auth/login", json={"email": "a@example.test", "password": "no"})).status == 401
        hdr = await h.token("a@example.test")
        assert (await h.c.get("/users/me", headers=hdr)).status == 200
        assert (await h.c.post("/auth/register", json={"email": "a@example.test", "password": "x"})).status == 409
        assert (await h.c.get("/users/me")).status == 401
        forged = {"Authorization": "Bearer 1.99999999999.AAAA"}
        assert (await h.c.get("/users/me", headers=forged)).status == 401
        h.now += 3601  # replay after expiry
        r = await h.c.get("/users/me", headers=hdr)
        assert r.status == 401 and (await r.json())["code"] == "unauthorized"
    api(tmp_path, check)


def test_password_reset(tmp_path):
    async def check(h):
        await h.signup("r@x.io")
        r = await h.c.post("/auth/reset-password", json={"email": "r@x.io"})
        code = (await r.json())["reset_code"]
        bad = await h.c.post("/auth/reset-password", json={"email": "r@x.io", "code": "0", "new_password": "n"})
        assert bad.status == 422
        ok = await h.c.post("/auth/reset-password", json={"email": "r@x.io", "code": code, "new_password": "n2"})
        assert ok.status == 200
        await h.token("r@x.io", "n2")
    api(tmp_path, check)


def test_users_me(tmp_path):
    async def check(h):
        await h.signup("a@x.io")
        await h.signup("b@x.io")
        hdr = await h.token("a@x.io")
        r = await h.c.patch("/users/me", json={"display_name": "Ann"}, headers=hdr)
        assert (await r.json())["display_name"] == "Ann"
        assert (await h.c.patch("/users/me", json={"email": "b@x.io"}, headers=hdr)).status == 409
        assert (await h.c.put("/users/me", json={"display_name": "Z"}, headers=hdr)).status == 422
        r = await h.c.put("/users/me", json={"display_name": "Z", "email": "z@x.io"}, headers=hdr)
        body = await r.json()
        assert body["email"] == "z@x.io" and "password_hash" not in body
        await h.token("z@x.io")
    api(tmp_path, check)


def test_profile_crud(tmp_path):
    async def check(h):
        await h.signup("p@x.io")
        hdr = await h.token("p@x.io")
        assert (await h.c.get("/users/me/profile", headers=hdr)).status == 404
        r = await h.c.post("/users/me/profile", json={**PROFILE, "bmi": 9.9}, headers=hdr)
        assert r.status == 422
        assert (await r.json())["errors"] == [{"field": "bmi", "range": [10.0, 70.0]}]
        assert (await h.c.post("/users/me/profile", json=PROFILE, headers=hdr)).status == 201
        assert (await h.c.post("/users/me/profile", json=PROFILE, headers=hdr)).status == 409
        r = await h.c.put("/users/me/profile", json={**PROFILE, "age": 50}, headers=hdr)
        assert (await r.json())["age"] == 50
        got = await (await h.clients[1].get("/users/me/profile", headers=hdr)).json()
        assert got["age"] == 50 and got["user_id"] == 1
        assert (await h.c.delete("/users/me/profile", headers=hdr)).status == 204
        assert (await h.c.get("/users/me/profile", headers=hdr)).status == 404
    api(tmp_path, check)


def test_activities_and_tenant_isolation(tmp_path):
    async def check(h):
        await h.signup("a@x.io")
        await h.signup("b@x.io")
        ha, hb = await h.token("a@x.io"), await h.token("b@x.io")
        ids = []
        for i, kind in enumerate(["smoking"] * 3 + ["exercise"] * 2):
            r = await h.c.post("/activities", json={"kind": kind, "quantity": i, "recorded_at": 100 + i},
                               headers=ha)
            assert r.status == 201
            ids.append((await r.json())["activity_id"])
        r = await h.c.get("/activities?kind=exercise", headers=ha)
        assert (await r.json())["total"] == 2
        page = await (await h.c.get("/activities?limit=2&offset=1", headers=ha)).json()
        assert [a["recorded_at"] for a in page["items"]] == [103, 102] and page["total"] == 5
        assert (await (await h.c.get("/activities/count", headers=ha)).json())["count"] == 5
        assert (await h.c.post("/activities", json={"kind": "yoga", "quantity": 1}, headers=ha)).status == 422
        assert (await h.c.get("/activities?limit=-1", headers=ha)).status == 422
        # b sees none of a's records and cannot touch them
        assert (await (await h.c.get("/activities", headers=hb)).json())["total"] == 0
        assert (await h.c.get(f"/activities/{ids[0]}", headers=hb)).status == 404
        assert (await h.c.put(f"/activities/{ids[0]}", json={"kind": "smoking", "quantity": 9},
                              headers=hb)).status == 404
        assert (await h.c.delete(f"/activities/{ids[0]}", headers=hb)).status == 404
        r = await h.c.put(f"/activities/{ids[0]}", json={"kind": "exercise", "quantity": 9}, headers=ha)
        assert (await r.json())["kind"] == "exercise"
        assert (await h.c.delete(f"/activities/{ids[0]}", headers=ha)).status == 204
        assert (await h.c.get(f"/activities/{ids[0]}", headers=ha)).status == 404
        assert (await h.c.delete(f"/activities/{ids[0]}", headers=ha)).status == 404
    api(tmp_path, check)


async def _poll(c, cid, hdr, want="completed", timeout=10.0):
    deadline = asyncio.get_running_loop().time() + timeout
    while True:
        body = await (await c.get(f"/predictions/jobs/{cid}/status", headers=hdr)).json()
        if body["status"] == want or asyncio.get_running_loop().time() > deadline:
            return body
        await asyncio.sleep(0.02)


def test_async_prediction_lifecycle(tmp_path):
    async def check(h):
        ha = await h.user_with_profile("a@x.io")
        hb = await h.user_with_profile("b@x.io")
        r = await h.c.post("/predictions", headers=ha)
        assert r.status == 202
        body = await r.json()
        cid = body["correlation_id"]
        assert re.fullmatch(r"[0-9a-f]{32}", cid) and body["status"] == "pending"
        early = await (await h.c.get(f"/predictions/jobs/{cid}/status", headers=ha)).json()
        assert early["status"] in ("pending", "processing")
        done = await _poll(h.clients[1], cid, ha)
        assert done["status"] == "completed" and done["completed_at"] >= done["submitted_at"]
        result = await (await h.c.get(f"/predictions/jobs/{cid}/result", headers=ha)).json()
        assert result["user_id"] == 1 and len(result["factors"]) == 9
        assert (await h.c.get(f"/predictions/jobs/{cid}/status", headers=hb)).status == 403
        assert (await h.c.get(f"/predictions/jobs/{'0' * 32}/status", headers=ha)).status == 404
        listed = await (await h.c.get("/predictions", headers=ha)).json()
        assert listed["total"] == 1 and listed["items"][0]["prediction_id"] == result["prediction_id"]
        ts = result["created_at"]
        by = await (await h.c.get(f"/predictions/by-date?from={ts}&to={ts}", headers=ha)).json()
        assert [p["prediction_id"] for p in by["items"]] == [result["prediction_id"]]
        assert (await h.c.get(f"/predictions/by-date?from={ts + 1}&to={ts}", headers=ha)).status == 422
        assert (await h.c.get("/predictions/by-date?from=1", headers=ha)).status == 422
        assert (await h.c.delete(f"/predictions/{result['prediction_id']}", headers=hb)).status == 404
        assert (await h.c.delete(f"/predictions/{result['prediction_id']}", headers=ha)).status == 204
    api(tmp_path, check)


def test_concurrent_jobs_never_swap(tmp_path):
    async def check(h):
        heads = [await h.user_with_profile(f"u{i}@x.io") for i in range(6)]
        posts = await asyncio.gather(*(h.clients[i % 2].post("/predictions", headers=hd)
                                       for i, hd in enumerate(heads * 3)))
        jobs = [((await p.json())["correlation_id"], i % 6) for i, p in enumerate(posts)]
        for cid, idx in jobs:
            assert (await _poll(h.c, cid, heads[idx]))["status"] == "completed"
            res = await (await h.c.get(f"/predictions/jobs/{cid}/result", headers=heads[idx])).json()
            assert res["user_id"] == idx + 1
    api(tmp_path, check)


def test_prediction_needs_profile(tmp_path):
    async def check(h):
        await h.signup("n@x.io")
        hdr = await h.token("n@x.io")
        r = await h.c.post("/predictions", headers=hdr)
        assert r.status == 409 and (await r.json())["code"] == "missing_profile"
        assert (await h.c.post("/predictions/what-if", json={}, headers=hdr)).status == 409
    api(tmp_path, check)


def test_sync_mode_returns_record(tmp_path):
    async def check(h):
        hdr = await h.user_with_profile("s@x.io")
        r = await h.c.post("/predictions", headers=hdr)
        assert r.status == 201
        rec = await r.json()
        assert rec["prediction_id"] > 0 and rec["user_id"] == 1
    api(tmp_path, check, mode="sync")


def test_what_if_cached_per_instance(tmp_path):
    async def check(h):
        hdr = await h.user_with_profile("w@x.io")
        body = {"overrides": {"bmi": 30.0}}
        r1 = await h.c.post("/predictions/what-if", json=body, headers=hdr)
        r2 = await h.c.post("/predictions/what-if", json=body, headers=hdr)
        assert (r1.headers["X-Cache"], r2.headers["X-Cache"]) == ("MISS", "HIT")
        assert await r1.json() == await r2.json()
        higher = await (await h.c.post("/predictions/what-if", json={"overrides": {"bmi": 45.0}},
                                       headers=hdr)).json()
        assert higher["risk_score"] >= (await r1.json())["risk_score"]
        assert (await h.c.post("/predictions/what-if", json={"overrides": {"bmi": 80}},
                               headers=hdr)).status == 422
        assert (await h.c.post("/predictions/what-if", json={"overrides": {"shoe": 1}},
                               headers=hdr)).status == 422
        # updating the profile drops that instance's entries
        await h.c.put("/users/me/profile", json={**PROFILE, "age": 46}, headers=hdr)
        r3 = await h.c.post("/predictions/what-if", json=body, headers=hdr)
        assert r3.headers["X-Cache"] == "MISS"
        assert (await h.c.get("/predictions", headers=hdr)).status == 200
        assert (await (await h.c.get("/predictions", headers=hdr)).json())["total"] == 0
        metrics = await (await h.c.get("/metrics")).json()
        assert metrics["cache"]["hits"] == 1 and metrics["cache"]["misses"] == 3
    api(tmp_path, check)


def test_users_spread_over_shards(tmp_path):
    async def check(h):
        for i in range(7):
            await h.signup(f"s{i}@x.io", client=h.clients[i % 2])
        counts = [s.store.user_count() for s in h.shards.values()]
        assert counts == [3, 3, 1]  # capacity 3, auto-extended to a third shard
        hdr = await h.token("s6@x.io")
        assert (await (await h.c.get("/users/me", headers=hdr)).json())["id"] == 7
    api(tmp_path, check, capacity=3)


def test_errors_are_json_and_metrics(tmp_path):
    async def check(h):
        r = await h.c.post("/auth/login", data=b"{not json", headers={"Content-Type": "application/json"})
        assert r.status == 400 and (await r.json())["code"] == "bad_json"
        r = await h.c.get("/nowhere")
        assert r.status == 404 and "code" in await r.json()
        assert (await (await h.c.get("/healthz")).json())["status"] == "ok"
        m = await (await h.c.get("/metrics")).json()
        assert m["routes"]["POST /auth/login"]["client_errors"] == 1
        assert m["jobs"] == {"pending": 0, "processing": 0, "completed": 0, "failed": 0}
        assert "ml.prediction.request" in m["queues"]
        assert m["pools"][0]["max_connections"] == 10
    api(tmp_path, check)


def test_injected_empty_cache_is_used(tmp_path):
    mine = TTLCache(ttl=5.0)

    async def check(h):
        assert h.services[0].cache is mine  # an empty cache is falsy; it must still be kept
    api(tmp_path, check, cache_factory=lambda: mine)


def test_same_email_race_across_instances(tmp_path):
    async def check(h):
        body = {"email": "race@x.io", "password": "pw"}
        for shard in h.shards.values():
            real = shard.call

            async def slow_create(op, *args, _real=real, **kw):
                if op == "create_user":
                    await asyncio.sleep(0.05)  # widen the check-then-create window
                return await _real(op, *args, **kw)
            shard.call = slow_create
        rs = await asyncio.gather(*(h.clients[i % 2].post("/auth/register", json=body) for i in range(8)))
        assert sorted(r.status for r in rs) == [201] + [409] * 7
        users = [s.store.find_user_by_email("race@x.io") for s in h.shards.values()]
        assert sum(u is not None for u in users) == 1
        # a freed address can be taken by someone else
        await h.signup("b@x.io")
        await h.signup("c@x.io")
        hb = await h.token("b@x.io")
        assert (await h.c.patch("/users/me", json={"email": "d@x.io"}, headers=hb)).status == 200
        hc = await h.token("c@x.io")
        assert (await h.c.patch("/users/me", json={"email": "b@x.io"}, headers=hc)).status == 200
        assert (await h.clients[1].patch("/users/me", json={"email": "d@x.io"}, headers=hc)).status == 409
    api(tmp_path, check, capacity=1)  # one user per shard, so duplicates would land on different shards
