import asyncio
import json
import os
import random
import subprocess
import sys
import tempfile
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import profile, run, user
from shardline.domain import FACTOR_NAMES, FactorTriple, PredictionJob, PredictionRecord
from shardline.shard_router import ShardRouter, ShardMap, route
from shardline.store import (
    ConnectionPool,
    DuplicateKey,
    InvalidRange,
    LocalShard,
    NotFound,
    ShardStore,
    StoreError,
    WrongShard,
)
from shardline.store.engine import global_id, shard_of_id


def prediction(uid: int, created: int) -> PredictionRecord:
    factors = {n: FactorTriple(0.0, "neutral", f"{n} text") for n in FACTOR_NAMES}
    return PredictionRecord(0, uid, created, created, "t", 0.1192, factors)


@pytest.fixture
def store(tmp_path):
    s = ShardStore(0, tmp_path / "s0")
    s.create_user(user(1))
    yield s
    s.close()


def test_profile_read_your_write(store):
    p = profile(1)
    store.create_profile(p)
    assert store.get_profile(1) == p
    with pytest.raises(DuplicateKey):
        store.create_profile(p)
    store.update_profile(replace(p, age=60))
    assert store.get_profile(1).age == 60
    store.delete_profile(1)
    with pytest.raises(NotFound):
        store.get_profile(1)


def test_user_email_unique(store):
    with pytest.raises(DuplicateKey):
        store.create_user(user(2, email="u1@example.test"))
    store.create_user(user(2))
    store.update_user(replace(store.get_user(2), email="new@example.test"))
    assert store.find_user_by_email("new@example.test").id == 2
    assert store.find_user_by_email("u2@example.test") is None


def test_delete_missing_activity(store):
    with pytest.raises(NotFound):
        store.delete_activity(global_id(99, 0))


def test_ids_encode_shard(tmp_path):
    s = ShardStore(3, tmp_path / "s3")
    s.create_user(user(7))
    a = s.create_activity(7, "smoking", 5, 100)
    assert a.activity_id == 1 * 64 + 3 and shard_of_id(a.activity_id) == 3
    s.close()


def test_fifty_activities_counted_against_shadow(store):
    shadow = [store.create_activity(1, random.choice(["smoking", "exercise"]), i, 1000 + i) for i in range(50)]
    items, total = store.list_activities(1)
    assert total == 50 == store.count_activities(1)
    assert sorted(items, key=lambda a: a.activity_id) == sorted(shadow, key=lambda a: a.activity_id)


def test_kind_filter_and_empty(store):
    for i in range(3):
        store.create_activity(1, "smoking", i, 10 + i)
    for i in range(2):
        store.create_activity(1, "exercise", i, 20 + i)
    assert len(store.list_activities(1, "exercise")[0]) == 2
    store.create_user(user(2))
    assert store.list_activities(2) == ([], 0)
    with pytest.raises(NotFound):
        store.list_activities(404)


def test_pagination_matches_shadow(store):
    rng = random.Random(3)
    shadow = [store.create_activity(1, "exercise", i, rng.randint(0, 10**6)) for i in range(120)]
    shadow.sort(key=lambda a: (a.recorded_at, a.activity_id), reverse=True)
    pages = [store.list_activities(1, offset=o, limit=50) for o in (0, 50, 100)]
    assert [len(p) for p, _ in pages] == [50, 50, 20]
    assert all(t == 120 for _, t in pages)
    assert [a for p, _ in pages for a in p] == shadow


def test_predictions_by_date_brute_force(store):
    rng = random.Random(11)
    shadow = [store.create_prediction(prediction(1, rng.randint(0, 10_000))) for _ in range(200)]
    for _ in range(300):
        a, b = sorted((rng.randint(-100, 10_100), rng.randint(-100, 10_100)))
        got = store.get_predictions_by_date(1, a, b)
        want = sorted((p for p in shadow if a <= p.created_at <= b),
                      key=lambda p: (p.created_at, p.prediction_id), reverse=True)
        assert got == want
    assert store.get_predictions_by_date(1, -1, 10**6) == store.list_predictions(1)[0]
    with pytest.raises(InvalidRange):
        store.get_predictions_by_date(1, 5, 4)


def test_empty_range_between_records(store):
    store.create_prediction(prediction(1, 100))
    store.create_prediction(prediction(1, 200))
    assert store.get_predictions_by_date(1, 101, 199) == []


def test_job_completion_is_idempotent(store):
    store.create_job(PredictionJob("a" * 32, 1, "pending", 1))
    job, applied = store.complete_job("a" * 32, prediction(1, 5))
    assert applied and job.status == "completed" and job.result.prediction_id > 0
    again, applied = store.complete_job("a" * 32, prediction(1, 6))
    assert not applied and again == job
    assert store.list_predictions(1)[1] == 1
    assert store.fail_job("a" * 32, "late")[1] is False


def test_wrong_shard_rejected(tmp_path):
    router = ShardRouter(ShardMap.uniform())
    s = ShardStore(0, tmp_path / "s0", owns=lambda uid: router.owns(0, uid))
    s.create_user(user(5000))
    with pytest.raises(WrongShard):
        s.create_user(user(5001))
    s.close()


# -- durability -----------------------------------------------------------

ops = st.lists(st.tuples(st.sampled_from(["act", "del_act", "prof", "pred", "snap"]),
                         st.integers(1, 3), st.integers(0, 50)), max_size=40)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(script=ops, torn=st.binary(max_size=30).filter(lambda b: b"\n" not in b))
def test_recovery_reproduces_committed_state(script, torn):
    with tempfile.TemporaryDirectory() as d:
        s = ShardStore(0, d, snapshot_every=7)
        for uid in (1, 2, 3):
            s.create_user(user(uid))
        shadow_acts: dict[int, object] = {}
        shadow_prof = {}
        shadow_preds = {}
        for op, uid, n in script:
            if op == "act":
                a = s.create_activity(uid, "smoking", n, n)
                shadow_acts[a.activity_id] = a
            elif op == "del_act" and shadow_acts:
                aid = sorted(shadow_acts)[n % len(shadow_acts)]
                s.delete_activity(aid)
                del shadow_acts[aid]
            elif op == "prof":
                p = profile(uid, age=n)
                (s.update_profile if uid in shadow_prof else s.create_profile)(p)
                shadow_prof[uid] = p
            elif op == "pred":
                p = s.create_prediction(prediction(uid, n))
                shadow_preds[p.prediction_id] = p
            else:
                s.snapshot()
        s._wait_snapshot()
        os.close(s._fd)  # crash: no orderly close
        with open(os.path.join(d, "wal.jsonl"), "ab") as fh:
            fh.write(torn)
        r = ShardStore(0, d)
        assert r.activities == shadow_acts
        assert r.profiles == shadow_prof
        assert r.predictions == shadow_preds
        assert r.user_count() == 3
        # new writes continue after the repaired tail
        a = r.create_activity(1, "exercise", 1, 1)
        assert a.activity_id not in shadow_acts
        r.close()
        assert ShardStore(0, d).get_activity(a.activity_id) == a


def test_crash_during_background_snapshot_loses_nothing(tmp_path):
    s = ShardStore(0, tmp_path, snapshot_every=10 ** 9)
    s.create_user(user(1))
    before = s.create_activity(1, "smoking", 1, 1)
    with s._lock:
        s._rotate()  # crash after rotation, before the snapshot lands
    after = s.create_activity(1, "smoking", 2, 2)
    os.close(s._fd)
    assert (tmp_path / "wal.prev.jsonl").exists()
    r = ShardStore(0, tmp_path)
    assert r.activities == {before.activity_id: before, after.activity_id: after}
    assert not (tmp_path / "wal.prev.jsonl").exists()
    assert r._wal_lines == 0
    r.close()


def test_failed_background_snapshot_keeps_both_logs(tmp_path, monkeypatch):
    s = ShardStore(0, tmp_path, snapshot_every=3)
    monkeypatch.setattr(ShardStore, "snapshot_path", property(lambda self: tmp_path / "no" / "snap.json"))
    s.create_user(user(1))
    acts = [s.create_activity(1, "smoking", n, n) for n in range(8)]
    s._wait_snapshot()
    monkeypatch.undo()
    s.close()
    assert not (tmp_path / "snapshot.json").exists()
    r = ShardStore(0, tmp_path)
    assert sorted(r.activities) == sorted(a.activity_id for a in acts)
    assert (tmp_path / "snapshot.json").exists()
    r.close()


def test_automatic_snapshot_does_not_hold_the_write_lock(tmp_path):
    s = ShardStore(0, tmp_path, snapshot_every=2000)
    s.create_user(user(1))
    for n in range(2000):
        s.create_activity(1, "smoking", n, n)
    # the encoder runs on its own thread; writers keep going meanwhile
    assert s._snapshotter is not None or (tmp_path / "snapshot.json").exists()
    extra = s.create_activity(1, "exercise", 1, 1)
    s.close()
    assert ShardStore(0, tmp_path).get_activity(extra.activity_id) == extra


CHILD = r"""
import sys
from shardline.store import ShardStore
from shardline.domain import UserRecord
s = ShardStore(0, sys.argv[1])
for uid in range(1, 100001):
    s.create_user(UserRecord(uid, f"k{uid}@x", "h", "n", True, 1))
    print(uid, flush=True)
"""


def test_survives_sigkill(tmp_path):
    proc = subprocess.Popen([sys.executable, "-c", CHILD, str(tmp_path)], stdout=subprocess.PIPE, text=True)
    last = 0
    for line in proc.stdout:
        last = int(line)
        if last >= 2000:
            break
    proc.kill()
    proc.wait()
    s = ShardStore(0, tmp_path)
    assert s.user_count() >= last
    assert all(s.get_user(u).email == f"k{u}@x" for u in range(1, last + 1))
    s.close()


def test_read_only_does_not_touch_files(tmp_path):
    s = ShardStore(0, tmp_path)
    s.create_user(user(1))
    os.close(s._fd)
    with open(tmp_path / "wal.jsonl", "ab") as fh:
        fh.write(b'{"ops": [["users"')
    size = (tmp_path / "wal.jsonl").stat().st_size
    ro = ShardStore(0, tmp_path, read_only=True)
    assert ro.user_count() == 1
    with pytest.raises(StoreError):
        ro.create_user(user(2))
    assert (tmp_path / "wal.jsonl").stat().st_size == size
    assert not ShardStore(1, tmp_path / "absent", read_only=True).data_dir.exists()


def test_snapshot_format_is_versioned_json(store):
    store.snapshot()
    body = json.loads((store.data_dir / "snapshot.json").read_text())
    assert body["format"] == 1 and "1" in body["tables"]["users"]


def test_placement_scan_agrees_with_router(tmp_path):
    m = ShardMap.uniform(2, 10)
    router = ShardRouter(m)
    stores = {i: ShardStore(i, tmp_path / str(i), owns=lambda u, i=i: router.owns(i, u)) for i in (0, 1)}
    for uid in range(1, 21):
        st_ = stores[route(uid, m)]
        st_.create_user(user(uid))
        st_.create_activity(uid, "smoking", 1, 1)
    for i, s in stores.items():
        assert all(route(uid, m) == i for _, uid in s.scan_user_ids())
        s.close()


# -- pooled access --------------------------------------------------------

def test_local_shard_respects_pool(tmp_path):
    async def go():
        shard = LocalShard(ShardStore(0, tmp_path), ConnectionPool(0, 4, 5.0), offload=True)
        await shard.call("create_user", user(1))

        async def op(i):
            return await shard.call("create_activity", 1, "smoking", i, i)

        recs = await asyncio.gather(*(op(i) for i in range(100)))
        assert len({r.activity_id for r in recs}) == 100
        assert shard.pool.high_water <= 4 and shard.pool.violations == 0
        with pytest.raises(AttributeError):
            await shard.call("_commit", [])
        shard.close()
    run(go())


def test_email_claims_are_atomic_and_durable(tmp_path):
    s = ShardStore(0, tmp_path)
    s.claim_email("a@x.io", 1)
    s.claim_email("a@x.io", 1)  # same owner again is a no-op
    with pytest.raises(DuplicateKey):
        s.claim_email("a@x.io", 2)
    s.release_email("a@x.io", 2)  # not the owner: ignored
    s.close()
    s = ShardStore(0, tmp_path)
    with pytest.raises(DuplicateKey):
        s.claim_email("a@x.io", 2)
    s.release_email("a@x.io", 1)
    s.claim_email("a@x.io", 2)
    s.snapshot()
    s.close()
    assert ShardStore(0, tmp_path, read_only=True).email_claims == {"a@x.io": 2}
