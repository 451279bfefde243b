"""Embedded per-shard storage: in-memory tables, a redo log and snapshots.

On-disk layout of one shard (format version 1)::

    <data_dir>/
        snapshot.json   {"format": 1, "shard_index": n, "tables": {...}, "meta": {...}}
        wal.prev.jsonl  log rotated out while a background snapshot is written
        wal.jsonl       one JSON object per committed transaction

A WAL line is ``{"ops": [[table, key, value_or_null], ...]}``. ``null`` deletes.
Table values are the records' wire dicts. Replaying a line sets the listed keys,
so recovery is idempotent: snapshot, then wal.prev.jsonl, then wal.jsonl.
A torn final line (crash mid-write) is dropped.
Every commit is written with a single ``write`` call and flushed to the OS
before the call returns; ``fsync=True`` adds a disk barrier.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from pathlib import Path
from typing import Any, Callable, Iterable

from ..domain import (
    ActivityRecord,
    PredictionJob,
    PredictionRecord,
    ProfileRecord,
    UserRecord,
    now_ms,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
# global ids carry the shard index in their low bits
SHARD_ID_BITS = 64
TABLES = ("users", "profiles", "activities", "predictions", "jobs", "verifications", "resets", "meta",
          "email_claims")


class StoreError(Exception):
    pass


class NotFound(StoreError, LookupError):
    pass


class DuplicateKey(StoreError):
    pass


class InvalidRange(StoreError, ValueError):
    pass


class WrongShard(StoreError):
    pass


def global_id(local_id: int, shard_index: int) -> int:
    return local_id * SHARD_ID_BITS + shard_index


def shard_of_id(gid: int) -> int:
    return gid % SHARD_ID_BITS


_DECODERS: dict[str, Callable[[Any], Any]] = {
    "users": UserRecord.from_dict,
    "profiles": ProfileRecord.from_dict,
    "activities": ActivityRecord.from_dict,
    "predictions": PredictionRecord.from_dict,
    "jobs": PredictionJob.from_dict,
    "verifications": lambda v: v,
    "resets": lambda v: v,
    "meta": lambda v: v,
    "email_claims": int,
}


def _key(table: str, raw: Any) -> Any:
    # JSON object keys are strings; every table but jobs/meta is int-keyed
    if table in ("jobs", "meta", "email_claims"):
        return raw
    return int(raw)


def _encode(value: Any) -> Any:
    return value.to_dict() if hasattr(value, "to_dict") else value


class ShardStore:
    """All tables of one shard.

    Writes are serialized by one lock per shard; reads go straight to the
    in-memory tables. ``owns`` (optional) rejects records whose user does not
    route to this shard. ``read_only`` opens the files for inspection
    without repairing or appending to them, so it is safe next to a live writer.
    """

    def __init__(self, shard_index: int, data_dir: str | os.PathLike[str], *,
                 owns: Callable[[int], bool] | None = None, fsync: bool = False,
                 snapshot_every: int = 100_000, read_only: bool = False):
        self.shard_index = shard_index
        self.data_dir = Path(data_dir)
        self.read_only = read_only
        if not read_only:
            self.data_dir.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.snapshot_every = snapshot_every
        self._owns = owns
        self._lock = threading.RLock()
        self.users: dict[int, UserRecord] = {}
        self.profiles: dict[int, ProfileRecord] = {}
        self.activities: dict[int, ActivityRecord] = {}
        self.predictions: dict[int, PredictionRecord] = {}
        self.jobs: dict[str, PredictionJob] = {}
        self.verifications: dict[int, str] = {}
        self.resets: dict[int, str] = {}
        self.meta: dict[str, Any] = {}
        # deployment-wide email reservations; only the directory shard holds any
        self.email_claims: dict[str, int] = {}
        self._emails: dict[str, int] = {}
        self._user_activities: dict[int, dict[int, None]] = {}
        self._user_predictions: dict[int, dict[int, None]] = {}
        self._wal_lines = 0
        self._fd = -1
        self._snapshotter: threading.Thread | None = None
        self._recover()

    # -- persistence ------------------------------------------------------

    @property
    def wal_path(self) -> Path:
        return self.data_dir / "wal.jsonl"

    @property
    def prev_wal_path(self) -> Path:
        return self.data_dir / "wal.prev.jsonl"

    @property
    def snapshot_path(self) -> Path:
        return self.data_dir / "snapshot.json"

    def _table(self, name: str) -> dict:
        return getattr(self, name)

    def _recover(self) -> None:
        if self.snapshot_path.exists():
            snap = json.loads(self.snapshot_path.read_text())
            if snap.get("format") != FORMAT_VERSION:
                raise StoreError(f"unsupported snapshot format {snap.get('format')}")
            for table, rows in snap["tables"].items():
                decode = _DECODERS[table]
                target = self._table(table)
                for k, v in rows.items():
                    target[_key(table, k)] = decode(v)
        if self.prev_wal_path.exists():
            self._replay(self.prev_wal_path)
        if self.wal_path.exists():
            good_bytes = self._replay(self.wal_path)
            if good_bytes != self.wal_path.stat().st_size and not self.read_only:
                os.truncate(self.wal_path, good_bytes)
        self._rebuild_indexes()
        if self.read_only:
            return
        self._fd = os.open(self.wal_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        if self.prev_wal_path.exists():
            # a background snapshot did not finish; fold both logs into a fresh one
            self.snapshot()

    def _replay(self, path: Path) -> int:
        """Apply every complete line of ``path``; returns the good byte count."""
        good_bytes = 0
        with open(path, "rb") as fh:
            for raw in fh:
                if not raw.endswith(b"\n"):
                    log.warning("shard %d: dropping torn WAL tail", self.shard_index)
                    break
                try:
                    entry = json.loads(raw)
                except ValueError:
                    log.warning("shard %d: dropping corrupt WAL tail", self.shard_index)
                    break
                self._apply(entry["ops"])
                good_bytes += len(raw)
                self._wal_lines += 1
        return good_bytes

    def _apply(self, ops: Iterable[list]) -> None:
        for table, k, v in ops:
            target = self._table(table)
            key = _key(table, k)
            if v is None:
                target.pop(key, None)
            else:
                target[key] = _DECODERS[table](v)

    def _rebuild_indexes(self) -> None:
        self._emails = {u.email: uid for uid, u in self.users.items()}
        self._user_activities = {}
        for aid, a in self.activities.items():
            self._user_activities.setdefault(a.user_id, {})[aid] = None
        self._user_predictions = {}
        for pid, p in self.predictions.items():
            self._user_predictions.setdefault(p.user_id, {})[pid] = None

    def _commit(self, ops: list[tuple[str, Any, Any]]) -> None:
        """Log then apply. Caller holds the write lock."""
        if self.read_only:
            raise StoreError(f"shard {self.shard_index} is open read-only")
        line = json.dumps({"ops": [[t, k, _encode(v)] for t, k, v in ops]},
                          separators=(",", ":")).encode() + b"\n"
        os.write(self._fd, line)
        if self.fsync:
            os.fsync(self._fd)
        self._wal_lines += 1
        for table, k, v in ops:
            target = self._table(table)
            if v is None:
                target.pop(k, None)
            else:
                target[k] = v
        if self._wal_lines >= self.snapshot_every and self._snapshotter is None:
            tables = self._rotate()
            self._snapshotter = threading.Thread(
                target=self._write_snapshot, args=(tables, True),
                name=f"snapshot-{self.shard_index}", daemon=True)
            self._snapshotter.start()

    def _rotate(self) -> dict[str, dict]:
        """Freeze the tables and move the live log aside. Caller holds the lock.

        Records are immutable, so shallow table copies stay consistent while
        the snapshot is encoded off the write path.
        """
        tables = {name: dict(self._table(name)) for name in TABLES}
        os.close(self._fd)
        if self.prev_wal_path.exists():
            # an earlier snapshot failed; its log must stay ahead of this one
            with open(self.prev_wal_path, "ab") as dst, open(self.wal_path, "rb") as src:
                dst.write(src.read())
            os.unlink(self.wal_path)
        else:
            os.replace(self.wal_path, self.prev_wal_path)
        self._fd = os.open(self.wal_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        self._wal_lines = 0
        return tables

    def _write_snapshot(self, tables: dict[str, dict], background: bool = False) -> None:
        try:
            body = {"format": FORMAT_VERSION, "shard_index": self.shard_index,
                    "tables": {name: {str(k): _encode(v) for k, v in rows.items()}
                               for name, rows in tables.items()}}
            tmp = self.snapshot_path.with_suffix(".tmp")
            with open(tmp, "w") as fh:
                json.dump(body, fh, separators=(",", ":"))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.snapshot_path)
            os.unlink(self.prev_wal_path)
        except Exception:
            if not background:
                raise
            log.exception("shard %d: background snapshot failed", self.shard_index)
        finally:
            if background:
                self._snapshotter = None

    def _wait_snapshot(self) -> None:
        t = self._snapshotter
        if t is not None:
            t.join()

    def snapshot(self) -> None:
        """Write a full snapshot and empty the WAL. Returns once it is on disk."""
        if self.read_only:
            raise StoreError(f"shard {self.shard_index} is open read-only")
        self._wait_snapshot()
        with self._lock:
            self._wait_snapshot()
            self._write_snapshot(self._rotate())

    def close(self) -> None:
        self._wait_snapshot()
        with self._lock:
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1

    def _check_owner(self, user_id: int) -> None:
        if self._owns is not None and not self._owns(user_id):
            raise WrongShard(f"user {user_id} does not belong on shard {self.shard_index}")

    def _next_local(self, counter: str) -> int:
        return int(self.meta.get(counter, 0)) + 1

    # -- users ------------------------------------------------------------

    def user_count(self) -> int:
        return len(self.users)

    def next_user_id(self) -> int:
        """Deployment-wide user id sequence; only the directory shard (0) is asked."""
        with self._lock:
            nid = self._next_local("next_user_id")
            self._commit([("meta", "next_user_id", nid)])
            return nid

    def peek_user_id(self) -> int:
        return int(self.meta.get("next_user_id", 0))

    def claim_email(self, email: str, user_id: int) -> None:
        """Reserve ``email`` for ``user_id`` on the directory shard. Idempotent per owner."""
        with self._lock:
            owner = self.email_claims.get(email)
            if owner is not None and owner != user_id:
                raise DuplicateKey(f"email {email} taken")
            if owner is None:
                self._commit([("email_claims", email, user_id)])

    def release_email(self, email: str, user_id: int) -> None:
        with self._lock:
            if self.email_claims.get(email) == user_id:
                self._commit([("email_claims", email, None)])

    def create_user(self, user: UserRecord) -> UserRecord:
        self._check_owner(user.id)
        with self._lock:
            if user.id in self.users:
                raise DuplicateKey(f"user {user.id} exists")
            if user.email in self._emails:
                raise DuplicateKey(f"email {user.email} taken")
            self._commit([("users", user.id, user)])
            self._emails[user.email] = user.id
            return user

    def get_user(self, user_id: int) -> UserRecord:
        try:
            return self.users[user_id]
        except KeyError:
            raise NotFound(f"user {user_id}") from None

    def find_user_by_email(self, email: str) -> UserRecord | None:
        uid = self._emails.get(email)
        return self.users.get(uid) if uid is not None else None

    def update_user(self, user: UserRecord) -> UserRecord:
        with self._lock:
            old = self.get_user(user.id)
            if user.email != old.email:
                if user.email in self._emails:
                    raise DuplicateKey(f"email {user.email} taken")
            self._commit([("users", user.id, user)])
            if user.email != old.email:
                del self._emails[old.email]
                self._emails[user.email] = user.id
            return user

    def delete_user(self, user_id: int) -> None:
        with self._lock:
            user = self.get_user(user_id)
            ops: list[tuple[str, Any, Any]] = [("users", user_id, None), ("profiles", user_id, None)]
            ops += [("activities", a, None) for a in self._user_activities.get(user_id, {})]
            ops += [("predictions", p, None) for p in self._user_predictions.get(user_id, {})]
            ops += [("jobs", c, None) for c, j in self.jobs.items() if j.user_id == user_id]
            self._commit(ops)
            del self._emails[user.email]
            self._user_activities.pop(user_id, None)
            self._user_predictions.pop(user_id, None)

    def set_code(self, kind: str, user_id: int, code: str | None) -> None:
        if kind not in ("verifications", "resets"):
            raise ValueError(kind)
        with self._lock:
            self.get_user(user_id)
            self._commit([(kind, user_id, code)])

    def get_code(self, kind: str, user_id: int) -> str | None:
        if kind not in ("verifications", "resets"):
            raise ValueError(kind)
        return self._table(kind).get(user_id)

    # -- profiles ---------------------------------------------------------

    def create_profile(self, profile: ProfileRecord) -> ProfileRecord:
        self._check_owner(profile.user_id)
        with self._lock:
            self.get_user(profile.user_id)
            if profile.user_id in self.profiles:
                raise DuplicateKey(f"profile for user {profile.user_id} exists")
            self._commit([("profiles", profile.user_id, profile)])
            return profile

    def get_profile(self, user_id: int) -> ProfileRecord:
        try:
            return self.profiles[user_id]
        except KeyError:
            raise NotFound(f"profile for user {user_id}") from None

    def update_profile(self, profile: ProfileRecord) -> ProfileRecord:
        with self._lock:
            self.get_profile(profile.user_id)
            self._commit([("profiles", profile.user_id, profile)])
            return profile

    def delete_profile(self, user_id: int) -> None:
        with self._lock:
            self.get_profile(user_id)
            self._commit([("profiles", user_id, None)])

    # -- activities -------------------------------------------------------

    def create_activity(self, user_id: int, kind: str, quantity: int,
                        recorded_at: int | None = None) -> ActivityRecord:
        self._check_owner(user_id)
        with self._lock:
            self.get_user(user_id)
            local = self._next_local("next_activity")
            rec = ActivityRecord(global_id(local, self.shard_index), user_id, kind, quantity,
                                 recorded_at if recorded_at is not None else now_ms())
            self._commit([("meta", "next_activity", local), ("activities", rec.activity_id, rec)])
            self._user_activities.setdefault(user_id, {})[rec.activity_id] = None
            return rec

    def get_activity(self, activity_id: int) -> ActivityRecord:
        try:
            return self.activities[activity_id]
        except KeyError:
            raise NotFound(f"activity {activity_id}") from None

    def update_activity(self, rec: ActivityRecord) -> ActivityRecord:
        with self._lock:
            old = self.get_activity(rec.activity_id)
            if old.user_id != rec.user_id:
                raise NotFound(f"activity {rec.activity_id}")
            self._commit([("activities", rec.activity_id, rec)])
            return rec

    def delete_activity(self, activity_id: int, user_id: int | None = None) -> None:
        with self._lock:
            rec = self.get_activity(activity_id)
            if user_id is not None and rec.user_id != user_id:
                raise NotFound(f"activity {activity_id}")
            self._commit([("activities", activity_id, None)])
            self._user_activities.get(rec.user_id, {}).pop(activity_id, None)

    def list_activities(self, user_id: int, kind: str | None = None, offset: int = 0,
                        limit: int | None = None) -> tuple[list[ActivityRecord], int]:
        """Newest first (ties broken by id, newest first). Returns (page, total)."""
        if user_id not in self.users:
            raise NotFound(f"user {user_id}")
        ids = list(self._user_activities.get(user_id, ()))
        recs = [self.activities[i] for i in ids if i in self.activities]
        if kind is not None:
            recs = [r for r in recs if r.kind == kind]
        recs.sort(key=lambda r: (r.recorded_at, r.activity_id), reverse=True)
        total = len(recs)
        end = None if limit is None else offset + limit
        return recs[offset:end], total

    def count_activities(self, user_id: int, kind: str | None = None) -> int:
        return self.list_activities(user_id, kind, 0, 0)[1]

    def latest_activities(self, user_id: int) -> dict[str, ActivityRecord]:
        page, _ = self.list_activities(user_id)
        latest: dict[str, ActivityRecord] = {}
        for rec in page:
            latest.setdefault(rec.kind, rec)
        return latest

    # -- predictions ------------------------------------------------------

    def _prediction_ops(self, rec: PredictionRecord) -> tuple[PredictionRecord, list]:
        local = self._next_local("next_prediction")
        stored = PredictionRecord(
            prediction_id=global_id(local, self.shard_index),
            user_id=rec.user_id,
            created_at=rec.created_at,
            updated_at=rec.updated_at,
            model_version=rec.model_version,
            risk_score=rec.risk_score,
            factors=rec.factors,
        )
        return stored, [("meta", "next_prediction", local), ("predictions", stored.prediction_id, stored)]

    def create_prediction(self, rec: PredictionRecord) -> PredictionRecord:
        self._check_owner(rec.user_id)
        with self._lock:
            self.get_user(rec.user_id)
            stored, ops = self._prediction_ops(rec)
            self._commit(ops)
            self._user_predictions.setdefault(rec.user_id, {})[stored.prediction_id] = None
            return stored

    def get_prediction(self, prediction_id: int) -> PredictionRecord:
        try:
            return self.predictions[prediction_id]
        except KeyError:
            raise NotFound(f"prediction {prediction_id}") from None

    def delete_prediction(self, prediction_id: int, user_id: int | None = None) -> None:
        with self._lock:
            rec = self.get_prediction(prediction_id)
            if user_id is not None and rec.user_id != user_id:
                raise NotFound(f"prediction {prediction_id}")
            self._commit([("predictions", prediction_id, None)])
            self._user_predictions.get(rec.user_id, {}).pop(prediction_id, None)

    def list_predictions(self, user_id: int, offset: int = 0,
                         limit: int | None = None) -> tuple[list[PredictionRecord], int]:
        if user_id not in self.users:
            raise NotFound(f"user {user_id}")
        recs = [self.predictions[i] for i in list(self._user_predictions.get(user_id, ()))
                if i in self.predictions]
        recs.sort(key=lambda r: (r.created_at, r.prediction_id), reverse=True)
        end = None if limit is None else offset + limit
        return recs[offset:end], len(recs)

    def get_predictions_by_date(self, user_id: int, start: int, end: int) -> list[PredictionRecord]:
        if start > end:
            raise InvalidRange(f"from {start} > to {end}")
        recs, _ = self.list_predictions(user_id)
        return [r for r in recs if start <= r.created_at <= end]

    # -- jobs -------------------------------------------------------------

    def create_job(self, job: PredictionJob) -> PredictionJob:
        self._check_owner(job.user_id)
        with self._lock:
            if job.correlation_id in self.jobs:
                raise DuplicateKey(f"job {job.correlation_id} exists")
            self._commit([("jobs", job.correlation_id, job)])
            return job

    def get_job(self, correlation_id: str) -> PredictionJob:
        try:
            return self.jobs[correlation_id]
        except KeyError:
            raise NotFound(f"job {correlation_id}") from None

    def find_job(self, correlation_id: str) -> PredictionJob | None:
        return self.jobs.get(correlation_id)

    def mark_job_processing(self, correlation_id: str) -> PredictionJob:
        """No-op unless the job is still pending."""
        with self._lock:
            job = self.get_job(correlation_id)
            if job.status != "pending":
                return job
            job = job.advance("processing")
            self._commit([("jobs", correlation_id, job)])
            return job

    def complete_job(self, correlation_id: str, result: PredictionRecord,
                     at: int | None = None) -> tuple[PredictionJob, bool]:
        """Store the result and finish the job in one transaction.

        Returns ``(job, applied)``; a job that already finished is left alone,
        which absorbs duplicate deliveries.
        """
        with self._lock:
            job = self.get_job(correlation_id)
            if job.status in ("completed", "failed"):
                return job, False
            if result.user_id != job.user_id:
                raise WrongShard(f"result for user {result.user_id} on job of user {job.user_id}")
            if job.status == "pending":
                job = job.advance("processing")
            stored, ops = self._prediction_ops(result)
            job = job.advance("completed", at=at, result=stored)
            self._commit(ops + [("jobs", correlation_id, job)])
            self._user_predictions.setdefault(stored.user_id, {})[stored.prediction_id] = None
            return job, True

    def fail_job(self, correlation_id: str, detail: str) -> tuple[PredictionJob, bool]:
        with self._lock:
            job = self.get_job(correlation_id)
            if job.status in ("completed", "failed"):
                return job, False
            if job.status == "pending":
                job = job.advance("processing")
            job = job.advance("failed", error_detail=detail)
            self._commit([("jobs", correlation_id, job)])
            return job, True

    def job_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in ("pending", "processing", "completed", "failed")}
        for job in list(self.jobs.values()):
            counts[job.status] += 1
        return counts

    # -- inspection -------------------------------------------------------

    def scan_user_ids(self) -> Iterable[tuple[str, int]]:
        """(table, user_id) for every stored record, for placement audits."""
        for table in ("users", "profiles", "activities", "predictions", "jobs"):
            for rec in list(self._table(table).values()):
                uid = rec.id if table == "users" else rec.user_id
                yield table, uid
