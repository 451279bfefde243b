"""Stateless back-end HTTP service.

Any instance can serve any request: all durable state lives on the shards and
in the broker, and the only per-instance state is the what-if cache and the
metrics counters. Routes::

    POST /auth/register  POST /auth/login  POST /auth/verify  POST /auth/reset-password
    GET|PUT|PATCH /users/me
    GET|POST|PUT|DELETE /users/me/profile
    GET /activities  GET /activities/count  POST /activities
    GET|PUT|DELETE /activities/{id}
    GET /predictions  GET /predictions/by-date?from=&to=  POST /predictions
    GET /predictions/jobs/{correlation_id}/status  GET /predictions/jobs/{correlation_id}/result
    DELETE /predictions/{id}  POST /predictions/what-if
    GET /healthz  GET /metrics

Protected routes take ``Authorization: Bearer <token>``.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import hmac
import json
import logging
import secrets
import time
from collections import defaultdict
from dataclasses import replace
from typing import Any, Awaitable, Callable, Mapping

from aiohttp import web

from .broker import BrokerError, request_response
from .cache import TTLCache, what_if_key
from .domain import (
    PROFILE_FLAGS,
    PROFILE_RANGES,
    PredictionJob,
    PredictionRecord,
    UserRecord,
    ValidationError,
    new_correlation_id,
    now_ms,
    validate_activity,
    validate_profile,
)
from .predictor import Overloaded, PredictorClient, normalize
from .shard_router import ShardRouter, StoreUnavailable, UnmappedId
from .store import DuplicateKey, InvalidRange, NotFound, PoolClosed, PoolTimeout, StoreError

log = logging.getLogger(__name__)

DEFAULT_PAGE = 50
MAX_PAGE = 500


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, **extra: Any):
        self.status = status
        self.code = code
        self.message = message
        self.extra = extra
        super().__init__(message)

    def response(self) -> web.Response:
        body = {"code": self.code, "message": self.message, **self.extra}
        return web.json_response(body, status=self.status)


# -- credentials ---------------------------------------------------------


def hash_password(password: str, iterations: int = 1000, salt: bytes | None = None) -> str:
    salt = salt or secrets.token_bytes(16)
    dk = hashlib.pbkdf2_hmac("sha256", password.encode(), salt, iterations)
    return f"pbkdf2_sha256${iterations}${salt.hex()}${dk.hex()}"


def check_password(password: str, encoded: str) -> bool:
    try:
        algo, iters, salt, digest = encoded.split("$")
    except ValueError:
        return False
    if algo != "pbkdf2_sha256":
        return False
    dk = hashlib.pbkdf2_hmac("sha256", password.encode(), bytes.fromhex(salt), int(iters))
    return hmac.compare_digest(dk.hex(), digest)


class TokenSigner:
    """``<user_id>.<expires_s>.<hmac>`` tokens; any instance with the secret can check them."""

    def __init__(self, secret: str, ttl_s: int = 86_400, clock: Callable[[], float] = time.time):
        self._key = secret.encode()
        self.ttl_s = ttl_s
        self.clock = clock

    def _sig(self, msg: str) -> str:
        mac = hmac.new(self._key, msg.encode(), hashlib.sha256).digest()
        return base64.urlsafe_b64encode(mac).decode().rstrip("=")

    def issue(self, user_id: int) -> tuple[str, int]:
        exp = int(self.clock()) + self.ttl_s
        msg = f"{user_id}.{exp}"
        return f"{msg}.{self._sig(msg)}", exp

    def verify(self, token: str) -> int | None:
        try:
            uid, exp, sig = token.split(".")
            uid_i, exp_i = int(uid), int(exp)
        except ValueError:
            return None
        if not hmac.compare_digest(sig, self._sig(f"{uid}.{exp}")):
            return None
        if self.clock() >= exp_i:
            return None
        return uid_i


# -- shard set -----------------------------------------------------------


class ShardSet:
    """Shard clients by index; ``factory`` supplies shards that appear after auto-extension."""

    def __init__(self, shards: Mapping[int, Any], factory: Callable[[int], Any] | None = None):
        self._shards = dict(shards)
        self._factory = factory

    def __getitem__(self, index: int) -> Any:
        shard = self._shards.get(index)
        if shard is None:
            if self._factory is None:
                raise StoreUnavailable(index, "no shard configured")
            shard = self._shards[index] = self._factory(index)
        return shard

    def __contains__(self, index: int) -> bool:
        return index in self._shards

    def items(self):
        return sorted(self._shards.items())

    def values(self):
        return [s for _, s in self.items()]


# -- metrics -------------------------------------------------------------


class Metrics:
    def __init__(self):
        self.requests: dict[str, int] = defaultdict(int)
        self.server_errors: dict[str, int] = defaultdict(int)
        self.client_errors: dict[str, int] = defaultdict(int)
        self.latency_ms: dict[str, float] = defaultdict(float)
        self.started = time.time()

    def record(self, route: str, status: int, elapsed_ms: float) -> None:
        self.requests[route] += 1
        self.latency_ms[route] += elapsed_ms
        if status >= 500:
            self.server_errors[route] += 1
        elif status >= 400:
            self.client_errors[route] += 1

    def snapshot(self) -> dict[str, Any]:
        return {
            route: {
                "requests": n,
                "server_errors": self.server_errors[route],
                "client_errors": self.client_errors[route],
                "avg_latency_ms": self.latency_ms[route] / n if n else 0.0,
            }
            for route, n in sorted(self.requests.items())
        }


# -- service -------------------------------------------------------------


async def _json_body(request: web.Request) -> dict[str, Any]:
    if not request.can_read_body:
        return {}
    try:
        body = await request.json()
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ApiError(400, "bad_json", "request body is not valid JSON") from None
    if not isinstance(body, dict):
        raise ApiError(400, "bad_json", "request body must be a JSON object")
    return body


def _int_param(request: web.Request, name: str, default: int | None = None,
               lo: int | None = None, hi: int | None = None) -> int:
    raw = request.query.get(name)
    if raw is None:
        if default is None:
            raise ApiError(422, "missing_parameter", f"query parameter '{name}' is required")
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ApiError(422, "bad_parameter", f"'{name}' must be an integer") from None
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise ApiError(422, "bad_parameter", f"'{name}' out of range [{lo}, {hi}]")
    return value


def _path_int(request: web.Request, name: str) -> int:
    try:
        return int(request.match_info[name])
    except ValueError:
        raise ApiError(404, "not_found", f"no such {name}") from None


def _profile_fields(profile: Any) -> dict[str, Any]:
    d = profile.to_dict()
    d.pop("updated_at", None)
    return d


class BackendService:
    def __init__(self, *, name: str, router: ShardRouter, shards: ShardSet, broker: Any,
                 predictors: PredictorClient | None, prediction_mode: str = "async",
                 cache: TTLCache | None = None, signer: TokenSigner,
                 password_iterations: int = 1000, cache_ttl: float | None = None):
        self.name = name
        self.router = router
        self.shards = shards
        self.broker = broker
        self.predictors = predictors
        self.prediction_mode = prediction_mode
        self.cache: TTLCache[PredictionRecord] = cache if cache is not None else TTLCache()
        self.cache_ttl = cache_ttl
        self.signer = signer
        self.password_iterations = password_iterations
        self.metrics = Metrics()

    # -- plumbing ---------------------------------------------------------

    def shard_for(self, user_id: int) -> Any:
        try:
            return self.shards[self.router.route(user_id)]
        except UnmappedId:
            raise ApiError(503, "unmapped_user", f"user {user_id} is outside every shard range") from None

    async def scatter(self, op: str, *args: Any) -> list[Any]:
        indexes = self.router.map.shard_indexes
        return await asyncio.gather(*(self.shards[i].call(op, *args) for i in indexes))

    @property
    def directory(self) -> Any:
        """The shard holding the user id sequence and email reservations."""
        return self.shards[self.router.map.entries[0].shard_index]

    async def claim_email(self, email: str, uid: int) -> None:
        try:
            await self.directory.call("claim_email", email, uid)
        except DuplicateKey:
            raise ApiError(409, "email_taken", "email already registered") from None

    async def find_by_email(self, email: str) -> UserRecord | None:
        for found in await self.scatter("find_user_by_email", email):
            if found is not None:
                return found
        return None

    def authenticate(self, request: web.Request) -> int:
        header = request.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            raise ApiError(401, "unauthorized", "missing bearer token")
        uid = self.signer.verify(header[7:].strip())
        if uid is None:
            raise ApiError(401, "unauthorized", "invalid or expired token")
        return uid

    # -- auth -------------------------------------------------------------

    async def register(self, request: web.Request) -> web.Response:
        body = await _json_body(request)
        email = str(body.get("email", "")).strip().lower()
        password = body.get("password")
        if "@" not in email or not isinstance(password, str) or not password:
            raise ApiError(422, "validation_error", "email and password are required")
        display_name = str(body.get("display_name") or email.split("@")[0])
        if await self.find_by_email(email) is not None:
            raise ApiError(409, "email_taken", "email already registered")
        uid = await self.directory.call("next_user_id")
        # the claim is the atomic step; a racing registration loses here and leaves a gap in the ids
        await self.claim_email(email, uid)
        user = UserRecord(uid, email, hash_password(password, self.password_iterations),
                          display_name, False, now_ms())
        shard = self.shard_for(uid)
        try:
            await shard.call("create_user", user)
        except BaseException:
            await self.directory.call("release_email", email, uid)
            raise
        code = f"{secrets.randbelow(10**6):06d}"
        await shard.call("set_code", "verifications", uid, code)
        # no mail is sent; the code is handed back directly
        return web.json_response({"user_id": uid, "email": email, "verification_code": code}, status=201)

    async def verify(self, request: web.Request) -> web.Response:
        body = await _json_body(request)
        user = await self.find_by_email(str(body.get("email", "")).strip().lower())
        if user is None:
            raise ApiError(404, "not_found", "unknown email")
        shard = self.shard_for(user.id)
        expected = await shard.call("get_code", "verifications", user.id)
        if user.verified:
            return web.json_response({"user_id": user.id, "verified": True})
        if expected is None or not hmac.compare_digest(str(body.get("code", "")), expected):
            raise ApiError(422, "bad_code", "verification code does not match")
        await shard.call("update_user", replace(user, verified=True))
        await shard.call("set_code", "verifications", user.id, None)
        return web.json_response({"user_id": user.id, "verified": True})

    async def login(self, request: web.Request) -> web.Response:
        body = await _json_body(request)
        user = await self.find_by_email(str(body.get("email", "")).strip().lower())
        password = body.get("password")
        if user is None or not isinstance(password, str) or not check_password(password, user.password_hash):
            raise ApiError(401, "bad_credentials", "wrong email or password")
        if not user.verified:
            raise ApiError(403, "unverified", "verify the account before logging in")
        token, exp = self.signer.issue(user.id)
        return web.json_response({"token": token, "user_id": user.id, "expires_at": exp})

    async def reset_password(self, request: web.Request) -> web.Response:
        body = await _json_body(request)
        user = await self.find_by_email(str(body.get("email", "")).strip().lower())
        if user is None:
            raise ApiError(404, "not_found", "unknown email")
        shard = self.shard_for(user.id)
        if "code" not in body:
            code = secrets.token_hex(8)
            await shard.call("set_code", "resets", user.id, code)
            return web.json_response({"user_id": user.id, "reset_code": code}, status=202)
        new_password = body.get("new_password")
        expected = await shard.call("get_code", "resets", user.id)
        if expected is None or not hmac.compare_digest(str(body["code"]), expected):
            raise ApiError(422, "bad_code", "reset code does not match")
        if not isinstance(new_password, str) or not new_password:
            raise ApiError(422, "validation_error", "new_password is required")
        await shard.call("update_user", replace(
            user, password_hash=hash_password(new_password, self.password_iterations)))
        await shard.call("set_code", "resets", user.id, None)
        return web.json_response({"user_id": user.id, "reset": True})

    # -- users ------------------------------------------------------------

    async def get_me(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        user = await self.shard_for(uid).call("get_user", uid)
        return web.json_response(user.public())

    async def _change_me(self, request: web.Request, full: bool) -> web.Response:
        uid = self.authenticate(request)
        body = await _json_body(request)
        allowed = {"email", "display_name"}
        unknown = set(body) - allowed
        if unknown:
            raise ApiError(422, "validation_error", f"unknown fields {sorted(unknown)}")
        if full and set(body) != allowed:
            raise ApiError(422, "validation_error", "PUT needs email and display_name")
        shard = self.shard_for(uid)
        user = await shard.call("get_user", uid)
        changes: dict[str, Any] = {}
        if "display_name" in body:
            if not isinstance(body["display_name"], str) or not body["display_name"].strip():
                raise ApiError(422, "validation_error", "display_name must be a non-empty string")
            changes["display_name"] = body["display_name"].strip()
        if "email" in body:
            email = str(body["email"]).strip().lower()
            if "@" not in email:
                raise ApiError(422, "validation_error", "invalid email")
            if email != user.email:
                if await self.find_by_email(email) is not None:
                    raise ApiError(409, "email_taken", "email already registered")
                await self.claim_email(email, uid)
            changes["email"] = email
        old_email = user.email
        try:
            user = await shard.call("update_user", replace(user, **changes))
        except BaseException:
            if changes.get("email", old_email) != old_email:
                await self.directory.call("release_email", changes["email"], uid)
            raise
        if user.email != old_email:
            await self.directory.call("release_email", old_email, uid)
        return web.json_response(user.public())

    async def put_me(self, request: web.Request) -> web.Response:
        return await self._change_me(request, full=True)

    async def patch_me(self, request: web.Request) -> web.Response:
        return await self._change_me(request, full=False)

    # -- profile ----------------------------------------------------------

    async def get_profile(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        profile = await self.shard_for(uid).call("get_profile", uid)
        return web.json_response(profile.to_dict())

    async def post_profile(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        profile = validate_profile(await _json_body(request), user_id=uid)
        try:
            await self.shard_for(uid).call("create_profile", profile)
        except DuplicateKey:
            raise ApiError(409, "profile_exists", "profile already exists; use PUT") from None
        self.cache.invalidate(uid)
        return web.json_response(profile.to_dict(), status=201)

    async def put_profile(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        profile = validate_profile(await _json_body(request), user_id=uid)
        await self.shard_for(uid).call("update_profile", profile)
        self.cache.invalidate(uid)
        return web.json_response(profile.to_dict())

    async def delete_profile(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        await self.shard_for(uid).call("delete_profile", uid)
        self.cache.invalidate(uid)
        return web.Response(status=204)

    # -- activities -------------------------------------------------------

    def _kind_filter(self, request: web.Request) -> str | None:
        kind = request.query.get("kind")
        if kind is not None and kind not in ("smoking", "exercise"):
            raise ApiError(422, "bad_parameter", "kind must be smoking or exercise")
        return kind

    async def list_activities(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        kind = self._kind_filter(request)
        offset = _int_param(request, "offset", 0, lo=0)
        limit = _int_param(request, "limit", DEFAULT_PAGE, lo=0, hi=MAX_PAGE)
        items, total = await self.shard_for(uid).call("list_activities", uid, kind, offset, limit)
        return web.json_response({"items": [a.to_dict() for a in items], "total": total,
                                  "offset": offset, "limit": limit})

    async def count_activities(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        n = await self.shard_for(uid).call("count_activities", uid, self._kind_filter(request))
        return web.json_response({"count": n})

    async def _own_activity(self, uid: int, activity_id: int) -> Any:
        try:
            rec = await self.shard_for(uid).call("get_activity", activity_id)
        except NotFound:
            rec = None
        if rec is None or rec.user_id != uid:
            raise ApiError(404, "not_found", f"activity {activity_id} not found")
        return rec

    async def get_activity(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        rec = await self._own_activity(uid, _path_int(request, "id"))
        return web.json_response(rec.to_dict())

    def _recorded_at(self, body: Mapping[str, Any], default: int) -> int:
        at = body.get("recorded_at", default)
        if isinstance(at, bool) or not isinstance(at, int) or at < 0:
            raise ValidationError([{"field": "recorded_at", "range": [0, None]}])
        return at

    async def post_activity(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        body = await _json_body(request)
        kind, qty = validate_activity(body)
        at = self._recorded_at(body, now_ms())
        rec = await self.shard_for(uid).call("create_activity", uid, kind, qty, at)
        self.cache.invalidate(uid)
        return web.json_response(rec.to_dict(), status=201)

    async def put_activity(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        old = await self._own_activity(uid, _path_int(request, "id"))
        body = await _json_body(request)
        kind, qty = validate_activity(body)
        rec = replace(old, kind=kind, quantity=qty, recorded_at=self._recorded_at(body, old.recorded_at))
        await self.shard_for(uid).call("update_activity", rec)
        self.cache.invalidate(uid)
        return web.json_response(rec.to_dict())

    async def delete_activity(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        aid = _path_int(request, "id")
        try:
            await self.shard_for(uid).call("delete_activity", aid, uid)
        except NotFound:
            raise ApiError(404, "not_found", f"activity {aid} not found") from None
        self.cache.invalidate(uid)
        return web.Response(status=204)

    # -- predictions ------------------------------------------------------

    async def list_predictions(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        offset = _int_param(request, "offset", 0, lo=0)
        limit = _int_param(request, "limit", DEFAULT_PAGE, lo=0, hi=MAX_PAGE)
        items, total = await self.shard_for(uid).call("list_predictions", uid, offset, limit)
        return web.json_response({"items": [p.to_dict() for p in items], "total": total,
                                  "offset": offset, "limit": limit})

    async def predictions_by_date(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        start = _int_param(request, "from")
        end = _int_param(request, "to")
        try:
            items = await self.shard_for(uid).call("get_predictions_by_date", uid, start, end)
        except InvalidRange as exc:
            raise ApiError(422, "invalid_range", str(exc)) from None
        return web.json_response({"items": [p.to_dict() for p in items]})

    async def _features(self, uid: int, overrides: Mapping[str, Any] | None = None):
        shard = self.shard_for(uid)
        try:
            profile = await shard.call("get_profile", uid)
        except NotFound:
            raise ApiError(409, "missing_profile", "create a profile before requesting predictions") from None
        latest = await shard.call("latest_activities", uid)
        if overrides:
            merged = {**_profile_fields(profile), **overrides}
            profile = validate_profile(merged, user_id=uid, at=profile.updated_at)
        return profile, latest, normalize(profile, latest)

    async def post_prediction(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        _, _, features = await self._features(uid)
        shard = self.shard_for(uid)
        if self.prediction_mode == "sync":
            if self.predictors is None:
                raise ApiError(503, "no_predictor", "no predictor configured")
            try:
                record = await self.predictors.predict(features, uid)
            except Overloaded as exc:
                raise ApiError(503, "predictor_overloaded", str(exc)) from None
            stored = await shard.call("create_prediction", record)
            return web.json_response(stored.to_dict(), status=201)

        cid = new_correlation_id()
        job = PredictionJob(cid, uid, "pending", now_ms())
        await shard.call("create_job", job)
        try:
            await request_response(self.broker, {"features": features.to_dict(),
                                                 "submitted_at": job.submitted_at}, uid, cid)
        except BrokerError as exc:
            await shard.call("fail_job", cid, f"publish failed: {exc}")
            raise ApiError(503, "broker_unavailable", str(exc)) from None
        return web.json_response({"correlation_id": cid, "status": "pending"}, status=202)

    async def _own_job(self, uid: int, cid: str) -> PredictionJob:
        job = await self.shard_for(uid).call("find_job", cid)
        if job is None:
            home = self.router.route(uid)
            others = [i for i in self.router.map.shard_indexes if i != home]
            found = await asyncio.gather(*(self.shards[i].call("find_job", cid) for i in others))
            if any(j is not None for j in found):
                raise ApiError(403, "forbidden", "job belongs to another user")
            raise ApiError(404, "not_found", f"job {cid} not found")
        if job.user_id != uid:
            raise ApiError(403, "forbidden", "job belongs to another user")
        return job

    async def job_status(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        job = await self._own_job(uid, request.match_info["correlation_id"])
        body: dict[str, Any] = {"correlation_id": job.correlation_id, "status": job.status,
                                "submitted_at": job.submitted_at}
        if job.completed_at is not None:
            body["completed_at"] = job.completed_at
        if job.error_detail:
            body["error_detail"] = job.error_detail
        return web.json_response(body)

    async def job_result(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        job = await self._own_job(uid, request.match_info["correlation_id"])
        if job.status != "completed" or job.result is None:
            raise ApiError(409, "job_not_completed", f"job is {job.status}", status=job.status)
        return web.json_response(job.result.to_dict())

    async def delete_prediction(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        pid = _path_int(request, "id")
        try:
            await self.shard_for(uid).call("delete_prediction", pid, uid)
        except NotFound:
            raise ApiError(404, "not_found", f"prediction {pid} not found") from None
        return web.Response(status=204)

    async def what_if(self, request: web.Request) -> web.Response:
        uid = self.authenticate(request)
        body = await _json_body(request)
        overrides = body.get("overrides", {})
        if not isinstance(overrides, dict):
            raise ApiError(422, "validation_error", "overrides must be an object")
        allowed = set(PROFILE_RANGES) | set(PROFILE_FLAGS)
        unknown = set(overrides) - allowed
        if unknown:
            raise ApiError(422, "validation_error", f"unknown profile fields {sorted(unknown)}")
        profile, latest, features = await self._features(uid, overrides)
        if self.predictors is None:
            raise ApiError(503, "no_predictor", "no predictor configured")
        hypothetical = {
            "profile": _profile_fields(profile),
            "activities": {k: a.quantity for k, a in sorted(latest.items())},
        }

        async def compute() -> PredictionRecord:
            try:
                return await self.predictors.predict(features, uid)
            except Overloaded as exc:
                raise ApiError(503, "predictor_overloaded", str(exc)) from None

        record, hit = await self.cache.get_or_compute(what_if_key(uid, hypothetical), compute,
                                                      self.cache_ttl)
        return web.json_response(record.to_dict(), headers={"X-Cache": "HIT" if hit else "MISS"})

    # -- async replies ----------------------------------------------------

    async def on_processing(self, user_id: int, cid: str) -> None:
        try:
            await self.shard_for(user_id).call("mark_job_processing", cid)
        except NotFound:
            log.warning("processing notice for unknown job %s", cid)

    async def on_result(self, user_id: int, cid: str, record: dict[str, Any]) -> None:
        try:
            await self.shard_for(user_id).call("complete_job", cid, PredictionRecord.from_dict(record))
        except NotFound:
            log.warning("result for unknown job %s dropped", cid)

    async def on_failed(self, user_id: int, cid: str, detail: str) -> None:
        try:
            await self.shard_for(user_id).call("fail_job", cid, detail)
        except NotFound:
            log.warning("failure for unknown job %s dropped", cid)

    # -- ops --------------------------------------------------------------

    async def healthz(self, request: web.Request) -> web.Response:
        return web.json_response({"status": "ok", "instance": self.name, "mode": self.prediction_mode})

    async def metrics_route(self, request: web.Request) -> web.Response:
        body: dict[str, Any] = {
            "instance": self.name,
            "routes": self.metrics.snapshot(),
            "cache": self.cache.stats(),
        }
        pools = []
        for _, shard in self.shards.items():
            pool = getattr(shard, "pool", None)
            if pool is not None:
                pools.append(pool.stats())
        if pools:
            body["pools"] = pools
        jobs = {s: 0 for s in ("pending", "processing", "completed", "failed")}
        for counts in await self.scatter("job_counts"):
            for status, n in counts.items():
                jobs[status] += n
        body["jobs"] = jobs
        depths = getattr(self.broker, "depths", None)
        if depths is not None:
            result = depths()
            body["queues"] = await result if asyncio.iscoroutine(result) else result
        return web.json_response(body)


def _error_response(exc: BaseException) -> web.Response:
    if isinstance(exc, ApiError):
        return exc.response()
    if isinstance(exc, ValidationError):
        return web.json_response({"code": "validation_error", "message": str(exc), "errors": exc.errors},
                                 status=422)
    if isinstance(exc, NotFound):
        return web.json_response({"code": "not_found", "message": str(exc)}, status=404)
    if isinstance(exc, DuplicateKey):
        return web.json_response({"code": "conflict", "message": str(exc)}, status=409)
    if isinstance(exc, (PoolTimeout, PoolClosed, StoreUnavailable, BrokerError)):
        return web.json_response({"code": "unavailable", "message": str(exc)}, status=503)
    if isinstance(exc, StoreError):
        return web.json_response({"code": "store_error", "message": str(exc)}, status=500)
    log.exception("unhandled error", exc_info=exc)
    return web.json_response({"code": "internal", "message": "internal server error"}, status=500)


def backend_app(service: BackendService) -> web.Application:
    @web.middleware
    async def errors_and_metrics(request: web.Request,
                                 handler: Callable[[web.Request], Awaitable[web.StreamResponse]]):
        t0 = time.perf_counter()
        try:
            resp = await handler(request)
        except web.HTTPException as exc:
            resp = web.json_response({"code": "http_error", "message": exc.reason}, status=exc.status)
        except asyncio.CancelledError:
            raise
        except Exception as exc:
            resp = _error_response(exc)
        info = request.match_info.route.resource
        route = f"{request.method} {info.canonical if info is not None else request.path}"
        service.metrics.record(route, resp.status, (time.perf_counter() - t0) * 1000)
        return resp

    s = service
    app = web.Application(middlewares=[errors_and_metrics])
    r = app.router
    r.add_post("/auth/register", s.register)
    r.add_post("/auth/login", s.login)
    r.add_post("/auth/verify", s.verify)
    r.add_post("/auth/reset-password", s.reset_password)
    r.add_get("/users/me", s.get_me)
    r.add_put("/users/me", s.put_me)
    r.add_patch("/users/me", s.patch_me)
    r.add_get("/users/me/profile", s.get_profile)
    r.add_post("/users/me/profile", s.post_profile)
    r.add_put("/users/me/profile", s.put_profile)
    r.add_delete("/users/me/profile", s.delete_profile)
    r.add_get("/activities", s.list_activities)
    r.add_get("/activities/count", s.count_activities)
    r.add_post("/activities", s.post_activity)
    r.add_get(r"/activities/{id:\d+}", s.get_activity)
    r.add_put(r"/activities/{id:\d+}", s.put_activity)
    r.add_delete(r"/activities/{id:\d+}", s.delete_activity)
    r.add_get("/predictions", s.list_predictions)
    r.add_get("/predictions/by-date", s.predictions_by_date)
    r.add_post("/predictions", s.post_prediction)
    r.add_post("/predictions/what-if", s.what_if)
    r.add_get("/predictions/jobs/{correlation_id}/status", s.job_status)
    r.add_get("/predictions/jobs/{correlation_id}/result", s.job_result)
    r.add_delete(r"/predictions/{id:\d+}", s.delete_prediction)
    r.add_get("/healthz", s.healthz)
    r.add_get("/metrics", s.metrics_route)
    return app


API_ROUTES: tuple[tuple[str, str], ...] = (
    ("POST", "/auth/register"), ("POST", "/auth/login"), ("POST", "/auth/verify"),
    ("POST", "/auth/reset-password"),
    ("GET", "/users/me"), ("PUT", "/users/me"), ("PATCH", "/users/me"),
    ("GET", "/users/me/profile"), ("POST", "/users/me/profile"), ("PUT", "/users/me/profile"),
    ("DELETE", "/users/me/profile"),
    ("GET", "/activities"), ("GET", "/activities/{id}"), ("POST", "/activities"),
    ("PUT", "/activities/{id}"), ("DELETE", "/activities/{id}"), ("GET", "/activities/count"),
    ("GET", "/predictions"), ("GET", "/predictions/by-date"), ("POST", "/predictions"),
    ("GET", "/predictions/jobs/{correlation_id}/status"),
    ("GET", "/predictions/jobs/{correlation_id}/result"),
    ("DELETE", "/predictions/{id}"), ("POST", "/predictions/what-if"),
)
