"""Stand-in risk model and the inference service around it.

The trained model behind the real application is not available, so a logistic
scorer with additive per-factor contributions takes its place. It is
deterministic and each factor's contribution is exactly what it adds to the
logit:

    contribution_i = weight_i * x_i
    risk_score     = sigmoid(bias + sum(contribution_i))

The service runs the scorer behind ``worker_slots`` concurrent inference slots
and an artificial ``inference_delay`` standing in for model + explanation cost.
It answers synchronous ``POST /predict`` calls (bounded wait, then 503) and, in
queue mode, consumes prediction requests and publishes replies.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import aiohttp
from aiohttp import web

from .broker import REQUEST_QUEUE, RESPONSE_QUEUE, Broker, Envelope, RemoteBroker, Subscription, envelope_for
from .domain import FACTOR_NAMES, ActivityRecord, FactorTriple, PredictionRecord, ProfileRecord, now_ms, sigmoid

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS: dict[str, float] = {
    "age": 1.2,
    "bmi": 1.5,
    "cholesterol": 0.8,
    "hypertension": 0.9,
    "macrosomic_baby": 0.5,
    "family_history": 1.0,
    "smoking_years": 1.1,
    "smoking_habit": 0.6,
    "exercise_frequency": -0.7,
}

_LABELS = {
    "age": "Age",
    "bmi": "Body mass index",
    "cholesterol": "Cholesterol level",
    "hypertension": "Hypertension",
    "macrosomic_baby": "History of a macrosomic baby",
    "family_history": "Family history of diabetes",
    "smoking_years": "Years of smoking",
    "smoking_habit": "Current smoking habit",
    "exercise_frequency": "Exercise frequency",
}


class MissingProfile(LookupError):
    pass


class Overloaded(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    values: Mapping[str, float]

    def __post_init__(self):
        missing = [n for n in FACTOR_NAMES if n not in self.values]
        if missing:
            raise ValueError(f"missing features: {missing}")
        bad = [n for n in FACTOR_NAMES if not (0.0 <= float(self.values[n]) <= 1.0)]
        if bad:
            raise ValueError(f"features outside [0, 1]: {bad}")

    def __getitem__(self, name: str) -> float:
        return float(self.values[name])

    def with_value(self, name: str, x: float) -> FeatureVector:
        return FeatureVector({**self.values, name: x})

    def to_dict(self) -> dict[str, float]:
        return {n: float(self.values[n]) for n in FACTOR_NAMES}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FeatureVector:
        return cls({n: float(d[n]) for n in FACTOR_NAMES})


@dataclass(frozen=True)
class ModelConfig:
    bias: float = -2.0
    weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    inference_delay_ms: int = 80
    worker_slots: int = 8
    request_timeout_ms: int = 2000
    model_version: str = "logistic-standin-1"

    def __post_init__(self):
        if self.worker_slots < 1:
            raise ValueError("worker_slots must be >= 1")
        if self.inference_delay_ms < 0:
            raise ValueError("inference_delay_ms must be >= 0")
        missing = [n for n in FACTOR_NAMES if n not in self.weights]
        if missing:
            raise ValueError(f"weights missing for {missing}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "bias": self.bias,
            "weights": dict(self.weights),
            "inference_delay_ms": self.inference_delay_ms,
            "worker_slots": self.worker_slots,
            "request_timeout_ms": self.request_timeout_ms,
            "model_version": self.model_version,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelConfig:
        base = cls()
        return cls(
            bias=float(d.get("bias", base.bias)),
            weights={**DEFAULT_WEIGHTS, **{k: float(v) for k, v in d.get("weights", {}).items()}},
            inference_delay_ms=int(d.get("inference_delay_ms", base.inference_delay_ms)),
            worker_slots=int(d.get("worker_slots", base.worker_slots)),
            request_timeout_ms=int(d.get("request_timeout_ms", base.request_timeout_ms)),
            model_version=str(d.get("model_version", base.model_version)),
        )


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def normalize(profile: ProfileRecord | None,
              latest_activities: Mapping[str, ActivityRecord] | None = None) -> FeatureVector:
    """Map a profile plus the latest smoking/exercise entries into [0, 1]^9.

    Smoking is cigarettes per day over 40, exercise is sessions per week over 14.
    A missing activity kind contributes 0.
    """
    if profile is None:
        raise MissingProfile("a profile is required for prediction")
    acts = latest_activities or {}
    smoking = acts.get("smoking")
    exercise = acts.get("exercise")
    return FeatureVector({
        "age": _clamp(profile.age / 120),
        "bmi": _clamp((profile.bmi - 10) / 60),
        "cholesterol": _clamp((profile.cholesterol_level - 80) / 420),
        "hypertension": 1.0 if profile.hypertension else 0.0,
        "macrosomic_baby": 1.0 if profile.macrosomic_baby_history else 0.0,
        "family_history": 1.0 if profile.family_history_diabetes else 0.0,
        "smoking_years": _clamp(profile.smoking_years / 100),
        "smoking_habit": _clamp(smoking.quantity / 40) if smoking else 0.0,
        "exercise_frequency": _clamp(exercise.quantity / 14) if exercise else 0.0,
    })


def explain(name: str, contribution: float) -> str:
    label = _LABELS[name]
    if contribution > 0:
        verb = "raises"
    elif contribution < 0:
        verb = "lowers"
    else:
        verb = "does not change"
    return f"{label} {verb} your estimated diabetes risk (contribution {contribution:+.3f})."


def predict(features: FeatureVector, config: ModelConfig, *, user_id: int = 0,
            at: int | None = None) -> PredictionRecord:
    """Score one feature vector. Pure; the service adds the simulated latency."""
    contributions = [(n, config.weights[n] * features[n]) for n in FACTOR_NAMES]
    logit = config.bias + math.fsum(c for _, c in contributions)
    ts = now_ms() if at is None else at
    return PredictionRecord(
        prediction_id=0,
        user_id=user_id,
        created_at=ts,
        updated_at=ts,
        model_version=config.model_version,
        risk_score=sigmoid(logit),
        factors={n: FactorTriple(c, FactorTriple.impact_for(c), explain(n, c)) for n, c in contributions},
    )


def reconstruct_score(record: PredictionRecord, bias: float) -> float:
    return sigmoid(bias + record.total_contribution())


class PredictorService:
    """One inference instance: a slot-bounded scorer with sync and queue front ends."""

    def __init__(self, config: ModelConfig, name: str = "predictor"):
        self.config = config
        self.name = name
        self._slots = asyncio.Semaphore(config.worker_slots)
        self.active = 0
        self.max_active = 0
        self.completed = 0
        self.rejected = 0
        self._subscription: Subscription | None = None
        self._broker: Broker | RemoteBroker | None = None

    async def infer(self, features: FeatureVector, user_id: int, *,
                    wait_timeout: float | None = None) -> PredictionRecord:
        """Run one prediction in a slot. With ``wait_timeout`` set, give up
        waiting for a slot after that many seconds and raise Overloaded."""
        if wait_timeout is None:
            await self._slots.acquire()
        else:
            try:
                await asyncio.wait_for(self._slots.acquire(), wait_timeout)
            except asyncio.TimeoutError:
                self.rejected += 1
                raise Overloaded(f"{self.name}: no inference slot within {wait_timeout * 1000:.0f} ms") from None
        self.active += 1
        self.max_active = max(self.max_active, self.active)
        try:
            if self.config.inference_delay_ms:
                await asyncio.sleep(self.config.inference_delay_ms / 1000)
            record = predict(features, self.config, user_id=user_id)
            self.completed += 1
            return record
        finally:
            self.active -= 1
            self._slots.release()

    # -- queue mode -------------------------------------------------------

    def serve_async(self, broker: Broker | RemoteBroker) -> Subscription:
        self._broker = broker
        self._subscription = broker.consume(REQUEST_QUEUE, self._on_request, consumer=self.name,
                                            concurrency=self.config.worker_slots)
        return self._subscription

    async def _on_request(self, env: Envelope) -> None:
        assert self._broker is not None
        body = env.json()
        cid = env.correlation_id
        uid = int(body["user_id"])
        await self._broker.publish(RESPONSE_QUEUE, envelope_for(
            cid, RESPONSE_QUEUE, {"kind": "processing", "correlation_id": cid, "user_id": uid}))
        record = await self.infer(FeatureVector.from_dict(body["features"]), uid)
        await self._broker.publish(RESPONSE_QUEUE, envelope_for(
            cid, RESPONSE_QUEUE,
            {"kind": "result", "correlation_id": cid, "user_id": uid, "record": record.to_dict()}))

    async def stop(self, graceful: bool = True) -> None:
        if self._subscription is not None:
            await self._subscription.stop(graceful)
            self._subscription = None

    def stats(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "worker_slots": self.config.worker_slots,
            "active": self.active,
            "max_active": self.max_active,
            "completed": self.completed,
            "rejected": self.rejected,
            "handled_from_queue": self._subscription.handled if self._subscription else 0,
        }


def predictor_app(service: PredictorService) -> web.Application:
    """``POST /predict`` takes ``{"user_id", "features"}`` and returns a PredictionRecord."""

    async def predict_route(request: web.Request) -> web.Response:
        try:
            body = await request.json()
            features = FeatureVector.from_dict(body["features"])
            uid = int(body.get("user_id", 0))
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            return web.json_response({"code": "bad_request", "message": str(exc)}, status=400)
        try:
            record = await service.infer(features, uid,
                                         wait_timeout=service.config.request_timeout_ms / 1000)
        except Overloaded as exc:
            return web.json_response({"code": "overloaded", "message": str(exc)}, status=503)
        return web.json_response(record.to_dict())

    async def healthz(request: web.Request) -> web.Response:
        return web.json_response({"status": "ok"})

    async def stats(request: web.Request) -> web.Response:
        return web.json_response(service.stats())

    app = web.Application()
    app.router.add_post("/predict", predict_route)
    app.router.add_get("/healthz", healthz)
    app.router.add_get("/stats", stats)
    return app


class PredictorClient:
    """Round-robin synchronous RPC to predictor instances."""

    def __init__(self, urls: list[str], session: aiohttp.ClientSession, timeout: float):
        if not urls:
            raise ValueError("no predictor instances configured")
        self.urls = [u.rstrip("/") for u in urls]
        self._session = session
        self._timeout = aiohttp.ClientTimeout(total=timeout)
        self._next = 0

    async def predict(self, features: FeatureVector, user_id: int) -> PredictionRecord:
        url = self.urls[self._next % len(self.urls)]
        self._next += 1
        try:
            async with self._session.post(f"{url}/predict", timeout=self._timeout,
                                          json={"user_id": user_id, "features": features.to_dict()}) as resp:
                if resp.status == 503:
                    raise Overloaded((await resp.json()).get("message", "overloaded"))
                resp.raise_for_status()
                return PredictionRecord.from_dict(await resp.json())
        except asyncio.TimeoutError:
            raise Overloaded(f"{url}: timed out") from None
        except aiohttp.ClientError as exc:
            raise Overloaded(f"{url}: {exc}") from exc
