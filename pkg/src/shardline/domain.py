"""Entity types, validation rules and identifiers shared by every role.

All records are frozen dataclasses. Timestamps are integer milliseconds since
the epoch. The canonical wire form of every record is a JSON object with
snake_case keys (see ``to_dict`` / ``from_dict`` on each type).
"""

from __future__ import annotations

import math
import secrets
import time
from dataclasses import dataclass, fields, replace
from typing import Any, Iterable, Mapping

FACTOR_NAMES: tuple[str, ...] = (
    "age",
    "bmi",
    "cholesterol",
    "hypertension",
    "macrosomic_baby",
    "family_history",
    "smoking_years",
    "smoking_habit",
    "exercise_frequency",
)

ACTIVITY_KINDS = ("smoking", "exercise")
IMPACTS = ("raises_risk", "lowers_risk", "neutral")
JOB_STATUSES = ("pending", "processing", "completed", "failed")

# allowed forward moves of a PredictionJob
_JOB_TRANSITIONS = {
    "pending": {"processing"},
    "processing": {"completed", "failed"},
    "completed": set(),
    "failed": set(),
}

PREDICTION_META_FIELDS = (
    "prediction_id",
    "user_id",
    "created_at",
    "updated_at",
    "model_version",
    "risk_score",
)


def now_ms() -> int:
    return time.time_ns() // 1_000_000


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def new_correlation_id() -> str:
    """128 random bits as 32 lowercase hex characters."""
    return secrets.token_hex(16)


class ValidationError(ValueError):
    """One or more fields are out of range.

    ``errors`` is a list of ``{"field", "range"}`` dicts, one per violated field.
    """

    def __init__(self, errors: list[dict[str, Any]]):
        self.errors = errors
        names = ", ".join(e["field"] for e in errors)
        super().__init__(f"invalid fields: {names}")


class InvalidTransition(ValueError):
    pass


@dataclass(frozen=True)
class UserRecord:
    id: int
    email: str
    password_hash: str
    display_name: str
    verified: bool
    created_at: int

    def to_dict(self) -> dict[str, Any]:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> UserRecord:
        return cls(**_pick(cls, d))

    def public(self) -> dict[str, Any]:
        d = self.to_dict()
        del d["password_hash"]
        return d


@dataclass(frozen=True)
class ProfileRecord:
    user_id: int
    age: int
    bmi: float
    cholesterol_level: int
    hypertension: bool
    macrosomic_baby_history: bool
    family_history_diabetes: bool
    smoking_years: int
    updated_at: int

    def to_dict(self) -> dict[str, Any]:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ProfileRecord:
        return cls(**_pick(cls, d))


@dataclass(frozen=True)
class ActivityRecord:
    activity_id: int
    user_id: int
    kind: str
    quantity: int
    recorded_at: int

    def to_dict(self) -> dict[str, Any]:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ActivityRecord:
        return cls(**_pick(cls, d))


@dataclass(frozen=True)
class FactorTriple:
    contribution: float
    impact: str
    explanation: str

    @staticmethod
    def impact_for(contribution: float) -> str:
        if contribution > 0:
            return "raises_risk"
        if contribution < 0:
            return "lowers_risk"
        return "neutral"

    def to_dict(self) -> dict[str, Any]:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FactorTriple:
        return cls(**_pick(cls, d))


@dataclass(frozen=True)
class PredictionRecord:
    """A fully explained prediction: 6 metadata fields plus 9 factor triples.

    ``prediction_id`` is 0 until the record has been stored.
    """

    prediction_id: int
    user_id: int
    created_at: int
    updated_at: int
    model_version: str
    risk_score: float
    factors: Mapping[str, FactorTriple]

    def to_dict(self) -> dict[str, Any]:
        d = {name: getattr(self, name) for name in PREDICTION_META_FIELDS}
        d["factors"] = {name: self.factors[name].to_dict() for name in FACTOR_NAMES}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PredictionRecord:
        factors = {name: FactorTriple.from_dict(d["factors"][name]) for name in FACTOR_NAMES}
        return cls(
            prediction_id=int(d["prediction_id"]),
            user_id=int(d["user_id"]),
            created_at=int(d["created_at"]),
            updated_at=int(d["updated_at"]),
            model_version=str(d["model_version"]),
            risk_score=float(d["risk_score"]),
            factors=factors,
        )

    def flatten(self) -> dict[str, Any]:
        """One column per attribute, as the prediction table stores it."""
        row = {name: getattr(self, name) for name in PREDICTION_META_FIELDS}
        for name in FACTOR_NAMES:
            f = self.factors[name]
            row[f"{name}_contribution"] = f.contribution
            row[f"{name}_impact"] = f.impact
            row[f"{name}_explanation"] = f.explanation
        return row

    def total_contribution(self) -> float:
        return math.fsum(self.factors[name].contribution for name in FACTOR_NAMES)


@dataclass(frozen=True)
class PredictionJob:
    correlation_id: str
    user_id: int
    status: str
    submitted_at: int
    completed_at: int | None = None
    result: PredictionRecord | None = None
    error_detail: str | None = None

    def advance(self, status: str, *, at: int | None = None,
                result: PredictionRecord | None = None,
                error_detail: str | None = None) -> PredictionJob:
        if status not in _JOB_TRANSITIONS[self.status]:
            raise InvalidTransition(f"{self.status} -> {status}")
        if status == "completed" and result is None:
            raise InvalidTransition("completed job needs a result")
        done = status in ("completed", "failed")
        return replace(
            self,
            status=status,
            completed_at=(at if at is not None else now_ms()) if done else None,
            result=result if status == "completed" else None,
            error_detail=error_detail if status == "failed" else None,
        )

    def to_dict(self) -> dict[str, Any]:
        d = _plain(self)
        d["result"] = self.result.to_dict() if self.result is not None else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PredictionJob:
        kw = _pick(cls, d)
        if kw.get("result") is not None:
            kw["result"] = PredictionRecord.from_dict(kw["result"])
        return cls(**kw)


RECORD_TYPES = {
    t.__name__: t
    for t in (UserRecord, ProfileRecord, ActivityRecord, FactorTriple, PredictionRecord, PredictionJob)
}


# inclusive numeric bounds: field -> (lo, hi, type)
PROFILE_RANGES: dict[str, tuple[float, float, type]] = {
    "age": (0, 120, int),
    "bmi": (10.0, 70.0, float),
    "cholesterol_level": (80, 500, int),
    "smoking_years": (0, 100, int),
}
PROFILE_FLAGS = ("hypertension", "macrosomic_baby_history", "family_history_diabetes")


def validate_profile(candidate: Mapping[str, Any], *, user_id: int | None = None,
                     at: int | None = None) -> ProfileRecord:
    """Normalize a profile-shaped mapping, or raise ValidationError listing every bad field."""
    errors: list[dict[str, Any]] = []
    values: dict[str, Any] = {}
    for name, (lo, hi, kind) in PROFILE_RANGES.items():
        raw = candidate.get(name)
        rng = [lo, hi]
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            errors.append({"field": name, "range": rng})
            continue
        if kind is int and float(raw) != int(raw):
            errors.append({"field": name, "range": rng})
            continue
        if not (lo <= raw <= hi) or (isinstance(raw, float) and math.isnan(raw)):
            errors.append({"field": name, "range": rng})
            continue
        values[name] = kind(raw)
    for name in PROFILE_FLAGS:
        raw = candidate.get(name)
        if not isinstance(raw, bool):
            errors.append({"field": name, "range": [False, True]})
            continue
        values[name] = raw
    uid = user_id if user_id is not None else candidate.get("user_id")
    if not isinstance(uid, int) or isinstance(uid, bool) or uid < 1:
        errors.append({"field": "user_id", "range": [1, None]})
    if errors:
        raise ValidationError(errors)
    return ProfileRecord(user_id=uid, updated_at=at if at is not None else now_ms(), **values)


def validate_activity(candidate: Mapping[str, Any]) -> tuple[str, int]:
    errors = []
    kind = candidate.get("kind")
    if kind not in ACTIVITY_KINDS:
        errors.append({"field": "kind", "range": list(ACTIVITY_KINDS)})
    qty = candidate.get("quantity")
    if isinstance(qty, bool) or not isinstance(qty, int) or qty < 0:
        errors.append({"field": "quantity", "range": [0, None]})
    if errors:
        raise ValidationError(errors)
    return kind, qty


def count_leaves(obj: Any) -> int:
    if isinstance(obj, Mapping):
        return sum(count_leaves(v) for v in obj.values())
    return 1


def _plain(rec: Any) -> dict[str, Any]:
    return {f.name: getattr(rec, f.name) for f in fields(rec)}


def _pick(cls: type, d: Mapping[str, Any]) -> dict[str, Any]:
    names = [f.name for f in fields(cls)]
    missing = [n for n in names if n not in d and _required(cls, n)]
    if missing:
        raise KeyError(f"{cls.__name__}: missing {missing}")
    return {n: d[n] for n in names if n in d}


def _required(cls: type, name: str) -> bool:
    from dataclasses import MISSING

    f = cls.__dataclass_fields__[name]
    return f.default is MISSING and f.default_factory is MISSING


def iter_factor_triples(contributions: Iterable[tuple[str, float]], explain) -> dict[str, FactorTriple]:
    return {
        name: FactorTriple(c, FactorTriple.impact_for(c), explain(name, c))
        for name, c in contributions
    }
