"""Independent reference computations and frozen expected values.

Nothing here imports shardline. Each oracle is written the slow, obvious way
so the package code is checked against something that shares none of its logic.
"""

from __future__ import annotations

import math

# hand-evaluated: 1 / (1 + e^2)
SIGMOID_MINUS_2 = 1.0 / (1.0 + math.e ** 2)
SIGMOID_MINUS_2_ROUNDED = 0.119203

# (28.4 - 10) / 60, evaluated by hand to four places
X_BMI_AT_28_4 = 0.3067

# the 20 published rows with the verdict printed beside each one (transcribed, not computed)
TABLE_ROWS: list[tuple[str, float, float, str]] = [
    ("Login", 1.45, 1100, "PARTIAL"),
    ("Get User Info", 0.39, 601, "PASS"),
    ("Put User", 4.70, 691, "PASS"),
    ("Patch User", 2.76, 756, "PASS"),
    ("Get User Profile", 0.24, 1100, "PARTIAL"),
    ("Post User Profile", 0.56, 234, "PASS"),
    ("Put User Profile", 0.89, 167, "PASS"),
    ("Delete User Profile", 0.50, 243, "PASS"),
    ("Get Activity", 0.35, 56, "PASS"),
    ("Get Activity by ID", 0.94, 150, "PASS"),
    ("Post Activity", 0.13, 55, "PASS"),
    ("Put Activity", 1.26, 514, "PASS"),
    ("Delete Activity", 1.12, 717, "PASS"),
    ("Get Activity Count", 0.56, 69, "PASS"),
    ("Get Prediction", 1.54, 813, "PASS"),
    ("Get Prediction by Date", 3.53, 1070, "PARTIAL"),
    ("Post Prediction (Async)", 3.14, 1539, "PARTIAL"),
    ("Get Prediction Status", 1.27, 525, "PASS"),
    ("Get Prediction Result", 2.71, 787, "PASS"),
    ("Delete Prediction", 4.86, 945, "PASS"),
]
TABLE_PARTIALS = {"Login", "Get User Profile", "Get Prediction by Date", "Post Prediction (Async)"}

# 31 / 3.14
SYNC_ASYNC_RATIO = 9.87

WEIGHTS = {
    "age": 1.2, "bmi": 1.5, "cholesterol": 0.8, "hypertension": 0.9, "macrosomic_baby": 0.5,
    "family_history": 1.0, "smoking_years": 1.1, "smoking_habit": 0.6, "exercise_frequency": -0.7,
}
BIAS = -2.0


def brute_force_ranges(capacity: int, last_id: int) -> list[tuple[int, int, int]]:
    """Walk ids one by one, opening a new shard every ``capacity`` ids."""
    ranges: list[tuple[int, int, int]] = []
    shard, lo = 0, 1
    for uid in range(1, last_id + 1):
        if uid - lo + 1 == capacity:
            ranges.append((lo, uid, shard))
            shard += 1
            lo = uid + 1
    return ranges


def brute_force_shard(uid: int, ranges: list[tuple[int, int, int]]) -> int | None:
    hits = [s for lo, hi, s in ranges if lo <= uid <= hi]
    assert len(hits) <= 1
    return hits[0] if hits else None


def reference_sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def reference_score(x: dict[str, float]) -> float:
    z = BIAS
    for name, w in WEIGHTS.items():
        z += w * x[name]
    return reference_sigmoid(z)


def reference_percentile(values: list[float], q: float) -> float:
    """Nearest rank: the smallest value with at least q% of the data at or below it."""
    ordered = sorted(values)
    n = len(ordered)
    for i, v in enumerate(ordered, start=1):
        if i * 100 >= q * n:
            return v
    return ordered[-1]


def reference_verdict(error_rate: float, avg_latency: float) -> str:
    ok_err = error_rate <= 5.0
    ok_lat = avg_latency <= 1000.0
    if ok_err and ok_lat:
        return "PASS"
    if ok_err or ok_lat:
        return "PARTIAL"
    return "FAIL"
