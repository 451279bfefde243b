"""Closed-loop virtual-user load generator and SLO report classifier.

Scenario files are JSON::

    {
      "name": "get-activities",
      "method": "GET",
      "endpoint": "/activities",
      "body": null,                       # JSON value; strings may use ${user_id} ${vu} ${iteration} ${now_ms}
      "vu_ramp": [[100, 20], [500, 20]],  # (target_vus, hold_seconds)
      "think_time_ms": 0,
      "request_timeout_ms": 10000
    }

Each virtual user owns one authenticated user from the population and loops
request -> record sample -> think until its stage ends. A sample fails on a
transport error, a timeout or a 5xx; 4xx answers are client errors and count
as successes for the error rate.
"""

from __future__ import annotations

import asyncio
import csv
import hashlib
import json
import logging
import math
import string
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import aiohttp

log = logging.getLogger(__name__)

ERROR_RATE_LIMIT = 5.0  # percent, inclusive
LATENCY_LIMIT_MS = 1000.0  # inclusive


class AbortedRun(RuntimeError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ScenarioMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    endpoint: str
    method: str = "GET"
    body: Any = None
    stages: tuple[tuple[int, float], ...] = ((10, 10.0),)
    think_time_ms: int = 0
    request_timeout_ms: int = 10_000

    def __post_init__(self):
        if not self.stages:
            raise ValueError("scenario needs at least one stage")
        for vus, hold in self.stages:
            if vus < 1 or hold < 0:
                raise ValueError(f"bad stage ({vus}, {hold})")

    @property
    def max_vus(self) -> int:
        return max(v for v, _ in self.stages)

    @property
    def duration(self) -> float:
        return sum(h for _, h in self.stages)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "method": self.method, "endpoint": self.endpoint, "body": self.body,
                "vu_ramp": [list(s) for s in self.stages], "think_time_ms": self.think_time_ms,
                "request_timeout_ms": self.request_timeout_ms}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Scenario:
        return cls(name=str(d["name"]), endpoint=str(d["endpoint"]), method=str(d.get("method", "GET")).upper(),
                   body=d.get("body"),
                   stages=tuple((int(v), float(h)) for v, h in d.get("vu_ramp", d.get("stages", [[10, 10]]))),
                   think_time_ms=int(d.get("think_time_ms", 0)),
                   request_timeout_ms=int(d.get("request_timeout_ms", 10_000)))

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        """Identity of the workload; the name is deliberately left out."""
        d = self.to_dict()
        del d["name"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class VirtualUser:
    user_id: int
    token: str


@dataclass(frozen=True)
class Sample:
    start_ms: float
    latency_ms: float
    status: int
    ok: bool


@dataclass
class LoadReport:
    scenario: str
    total_requests: int
    failures: int
    error_rate: float
    avg_latency: float
    p95_latency: float
    rps: float
    verdict: str
    duration_s: float = 0.0
    max_vus: int = 0
    scenario_digest: str = ""
    status_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> LoadReport:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def load(cls, path: str | Path) -> LoadReport:
        return cls.from_dict(json.loads(Path(path).read_text()))


def classify(error_rate: float, avg_latency: float) -> str:
    """PASS when both targets hold, PARTIAL when one does, FAIL otherwise. Bounds are inclusive."""
    met = (error_rate <= ERROR_RATE_LIMIT) + (avg_latency <= LATENCY_LIMIT_MS)
    return ("FAIL", "PARTIAL", "PASS")[met]


def percentile(sorted_values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile of already sorted data."""
    if not sorted_values:
        return 0.0
    rank = max(1, math.ceil(q / 100 * len(sorted_values)))
    return float(sorted_values[rank - 1])


def summarize(samples: Sequence[Sample], scenario: Scenario | str, duration_s: float) -> LoadReport:
    name = scenario if isinstance(scenario, str) else scenario.name
    total = len(samples)
    failures = sum(1 for s in samples if not s.ok)
    latencies = sorted(s.latency_ms for s in samples)
    error_rate = 100.0 * failures / total if total else 100.0
    avg = math.fsum(latencies) / total if total else 0.0
    counts: dict[str, int] = {}
    for s in samples:
        counts[str(s.status)] = counts.get(str(s.status), 0) + 1
    verdict = classify(error_rate, avg)
    if total == 0 or failures == total:
        verdict = "FAIL"
    return LoadReport(
        scenario=name,
        total_requests=total,
        failures=failures,
        error_rate=error_rate,
        avg_latency=avg,
        p95_latency=percentile(latencies, 95),
        rps=total / duration_s if duration_s > 0 else 0.0,
        verdict=verdict,
        duration_s=duration_s,
        max_vus=0 if isinstance(scenario, str) else scenario.max_vus,
        scenario_digest="" if isinstance(scenario, str) else scenario.digest(),
        status_counts=dict(sorted(counts.items())),
    )


def is_failure(status: int) -> bool:
    return status == 0 or status >= 500


def _render(value: Any, variables: Mapping[str, Any]) -> Any:
    if isinstance(value, str):
        rendered = string.Template(value).safe_substitute(variables)
        # a lone placeholder keeps the variable's type
        if value.startswith("${") and value.endswith("}") and value[2:-1] in variables:
            return variables[value[2:-1]]
        return rendered
    if isinstance(value, list):
        return [_render(v, variables) for v in value]
    if isinstance(value, dict):
        return {k: _render(v, variables) for k, v in value.items()}
    return value


class LoadRun:
    """One execution of a scenario; samples accumulate in memory."""

    def __init__(self, scenario: Scenario, target: str, population: Sequence[VirtualUser],
                 session: aiohttp.ClientSession | None = None):
        if len(population) < scenario.max_vus:
            raise ValueError(f"population of {len(population)} users is smaller than {scenario.max_vus} VUs")
        self.scenario = scenario
        self.target = target.rstrip("/")
        self.population = list(population)
        self.samples: list[Sample] = []
        self._session = session
        self._t0 = 0.0

    async def _vu(self, index: int, stop: asyncio.Event, session: aiohttp.ClientSession) -> None:
        sc = self.scenario
        user = self.population[index]
        headers = {"Authorization": f"Bearer {user.token}"}
        timeout = aiohttp.ClientTimeout(total=sc.request_timeout_ms / 1000)
        iteration = 0
        while not stop.is_set():
            variables = {"user_id": user.user_id, "vu": index, "iteration": iteration,
                         "now_ms": time.time_ns() // 1_000_000}
            path = _render(sc.endpoint, variables)
            body = _render(sc.body, variables) if sc.body is not None else None
            start = time.perf_counter()
            status = 0
            try:
                async with session.request(sc.method, self.target + path, json=body, headers=headers,
                                           timeout=timeout) as resp:
                    await resp.read()
                    status = resp.status
            except (aiohttp.ClientError, asyncio.TimeoutError, OSError):
                status = 0
            end = time.perf_counter()
            self.samples.append(Sample((start - self._t0) * 1000, (end - start) * 1000, status,
                                       not is_failure(status)))
            iteration += 1
            if sc.think_time_ms:
                await asyncio.sleep(sc.think_time_ms / 1000)

    async def execute(self) -> LoadReport:
        own = self._session is None
        session = self._session or aiohttp.ClientSession(
            connector=aiohttp.TCPConnector(limit=0, limit_per_host=0))
        try:
            try:
                async with session.get(self.target + "/healthz",
                                       timeout=aiohttp.ClientTimeout(total=5)) as resp:
                    await resp.read()
            except (aiohttp.ClientError, asyncio.TimeoutError, OSError) as exc:
                raise AbortedRun(f"target {self.target} unreachable: {exc}") from exc

            self._t0 = time.perf_counter()
            running: list[tuple[asyncio.Task, asyncio.Event]] = []
            for target_vus, hold in self.scenario.stages:
                while len(running) < target_vus:
                    ev = asyncio.Event()
                    running.append((asyncio.create_task(self._vu(len(running), ev, session)), ev))
                while len(running) > target_vus:
                    task, ev = running.pop()
                    ev.set()
                await asyncio.sleep(hold)
            for _, ev in running:
                ev.set()
            # VUs finish their in-flight iteration; bounded by the request timeout
            await asyncio.gather(*(t for t, _ in running), return_exceptions=True)
            elapsed = time.perf_counter() - self._t0
        finally:
            if own:
                await session.close()
        return summarize(self.samples, self.scenario, elapsed)


def write_samples(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start_ms", "latency_ms", "status", "ok"])
        for s in samples:
            w.writerow([f"{s.start_ms:.3f}", f"{s.latency_ms:.3f}", s.status, int(s.ok)])


def read_samples(path: str | Path) -> list[Sample]:
    with open(path, newline="") as fh:
        return [Sample(float(r["start_ms"]), float(r["latency_ms"]), int(r["status"]), r["ok"] == "1")
                for r in csv.DictReader(fh)]


def load_population(path: str | Path) -> list[VirtualUser]:
    """Read ``user_id,email,password,token`` rows written by ``seed``."""
    with open(path, newline="") as fh:
        return [VirtualUser(int(r["user_id"]), r["token"]) for r in csv.DictReader(fh)]


async def run(scenario: Scenario, target: str, population: Sequence[VirtualUser],
              out_dir: str | Path | None = None) -> LoadReport:
    lr = LoadRun(scenario, target, population)
    report = await lr.execute()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_samples(lr.samples, out / "samples.csv")
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


# -- table replay ----------------------------------------------------------


@dataclass(frozen=True)
class ReplayRow:
    name: str
    error_rate: float
    avg_latency: float
    verdict: str


def _number(raw: str, line: int, what: str) -> float:
    cleaned = raw.strip().rstrip("%").replace(",", "").replace("_", "")
    try:
        value = float(cleaned)
    except ValueError:
        raise ParseError(line, f"{what} {raw!r} is not a number") from None
    if math.isnan(value) or value < 0:
        raise ParseError(line, f"{what} {raw!r} must be a non-negative number")
    return value


def replay_table(path: str | Path) -> dict[str, Any]:
    """Classify every ``name,error_rate,avg_latency`` row of a metrics CSV.

    A header row is optional. Percent signs and thousands separators are accepted.
    """
    rows: list[ReplayRow] = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec) or rec[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and rec[0].strip().lower() in ("name", "feature", "endpoint"):
                continue
            if len(rec) != 3:
                raise ParseError(lineno, f"expected 3 columns, got {len(rec)}")
            err = _number(rec[1], lineno, "error_rate")
            lat = _number(rec[2], lineno, "avg_latency")
            rows.append(ReplayRow(rec[0].strip(), err, lat, classify(err, lat)))
    counts = {"PASS": 0, "PARTIAL": 0, "FAIL": 0}
    for r in rows:
        counts[r.verdict] += 1
    return {"rows": [asdict(r) for r in rows], "counts": counts, "total": len(rows)}


def compare_modes(sync_report: LoadReport, async_report: LoadReport) -> dict[str, Any]:
    """Error-rate ratio sync/async for two runs of the same workload."""
    if sync_report.scenario != async_report.scenario or (
            sync_report.scenario_digest and async_report.scenario_digest
            and sync_report.scenario_digest != async_report.scenario_digest):
        raise ScenarioMismatch(f"{sync_report.scenario!r} vs {async_report.scenario!r}")
    s, a = sync_report.error_rate, async_report.error_rate
    if a == 0:
        ratio = 1.0 if s == 0 else math.inf
    else:
        ratio = s / a
    return {
        "scenario": sync_report.scenario,
        "sync_error_rate": s,
        "async_error_rate": a,
        "error_rate_ratio": ratio,
        "async_superior": a < s,
        "sync_verdict": sync_report.verdict,
        "async_verdict": async_report.verdict,
    }
