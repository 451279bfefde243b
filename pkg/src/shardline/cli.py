"""``shardline`` command line: one binary for every role and workflow."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from . import loadgen
from .config import ConfigError, PortInUse, load_config
from .deploy import ROLES, DirtyDataDir, census, queue_depths, seed, serve_forever
from .shard_router import StoreUnavailable

log = logging.getLogger("shardline")

BASELINE_TABLE = "baseline_10k_vus.csv"
LOOP_ENV = "SHARDLINE_LOOP"


def install_event_loop_policy(kind: str | None = None) -> None:
    kind = kind or os.environ.get(LOOP_ENV, "asyncio")
    if kind != "uvloop":
        return
    try:
        import uvloop
    except ImportError:
        log.warning("uvloop requested but not installed; using asyncio")
        return
    asyncio.set_event_loop_policy(uvloop.EventLoopPolicy())


def _dump(obj: Any) -> None:
    json.dump(obj, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")


def cmd_serve(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg = cfg.with_overrides(prediction_mode=args.mode)

    def ready(dep) -> None:
        print(f"{args.role} ready", flush=True)

    try:
        asyncio.run(serve_forever(cfg, args.role, args.index, ready))
    except KeyboardInterrupt:
        pass
    return 0


def cmd_seed(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    counts = seed(cfg, args.users, args.credentials)
    _dump({"users": args.users, "census": counts, "credentials": str(args.credentials)})
    return 0


def cmd_loadtest(args: argparse.Namespace) -> int:
    scenario = loadgen.Scenario.load(args.scenario)
    population = loadgen.load_population(args.credentials)
    report = asyncio.run(loadgen.run(scenario, args.target, population, args.out))
    _dump(report.to_dict())
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    path = args.metrics
    if path is None:
        with resources.as_file(resources.files("shardline") / "data" / BASELINE_TABLE) as p:
            summary = loadgen.replay_table(p)
    else:
        summary = loadgen.replay_table(path)
    if args.json:
        _dump(summary)
        return 0
    for row in summary["rows"]:
        print(f"{row['name']:<32} {row['error_rate']:>6.2f}% {row['avg_latency']:>8.0f} ms  {row['verdict']}")
    c = summary["counts"]
    print(f"{summary['total']} rows: {c['PASS']} PASS, {c['PARTIAL']} PARTIAL, {c['FAIL']} FAIL")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    result = loadgen.compare_modes(loadgen.LoadReport.load(args.sync), loadgen.LoadReport.load(args.async_))
    _dump(result)
    return 0


def cmd_census(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _dump({"census": asyncio.run(census(cfg))})
    return 0


def cmd_queues(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _dump(asyncio.run(queue_depths(cfg)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shardline", description=__doc__)
    p.add_argument("--config", help="deployment config (JSON); defaults to $SHARDLINE_CONFIG")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run one deployment role")
    s.add_argument("role", choices=ROLES)
    s.add_argument("--index", type=int, default=0, help="which backend/predictor/shard to run")
    s.add_argument("--mode", choices=("sync", "async"), help="override prediction_mode")
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("seed", help="populate a clean data directory")
    s.add_argument("--users", type=int, default=10_000)
    s.add_argument("--credentials", type=Path, default=Path("credentials.csv"))
    s.set_defaults(fn=cmd_seed)

    s = sub.add_parser("loadtest", help="run a scenario against a live deployment")
    s.add_argument("--scenario", required=True, type=Path)
    s.add_argument("--target", required=True)
    s.add_argument("--credentials", type=Path, default=Path("credentials.csv"))
    s.add_argument("--out", type=Path, default=Path("loadtest-out"))
    s.set_defaults(fn=cmd_loadtest)

    s = sub.add_parser("replay", help="classify a metrics table (bundled baseline when omitted)")
    s.add_argument("--metrics", type=Path)
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_replay)

    s = sub.add_parser("compare", help="compare sync and async reports of one scenario")
    s.add_argument("--sync", required=True, type=Path)
    s.add_argument("--async", dest="async_", required=True, type=Path)
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("census", help="users per shard")
    s.set_defaults(fn=cmd_census)

    s = sub.add_parser("queues", help="broker queue depths")
    s.set_defaults(fn=cmd_queues)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    install_event_loop_policy()
    try:
        return args.fn(args)
    except (ConfigError, DirtyDataDir, PortInUse, StoreUnavailable, loadgen.AbortedRun,
            loadgen.ParseError, loadgen.ScenarioMismatch, FileNotFoundError) as exc:
        print(f"shardline: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
